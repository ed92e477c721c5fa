use serde::{Deserialize, Serialize};

use super::real::Real;

/// Per-patch distance between a prediction and its target embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossDistance {
    Cosine,
    L2,
}

impl LossDistance {
    pub fn as_str(self) -> &'static str {
        match self {
            LossDistance::Cosine => "cosine",
            LossDistance::L2 => "l2",
        }
    }
}

impl std::str::FromStr for LossDistance {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cosine" => Ok(LossDistance::Cosine),
            "l2" => Ok(LossDistance::L2),
            _ => Err(format!("unknown distance {s:?} (expected cosine or l2)")),
        }
    }
}

/// How per-patch losses of one image combine into the optimized objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossReduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossStats {
    /// Mean per-patch loss, whatever the reduction.
    pub mean: f64,
    /// Patches whose cosine loss was undefined (a zero-norm operand).
    pub degenerate: usize,
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Cosine: `1 - cos(pred, target)`, defined as 1 when either vector is zero.
/// L2: Euclidean distance.
pub fn per_patch_loss<T: Real>(pred: &[T], target: &[T], distance: LossDistance) -> T {
    assert_eq!(pred.len(), target.len(), "loss operands differ in length");
    match distance {
        LossDistance::Cosine => {
            let np = dot(pred, pred).sqrt();
            let nt = dot(target, target).sqrt();
            if np == T::zero() || nt == T::zero() {
                T::one()
            } else {
                T::one() - dot(pred, target) / (np * nt)
            }
        }
        LossDistance::L2 => pred
            .iter()
            .zip(target)
            .fold(T::zero(), |acc, (&p, &t)| acc + (p - t) * (p - t))
            .sqrt(),
    }
}

/// Loss statistics and `d objective / d pred` for a row-major batch.
pub(crate) fn batch_loss_grad<T: Real>(
    pred: &[T],
    target: &[T],
    dim: usize,
    distance: LossDistance,
    reduction: LossReduction,
) -> (LossStats, Vec<T>) {
    let batch = pred.len() / dim;
    let scale = match reduction {
        LossReduction::Mean => T::one() / T::from_f64(batch as f64),
        LossReduction::Sum => T::one(),
    };
    let mut grad = vec![T::zero(); pred.len()];
    let mut total = 0.0f64;
    let mut degenerate = 0;
    for ((p, t), g) in pred
        .chunks_exact(dim)
        .zip(target.chunks_exact(dim))
        .zip(grad.chunks_exact_mut(dim))
    {
        match distance {
            LossDistance::Cosine => {
                let np = dot(p, p).sqrt();
                let nt = dot(t, t).sqrt();
                if np == T::zero() || nt == T::zero() {
                    degenerate += 1;
                    total += 1.0;
                    continue;
                }
                let cos = dot(p, t) / (np * nt);
                total += (T::one() - cos).as_f64();
                // d(1 - cos)/dp = -(t / (|p||t|) - cos * p / |p|^2)
                let inv_pt = T::one() / (np * nt);
                let c_pp = cos / (np * np);
                for ((gi, &pi), &ti) in g.iter_mut().zip(p).zip(t) {
                    *gi = scale * (c_pp * pi - inv_pt * ti);
                }
            }
            LossDistance::L2 => {
                let norm = p
                    .iter()
                    .zip(t)
                    .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b))
                    .sqrt();
                total += norm.as_f64();
                if norm > T::zero() {
                    for ((gi, &pi), &ti) in g.iter_mut().zip(p).zip(t) {
                        *gi = scale * (pi - ti) / norm;
                    }
                }
            }
        }
    }
    if degenerate > 0 {
        log::debug!("{degenerate} patches with zero-norm cosine operands");
    }
    let stats = LossStats {
        mean: if batch == 0 { 0.0 } else { total / batch as f64 },
        degenerate,
    };
    (stats, grad)
}
