use rand::Rng;

use super::loss::{batch_loss_grad, LossDistance, LossReduction, LossStats};
use super::real::Real;
use crate::error::{Error, Result};

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// `x * Phi(x)` with the exact erf-based normal CDF.
pub fn gelu<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * x * (T::one() + (x * T::from_f64(INV_SQRT_2)).erf())
}

/// `Phi(x) + x * phi(x)`.
pub fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let cdf = half * (T::one() + (x * T::from_f64(INV_SQRT_2)).erf());
    let pdf = T::from_f64(INV_SQRT_2PI) * (-half * x * x).exp();
    cdf + x * pdf
}

/// Weights and biases of a three-layer MLP. Matrices are row-major
/// `[fan_in][fan_out]`, so a batch `X` (rows = patches) maps to `X W + b`.
///
/// The same shape doubles as the gradient and Adam-moment container.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub d_in: usize,
    pub units: usize,
    pub d_out: usize,
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: Vec<T>,
    pub w3: Vec<T>,
    pub b3: Vec<T>,
}

pub const BLOCK_NAMES: [&str; 6] = ["w1", "b1", "w2", "b2", "w3", "b3"];

impl<T: Real> Params<T> {
    pub fn zeros(d_in: usize, units: usize, d_out: usize) -> Self {
        Params {
            d_in,
            units,
            d_out,
            w1: vec![T::zero(); d_in * units],
            b1: vec![T::zero(); units],
            w2: vec![T::zero(); units * units],
            b2: vec![T::zero(); units],
            w3: vec![T::zero(); units * d_out],
            b3: vec![T::zero(); d_out],
        }
    }

    /// Glorot-uniform matrices, zero biases.
    pub fn glorot<R: Rng>(d_in: usize, units: usize, d_out: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(d_in, units, d_out);
        for (w, fan_in, fan_out) in [
            (&mut p.w1, d_in, units),
            (&mut p.w2, units, units),
            (&mut p.w3, units, d_out),
        ] {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in w.iter_mut() {
                *v = T::from_f64(rng.gen_range(-limit..limit));
            }
        }
        p
    }

    pub fn blocks(&self) -> [(&'static str, &[T]); 6] {
        [
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("w3", &self.w3),
            ("b3", &self.b3),
        ]
    }

    pub fn blocks_mut(&mut self) -> [(&'static str, &mut Vec<T>); 6] {
        [
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
            ("w3", &mut self.w3),
            ("b3", &mut self.b3),
        ]
    }

    pub fn same_shape(&self, other: &Params<T>) -> bool {
        (self.d_in, self.units, self.d_out) == (other.d_in, other.units, other.d_out)
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|(_, b)| b.iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        let c = |v: &Vec<T>| v.iter().map(|x| U::from_f64(x.as_f64())).collect();
        Params {
            d_in: self.d_in,
            units: self.units,
            d_out: self.d_out,
            w1: c(&self.w1),
            b1: c(&self.b1),
            w2: c(&self.w2),
            b2: c(&self.b2),
            w3: c(&self.w3),
            b3: c(&self.b3),
        }
    }
}

/// Adam first/second moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Params<T>,
    pub v: Params<T>,
    pub step: u64,
}

/// One Student network: shared across all patch positions of an image.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentNet<T = f32> {
    pub params: Params<T>,
    pub adam: AdamState<T>,
}

/// Activations kept from the forward pass for backpropagation.
pub struct ForwardCache<T> {
    pub batch: usize,
    pub h1: Vec<T>,
    pub a1: Vec<T>,
    pub h2: Vec<T>,
    pub a2: Vec<T>,
    pub out: Vec<T>,
}

fn affine<T: Real>(x: &[T], batch: usize, fan_in: usize, w: &[T], b: &[T]) -> Vec<T> {
    let fan_out = b.len();
    let mut out = Vec::with_capacity(batch * fan_out);
    for _ in 0..batch {
        out.extend_from_slice(b);
    }
    T::gemm(
        batch,
        fan_in,
        fan_out,
        T::one(),
        x,
        fan_in as isize,
        1,
        w,
        fan_out as isize,
        1,
        T::one(),
        &mut out,
        fan_out as isize,
        1,
    );
    out
}

/// `x^T dy` for row-major `x` (batch×p) and `dy` (batch×q) into a p×q matrix.
fn weight_grad<T: Real>(x: &[T], dy: &[T], batch: usize, p: usize, q: usize) -> Vec<T> {
    let mut out = vec![T::zero(); p * q];
    T::gemm(
        p, batch, q, T::one(), x, 1, p as isize, dy, q as isize, 1, T::zero(), &mut out,
        q as isize, 1,
    );
    out
}

/// `dy w^T` for `dy` (batch×q) and row-major `w` (p×q) into batch×p.
fn input_grad<T: Real>(dy: &[T], w: &[T], batch: usize, p: usize, q: usize) -> Vec<T> {
    let mut out = vec![T::zero(); batch * p];
    T::gemm(
        batch, q, p, T::one(), dy, q as isize, 1, w, 1, q as isize, T::zero(), &mut out,
        p as isize, 1,
    );
    out
}

fn column_sums<T: Real>(dy: &[T], width: usize) -> Vec<T> {
    let mut out = vec![T::zero(); width];
    for row in dy.chunks_exact(width) {
        for (o, v) in out.iter_mut().zip(row) {
            *o = *o + *v;
        }
    }
    out
}

impl<T: Real> StudentNet<T> {
    pub fn from_params(params: Params<T>) -> Self {
        let zeros = Params::zeros(params.d_in, params.units, params.d_out);
        StudentNet {
            adam: AdamState {
                m: zeros.clone(),
                v: zeros,
                step: 0,
            },
            params,
        }
    }

    pub fn new<R: Rng>(d_in: usize, units: usize, d_out: usize, rng: &mut R) -> Self {
        Self::from_params(Params::glorot(d_in, units, d_out, rng))
    }

    pub fn d_in(&self) -> usize {
        self.params.d_in
    }

    pub fn d_out(&self) -> usize {
        self.params.d_out
    }

    fn check_input(&self, x: &[T]) -> Result<usize> {
        let d = self.params.d_in;
        if !x.len().is_multiple_of(d) {
            return Err(Error::Shape(format!(
                "input of {} values is not a batch of {d}-vectors",
                x.len()
            )));
        }
        Ok(x.len() / d)
    }

    pub fn forward_cached(&self, x: &[T]) -> Result<ForwardCache<T>> {
        let batch = self.check_input(x)?;
        let p = &self.params;
        let h1 = affine(x, batch, p.d_in, &p.w1, &p.b1);
        let a1: Vec<T> = h1.iter().map(|&v| gelu(v)).collect();
        let h2 = affine(&a1, batch, p.units, &p.w2, &p.b2);
        let a2: Vec<T> = h2.iter().map(|&v| gelu(v)).collect();
        let out = affine(&a2, batch, p.units, &p.w3, &p.b3);
        Ok(ForwardCache {
            batch,
            h1,
            a1,
            h2,
            a2,
            out,
        })
    }

    /// Maps a row-major batch of `d_in`-vectors to `d_out`-vectors, one patch
    /// at a time (rows never interact).
    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(self.forward_cached(x)?.out)
    }

    /// Loss over the batch and its gradient with respect to every parameter.
    pub fn backward(
        &self,
        x: &[T],
        targets: &[T],
        distance: LossDistance,
        reduction: LossReduction,
    ) -> Result<(LossStats, Params<T>)> {
        let cache = self.forward_cached(x)?;
        let p = &self.params;
        let batch = cache.batch;
        if targets.len() != batch * p.d_out {
            return Err(Error::Shape(format!(
                "{} target values for a batch of {batch} {}-vectors",
                targets.len(),
                p.d_out
            )));
        }
        let (stats, d_out) = batch_loss_grad(&cache.out, targets, p.d_out, distance, reduction);

        let w3 = weight_grad(&cache.a2, &d_out, batch, p.units, p.d_out);
        let b3 = column_sums(&d_out, p.d_out);
        let mut d_h2 = input_grad(&d_out, &p.w3, batch, p.units, p.d_out);
        for (d, &h) in d_h2.iter_mut().zip(&cache.h2) {
            *d = *d * gelu_grad(h);
        }
        let w2 = weight_grad(&cache.a1, &d_h2, batch, p.units, p.units);
        let b2 = column_sums(&d_h2, p.units);
        let mut d_h1 = input_grad(&d_h2, &p.w2, batch, p.units, p.units);
        for (d, &h) in d_h1.iter_mut().zip(&cache.h1) {
            *d = *d * gelu_grad(h);
        }
        let w1 = weight_grad(x, &d_h1, batch, p.d_in, p.units);
        let b1 = column_sums(&d_h1, p.units);

        let grads = Params {
            d_in: p.d_in,
            units: p.units,
            d_out: p.d_out,
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
        };
        for (name, block) in grads.blocks() {
            if block.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { block: name });
            }
        }
        Ok((stats, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Standard normal CDF via a 60-term Taylor series of erf, independent of libm.
    fn phi_series(x: f64) -> f64 {
        let z = x / std::f64::consts::SQRT_2;
        let mut term = z;
        let mut sum = z;
        for n in 1..60 {
            term *= -z * z / n as f64;
            sum += term / (2 * n + 1) as f64;
        }
        0.5 * (1.0 + 2.0 / std::f64::consts::PI.sqrt() * sum)
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(1.0f64) - 0.841345).abs() < 1e-5);
        assert!((gelu(1.0f64) - phi_series(1.0)).abs() < 1e-12);
        for x in [6.0f64, 8.0, 20.0] {
            assert!((gelu(x) - x).abs() < 1e-7 * x);
        }
        for x in [-3.0f64, -0.7, 0.3, 2.5] {
            assert!((gelu(x) - x * phi_series(x)).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_grad_matches_difference_quotient() {
        for x in [-4.0f64, -1.3, -0.2, 0.0, 0.6, 2.2] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - fd).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net = StudentNet::<f32>::from_params(Params::zeros(3, 4, 2));
        let out = net.forward(&[1.0, -2.0, 3.0, 0.5, 0.5, 9.0]).unwrap();
        assert_eq!(out, vec![0.0; 4]);
    }

    #[test]
    fn scalar_chain() {
        let mut p = Params::<f64>::zeros(1, 1, 1);
        p.w1[0] = 1.0;
        p.w2[0] = 1.0;
        p.w3[0] = 1.0;
        let net = StudentNet::from_params(p);
        let out = net.forward(&[2.0]).unwrap();
        let expected = {
            let a = 2.0 * phi_series(2.0);
            a * phi_series(a)
        };
        assert!((out[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn large_batch_preserves_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = StudentNet::<f32>::new(8, 8, 8, &mut rng);
        let n = 5476;
        let x: Vec<f32> = (0..n * 8).map(|i| ((i * 7919) % 101) as f32 / 50.0 - 1.0).collect();
        let out = net.forward(&x).unwrap();
        assert_eq!(out.len(), n * 8);
        for i in [0, 17, 2000, n - 1] {
            let single = net.forward(&x[i * 8..(i + 1) * 8]).unwrap();
            for (a, b) in single.iter().zip(&out[i * 8..(i + 1) * 8]) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn dimension_mismatch() {
        let net = StudentNet::<f32>::from_params(Params::zeros(3, 2, 3));
        assert!(matches!(net.forward(&[1.0; 4]), Err(Error::Shape(_))));
        assert!(net
            .backward(&[1.0; 3], &[1.0; 2], LossDistance::Cosine, LossReduction::Mean)
            .is_err());
    }

    #[test]
    fn non_finite_gradient_names_block() {
        let mut p = Params::<f32>::zeros(1, 1, 1);
        p.w1[0] = 1.0;
        p.w2[0] = 1.0;
        p.w3[0] = f32::MAX;
        let net = StudentNet::from_params(p);
        let err = net
            .backward(&[3e38], &[1.0], LossDistance::L2, LossReduction::Mean)
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { .. }), "{err}");
    }
}
