use crate::anomaly_map::ScoreGrid;
use crate::error::{Error, Result};
use crate::feature_store::BinaryMask;

/// Area under the ROC curve from `(positives, negatives)` counts per distinct
/// score, visited in descending score order.
///
/// The trapezoid area is accumulated in integer half-units so the result is
/// exactly the Mann-Whitney statistic with ties counted one half.
fn area_from_groups(groups: impl Iterator<Item = (u64, u64)>) -> Result<f64> {
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut twice_area: u128 = 0;
    for (pos, neg) in groups {
        twice_area += neg as u128 * (2 * tp as u128 + pos as u128);
        tp += pos;
        fp += neg;
    }
    if tp == 0 || fp == 0 {
        return Err(Error::Metric(format!(
            "AUROC needs both classes, got {tp} positives and {fp} negatives"
        )));
    }
    Ok(twice_area as f64 / (2.0 * tp as f64 * fp as f64))
}

/// Image-level AUROC over `(score, is_anomalous)` pairs.
pub fn auroc(scores: &[(f64, bool)]) -> Result<f64> {
    if scores.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let groups = sorted.chunk_by(|a, b| a.0 == b.0).map(|g| {
        let pos = g.iter().filter(|(_, l)| *l).count() as u64;
        (pos, g.len() as u64 - pos)
    });
    area_from_groups(groups)
}

/// Maps an `f32` onto a `u32` whose unsigned order is the float's order,
/// with `-0.0` and `0.0` sharing a key.
fn order_key(v: f32) -> u32 {
    let bits = if v == 0.0 { 0 } else { v.to_bits() };
    if bits & 0x8000_0000 != 0 {
        !bits
    } else {
        bits | 0x8000_0000
    }
}

/// Pixel-level AUROC over every pixel of every map (nominal images included
/// as all-negative masks).
pub fn p_auroc(maps: &[&ScoreGrid], masks: &[&BinaryMask]) -> Result<f64> {
    if maps.len() != masks.len() {
        return Err(Error::Shape(format!("{} maps for {} masks", maps.len(), masks.len())));
    }
    let total: usize = maps.iter().map(|m| m.data.len()).sum();
    let mut keys: Vec<u64> = Vec::with_capacity(total);
    for (map, mask) in maps.iter().zip(masks) {
        if map.dims() != (mask.height, mask.width) {
            return Err(Error::Shape(format!(
                "map is {:?}, ground truth is {}x{}; maps must be at ground-truth resolution",
                map.dims(),
                mask.height,
                mask.width
            )));
        }
        keys.extend(
            map.data
                .iter()
                .zip(&mask.data)
                .map(|(&s, &m)| ((order_key(s) as u64) << 1) | m as u64),
        );
    }
    // Descending score; within a score the label bit only groups entries.
    keys.sort_unstable_by(|a, b| b.cmp(a));
    let groups = keys.chunk_by(|a, b| a >> 1 == b >> 1).map(|g| {
        let pos = g.iter().filter(|k| *k & 1 == 1).count() as u64;
        (pos, g.len() as u64 - pos)
    });
    area_from_groups(groups)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_separation() {
        let s = [(0.1, false), (0.2, false), (0.8, true), (0.9, true)];
        assert_eq!(auroc(&s).unwrap(), 1.0);
    }

    #[test]
    fn ties_count_half() {
        let s = [(0.5, false), (0.5, true), (0.2, false), (0.8, true)];
        assert_eq!(auroc(&s).unwrap(), 0.875);
    }

    #[test]
    fn all_equal() {
        let s = [(0.3, false), (0.3, true), (0.3, true), (0.3, false), (0.3, false)];
        assert_eq!(auroc(&s).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(auroc(&[(0.1, true), (0.2, true)]).is_err());
        assert!(auroc(&[]).is_err());
    }

    #[test]
    fn pixel_level() {
        let mask = BinaryMask {
            height: 1,
            width: 3,
            data: vec![true, false, true],
        };
        let map = ScoreGrid::new(1, 3, vec![0.9, 0.1, 0.5]);
        assert_eq!(p_auroc(&[&map], &[&mask]).unwrap(), 1.0);
        let map = ScoreGrid::new(1, 3, vec![0.9, 0.6, 0.5]);
        assert_eq!(p_auroc(&[&map], &[&mask]).unwrap(), 0.5);

        let perfect = ScoreGrid::new(1, 3, vec![1.0, 0.0, 1.0]);
        assert_eq!(p_auroc(&[&perfect], &[&mask]).unwrap(), 1.0);
        let flat = ScoreGrid::new(1, 3, vec![0.7; 3]);
        assert_eq!(p_auroc(&[&flat], &[&mask]).unwrap(), 0.5);
        let small = ScoreGrid::new(1, 2, vec![0.7; 2]);
        assert!(p_auroc(&[&small], &[&mask]).is_err());
    }

    #[test]
    fn order_key_is_monotone() {
        let vals = [f32::NEG_INFINITY, -3.0, -0.0, 0.0, 1e-30, 2.0, f32::INFINITY];
        for w in vals.windows(2) {
            assert!(order_key(w[0]) <= order_key(w[1]));
        }
        assert_eq!(order_key(-0.0), order_key(0.0));
    }
}
