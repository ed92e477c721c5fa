//! Per-region overlap curves and their normalized partial area.
//!
//! A pixel is predicted anomalous at threshold `t` when its score is `>= t`.
//! FPR counts predicted-anomalous pixels among all ground-truth-negative
//! pixels of every test image, nominal images included. PRO is the mean,
//! over ground-truth regions, of the fraction of each region predicted
//! anomalous.

use crate::anomaly_map::ScoreGrid;
use crate::error::{Error, Result};
use crate::feature_store::BinaryMask;

use super::regions::connected_components;

/// FPR levels sampled in `[0, limit]`.
pub const FPR_LEVELS: usize = 500;

#[derive(Debug, Clone, PartialEq)]
pub struct ProCurve {
    /// `(fpr, pro)`, FPR non-decreasing, ending exactly at `(limit, _)`.
    pub points: Vec<(f64, f64)>,
    pub limit: f64,
    /// `(1 / limit) * integral of PRO over FPR in [0, limit]`.
    pub aupro: f64,
}

/// One image's map and ground truth.
#[derive(Debug, Clone, Copy)]
pub struct ScoredMask<'a> {
    pub sample_id: &'a str,
    pub map: &'a ScoreGrid,
    pub mask: &'a BinaryMask,
}

#[derive(Debug, Clone)]
struct RegionScores {
    /// Ascending.
    scores: Vec<f32>,
}

impl RegionScores {
    fn fraction(&self, t: f32, strict: bool) -> f64 {
        let below = if strict {
            self.scores.partition_point(|&s| s <= t)
        } else {
            self.scores.partition_point(|&s| s < t)
        };
        (self.scores.len() - below) as f64 / self.scores.len() as f64
    }
}

/// Sorted score populations shared by every limit and region filter.
#[derive(Debug, Clone)]
pub struct ProSetup {
    /// Negative-pixel scores, descending.
    negatives: Vec<f32>,
    regions: Vec<RegionScores>,
}

impl ProSetup {
    pub fn new(images: &[ScoredMask]) -> Result<Self> {
        let mut negatives = Vec::new();
        let mut regions = Vec::new();
        for img in images {
            if img.map.dims() != (img.mask.height, img.mask.width) {
                return Err(Error::Shape(format!(
                    "{}: map is {:?}, ground truth is {}x{}",
                    img.sample_id,
                    img.map.dims(),
                    img.mask.height,
                    img.mask.width
                )));
            }
            negatives.extend(
                img.map
                    .data
                    .iter()
                    .zip(&img.mask.data)
                    .filter(|(_, &m)| !m)
                    .map(|(&s, _)| s),
            );
            for region in connected_components(img.mask, img.sample_id) {
                let mut scores: Vec<f32> = region.pixels.iter().map(|&p| img.map.data[p]).collect();
                scores.sort_unstable_by(|a, b| a.total_cmp(b));
                regions.push(RegionScores { scores });
            }
        }
        if negatives.iter().any(|v| v.is_nan()) || regions.iter().any(|r| r.scores.iter().any(|v| v.is_nan())) {
            return Err(Error::Metric("NaN in anomaly map".into()));
        }
        negatives.sort_unstable_by(|a, b| b.total_cmp(a));
        Ok(ProSetup { negatives, regions })
    }

    pub fn region_sizes(&self) -> Vec<usize> {
        self.regions.iter().map(|r| r.scores.len()).collect()
    }

    fn fpr(&self, t: f32, strict: bool) -> f64 {
        let above = if strict {
            self.negatives.partition_point(|&s| s > t)
        } else {
            self.negatives.partition_point(|&s| s >= t)
        };
        above as f64 / self.negatives.len() as f64
    }

    /// PRO curve up to `limit`, averaging only regions of size
    /// `<= max_region_size` when a cap is given.
    pub fn curve(&self, limit: f64, max_region_size: Option<f64>) -> Result<ProCurve> {
        if !(limit > 0.0 && limit <= 1.0) {
            return Err(Error::Metric(format!("integration limit {limit} outside (0, 1]")));
        }
        if self.negatives.is_empty() {
            return Err(Error::Metric("no negative pixels in the test set".into()));
        }
        let regions: Vec<&RegionScores> = self
            .regions
            .iter()
            .filter(|r| max_region_size.is_none_or(|cap| r.scores.len() as f64 <= cap))
            .collect();
        if regions.is_empty() {
            return Err(Error::Metric(match max_region_size {
                Some(cap) => format!("no ground-truth regions of size <= {cap}"),
                None => "no ground-truth regions".into(),
            }));
        }
        let pro = |t: f32, strict: bool| {
            regions.iter().map(|r| r.fraction(t, strict)).sum::<f64>() / regions.len() as f64
        };

        let n = self.negatives.len();
        let mut thresholds: Vec<f32> = (1..=FPR_LEVELS)
            .map(|i| {
                let level = limit * i as f64 / FPR_LEVELS as f64;
                let rank = ((level * n as f64).ceil() as usize).clamp(1, n);
                self.negatives[rank - 1]
            })
            .collect();
        thresholds.dedup();

        let mut points = vec![(0.0, 0.0)];
        for &t in &thresholds {
            points.push((self.fpr(t, true), pro(t, true)));
            points.push((self.fpr(t, false), pro(t, false)));
        }

        let mut area = 0.0;
        let mut clipped = vec![points[0]];
        for w in points.windows(2) {
            let ((x0, y0), (x1, y1)) = (w[0], w[1]);
            if x1 <= limit {
                area += (x1 - x0) * (y0 + y1) / 2.0;
                clipped.push((x1, y1));
                continue;
            }
            let y_at = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y_at) / 2.0;
            clipped.push((limit, y_at));
            break;
        }
        if clipped.last().map(|p| p.0) != Some(limit) {
            // Rounding left the last sampled FPR a hair below the limit.
            let y = clipped.last().unwrap().1;
            clipped.push((limit, y));
        }
        Ok(ProCurve {
            points: clipped,
            limit,
            aupro: area / limit,
        })
    }
}

/// Builds the PRO curve of a set of test images in one call.
pub fn pro_curve(images: &[ScoredMask], limit: f64, max_region_size: Option<f64>) -> Result<ProCurve> {
    ProSetup::new(images)?.curve(limit, max_region_size)
}
