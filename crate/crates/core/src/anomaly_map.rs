//! Inference: per-patch discrepancies of both Students, fusion, bilinear
//! upsampling to the padded input size, padding removal, Gaussian smoothing,
//! and the top-M global score.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{
    read_feature_grid, write_feature_grid, FeatureGrid, Label, Padding, SampleRecord,
};
use crate::student::{load_pair, per_patch_loss, LossDistance, TrainedModel};

/// How the two directional discrepancy maps combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    Product,
    Sum,
    /// Only the backward Student's error on layer `j`.
    DeltaJOnly,
    /// Only the forward Student's error on layer `k`.
    DeltaKOnly,
}

impl Fusion {
    pub fn as_str(self) -> &'static str {
        match self {
            Fusion::Product => "product",
            Fusion::Sum => "sum",
            Fusion::DeltaJOnly => "delta_j_only",
            Fusion::DeltaKOnly => "delta_k_only",
        }
    }
}

impl std::str::FromStr for Fusion {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "product" => Ok(Fusion::Product),
            "sum" => Ok(Fusion::Sum),
            "delta_j_only" => Ok(Fusion::DeltaJOnly),
            "delta_k_only" => Ok(Fusion::DeltaKOnly),
            _ => Err(format!(
                "unknown fusion {s:?} (expected product, sum, delta_j_only or delta_k_only)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferConfig {
    pub infer_distance: LossDistance,
    pub fusion: Fusion,
    /// Gaussian sigma in output pixels; 0 disables smoothing.
    pub smoothing_sigma: f64,
    /// Fraction of pixels averaged into the global score.
    pub top_fraction: f64,
    /// Smooth at padded resolution and crop afterwards (sensitivity check only).
    pub smooth_before_crop: bool,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            infer_distance: LossDistance::L2,
            fusion: Fusion::Product,
            smoothing_sigma: 4.0,
            top_fraction: 0.001,
            smooth_before_crop: false,
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_fraction > 0.0 && self.top_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "top fraction {} must lie in (0, 1]",
                self.top_fraction
            )));
        }
        if !(self.smoothing_sigma >= 0.0 && self.smoothing_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "smoothing sigma {} must be finite and non-negative",
                self.smoothing_sigma
            )));
        }
        Ok(())
    }
}

/// Dense row-major grid of scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGrid {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ScoreGrid {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width, "score grid data/shape mismatch");
        ScoreGrid {
            height,
            width,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// Full-resolution anomaly map of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    pub sample_id: String,
    pub map: ScoreGrid,
    pub global_score: f64,
}

/// Per-patch distance between observed and predicted embeddings.
pub fn patch_discrepancies(
    observed: &FeatureGrid,
    predicted: &[f32],
    distance: LossDistance,
) -> Result<ScoreGrid> {
    if predicted.len() != observed.data.len() {
        return Err(Error::Shape(format!(
            "prediction has {} values, layer {} grid has {}",
            predicted.len(),
            observed.layer_index,
            observed.data.len()
        )));
    }
    let dim = observed.dim as usize;
    let data = observed
        .data
        .chunks_exact(dim)
        .zip(predicted.chunks_exact(dim))
        .map(|(f, p)| per_patch_loss(f, p, distance))
        .collect();
    Ok(ScoreGrid::new(
        observed.grid_h as usize,
        observed.grid_w as usize,
        data,
    ))
}

pub fn fuse(delta_j: &ScoreGrid, delta_k: &ScoreGrid, fusion: Fusion) -> Result<ScoreGrid> {
    if delta_j.dims() != delta_k.dims() {
        return Err(Error::Shape(format!(
            "cannot fuse {:?} with {:?}",
            delta_j.dims(),
            delta_k.dims()
        )));
    }
    let data = match fusion {
        Fusion::Product => delta_j.data.iter().zip(&delta_k.data).map(|(a, b)| a * b).collect(),
        Fusion::Sum => delta_j.data.iter().zip(&delta_k.data).map(|(a, b)| a + b).collect(),
        Fusion::DeltaJOnly => delta_j.data.clone(),
        Fusion::DeltaKOnly => delta_k.data.clone(),
    };
    Ok(ScoreGrid::new(delta_j.height, delta_j.width, data))
}

/// Source sample positions for bilinear resampling along one axis
/// (half-pixel centers, clamped to the border).
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|x| {
            let s = ((x as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

pub fn upsample_bilinear(grid: &ScoreGrid, target: (usize, usize)) -> ScoreGrid {
    let (th, tw) = target;
    let rows = bilinear_taps(grid.height, th);
    let cols = bilinear_taps(grid.width, tw);
    let mut data = Vec::with_capacity(th * tw);
    for &(r0, r1, fy) in &rows {
        for &(c0, c1, fx) in &cols {
            let top = grid.get(r0, c0) as f64 * (1.0 - fx) + grid.get(r0, c1) as f64 * fx;
            let bottom = grid.get(r1, c0) as f64 * (1.0 - fx) + grid.get(r1, c1) as f64 * fx;
            data.push((top * (1.0 - fy) + bottom * fy) as f32);
        }
    }
    ScoreGrid::new(th, tw, data)
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
fn reflect(index: isize, len: usize) -> usize {
    let period = 2 * len as isize;
    let m = index.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Normalized 1-D Gaussian of radius `ceil(4 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Separable Gaussian blur with reflected borders; `sigma == 0` is the identity.
pub fn gaussian_smooth(map: &ScoreGrid, sigma: f64) -> ScoreGrid {
    if sigma <= 0.0 {
        return map.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let (h, w) = map.dims();
    let mut horizontal = vec![0.0f64; h * w];
    for r in 0..h {
        let row = &map.data[r * w..(r + 1) * w];
        for c in 0..w {
            horizontal[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * row[reflect(c as isize + i as isize - radius, w)] as f64)
                .sum();
        }
    }
    let mut data = vec![0.0f32; h * w];
    for r in 0..h {
        for c in 0..w {
            let v: f64 = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * horizontal[reflect(r as isize + i as isize - radius, h) * w + c])
                .sum();
            data[r * w + c] = v as f32;
        }
    }
    ScoreGrid::new(h, w, data)
}

/// Removes the pixels the exporter added around the image.
pub fn crop_padding(map: &ScoreGrid, pad: Padding) -> Result<ScoreGrid> {
    let vertical = pad.top as usize + pad.bottom as usize;
    let horizontal = pad.left as usize + pad.right as usize;
    if vertical >= map.height || horizontal >= map.width {
        return Err(Error::Geometry(format!(
            "padding {pad:?} leaves nothing of a {}x{} map",
            map.height, map.width
        )));
    }
    let (h, w) = (map.height - vertical, map.width - horizontal);
    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        let start = (r + pad.top as usize) * map.width + pad.left as usize;
        data.extend_from_slice(&map.data[start..start + w]);
    }
    Ok(ScoreGrid::new(h, w, data))
}

/// `M = max(1, round(fraction * pixels))`, rounding halves up.
pub fn top_count(pixels: usize, top_fraction: f64) -> usize {
    ((top_fraction * pixels as f64 + 0.5).floor() as usize).clamp(1, pixels.max(1))
}

/// Mean of the `M` largest map values.
pub fn global_score(map: &ScoreGrid, top_fraction: f64) -> f64 {
    assert!(!map.data.is_empty(), "global score of an empty map");
    let m = top_count(map.data.len(), top_fraction);
    let mut values = map.data.clone();
    let n = values.len();
    if m < n {
        values.select_nth_unstable_by(n - m, |a, b| a.total_cmp(b));
    }
    values[n - m..].iter().map(|&v| v as f64).sum::<f64>() / m as f64
}

/// Fused patch-level map before any resampling.
pub fn fused_patch_map(
    fj: &FeatureGrid,
    fk: &FeatureGrid,
    model: &TrainedModel,
    config: &InferConfig,
) -> Result<ScoreGrid> {
    let pred_k = model.forward.forward(&fj.data)?;
    let pred_j = model.backward.forward(&fk.data)?;
    let delta_k = patch_discrepancies(fk, &pred_k, config.infer_distance)?;
    let delta_j = patch_discrepancies(fj, &pred_j, config.infer_distance)?;
    fuse(&delta_j, &delta_k, config.fusion)
}

/// Map and score from in-memory features.
pub fn infer_grids(
    sample_id: &str,
    fj: &FeatureGrid,
    fk: &FeatureGrid,
    model: &TrainedModel,
    config: &InferConfig,
) -> Result<AnomalyMap> {
    let run = || -> Result<AnomalyMap> {
        config.validate()?;
        let fused = fused_patch_map(fj, fk, model, config)?;
        let padded = upsample_bilinear(&fused, (fj.padded_h() as usize, fj.padded_w() as usize));
        let map = if config.smooth_before_crop {
            crop_padding(&gaussian_smooth(&padded, config.smoothing_sigma), fj.pad)?
        } else {
            gaussian_smooth(&crop_padding(&padded, fj.pad)?, config.smoothing_sigma)
        };
        debug_assert_eq!(map.dims(), (fj.orig_h as usize, fj.orig_w as usize));
        let global_score = global_score(&map, config.top_fraction);
        Ok(AnomalyMap {
            sample_id: sample_id.to_string(),
            map,
            global_score,
        })
    };
    run().map_err(|e| e.in_sample(sample_id))
}

pub fn infer(
    sample: &SampleRecord,
    model: &TrainedModel,
    layer_pair: (u32, u32),
    config: &InferConfig,
) -> Result<AnomalyMap> {
    model.check_layer_pair(layer_pair)?;
    let (fj, fk) = load_pair(sample, layer_pair)?;
    infer_grids(&sample.sample_id, &fj, &fk, model, config)
}

/// Stores a map as a single-channel feature grid (`dim = 1`, `patch_size = 1`).
pub fn write_anomaly_map(map: &ScoreGrid, path: &Path) -> Result<()> {
    let grid = FeatureGrid {
        layer_index: 0,
        grid_h: map.height as u32,
        grid_w: map.width as u32,
        dim: 1,
        patch_size: 1,
        orig_h: map.height as u32,
        orig_w: map.width as u32,
        pad: Padding::ZERO,
        data: map.data.clone(),
    };
    write_feature_grid(&grid, path)
}

pub fn read_anomaly_map(path: &Path) -> Result<ScoreGrid> {
    let grid = read_feature_grid(path)?;
    if grid.dim != 1 || grid.patch_size != 1 || grid.pad != Padding::ZERO {
        return Err(Error::Shape(format!(
            "{} is not a single-channel map (dim {}, patch {})",
            path.display(),
            grid.dim,
            grid.patch_size
        )));
    }
    Ok(ScoreGrid::new(grid.grid_h as usize, grid.grid_w as usize, grid.data))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub sample_id: String,
    pub global_score: f64,
    pub label: Label,
}

pub const SCORES_HEADER: &str = "sample_id\tglobal_score\tlabel";

/// Tab-separated scores table, one row per test sample.
pub fn write_scores(rows: &[ScoreRow], path: &Path) -> Result<()> {
    let mut text = String::from(SCORES_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&format!("{}\t{}\t{}\n", r.sample_id, r.global_score, r.label.as_str()));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, why: &str| Error::Shape(format!("{}:{line}: {why}", path.display()));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == SCORES_HEADER => {}
        _ => return Err(bad(1, "missing scores header")),
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let fields: Vec<&str> = line.split('\t').collect();
            let [id, score, label] = fields[..] else {
                return Err(bad(i + 1, "expected 3 tab-separated fields"));
            };
            let global_score = score.parse().map_err(|_| bad(i + 1, "unparsable score"))?;
            let label = match label {
                "nominal" => Label::Nominal,
                "anomalous" => Label::Anomalous,
                _ => return Err(bad(i + 1, "label must be nominal or anomalous")),
            };
            Ok(ScoreRow {
                sample_id: id.to_string(),
                global_score,
                label,
            })
        })
        .collect()
}
