//! Toy "Teacher" feature sets for tests and demos.
//!
//! Layer-`j` embeddings live on a low-dimensional manifold driven by a smooth
//! latent field; layer-`k` embeddings are a fixed smooth nonlinear map of
//! them. Both are rescaled to a common norm, and each layer then receives
//! independent noise the other layer knows nothing about, so neither Student
//! can be exact on nominal data. Anomalous images push a few rectangular
//! patch blocks off the manifold before the map is applied, which disturbs
//! both layers. Output files use the regular feature, mask and manifest formats.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{
    write_feature_grid, write_mask, BinaryMask, FeatureGrid, Label, Manifest, Padding, SampleRecord, Split,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub dataset_name: String,
    pub categories: Vec<String>,
    pub grid: u32,
    pub dim: u32,
    pub patch_size: u32,
    /// Uniform padding, in pixels, around the `grid * patch_size - 2 * pad` image.
    pub pad: u32,
    pub latent_dim: usize,
    pub train: usize,
    pub test_nominal: usize,
    pub test_anomalous: usize,
    /// Largest side, in patches, of an anomalous block.
    pub max_block: u32,
    /// Off-manifold displacement relative to the embedding norm.
    pub anomaly_strength: f64,
    /// Per-coordinate standard deviation of the independent noise each layer
    /// carries, in units of a unit-RMS embedding coordinate.
    pub nuisance: f64,
    pub layer_pair: (u32, u32),
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            dataset_name: "synthetic".into(),
            categories: vec!["widget".into()],
            grid: 16,
            dim: 32,
            patch_size: 4,
            pad: 1,
            latent_dim: 4,
            train: 40,
            test_nominal: 20,
            test_anomalous: 20,
            max_block: 4,
            anomaly_strength: 2.0,
            nuisance: 0.2,
            layer_pair: (8, 12),
            seed: 0,
        }
    }
}

/// The frozen toy teacher of one category.
struct ToyTeacher {
    latent_dim: usize,
    dim: usize,
    embed: Vec<f64>,
    offset: Vec<f64>,
    mix: Vec<f64>,
    bias: Vec<f64>,
    /// Layer-`j` embedding norm, used to scale anomalies.
    scale: f64,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Vec<f64> {
    (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect()
}

impl ToyTeacher {
    fn new(rng: &mut ChaCha8Rng, latent_dim: usize, dim: usize) -> Self {
        let mut t = ToyTeacher {
            latent_dim,
            dim,
            embed: gaussian_matrix(rng, latent_dim, dim, 1.0 / (latent_dim as f64).sqrt()),
            offset: gaussian_matrix(rng, 1, dim, 0.5),
            mix: gaussian_matrix(rng, dim, dim, 0.8 / (dim as f64).sqrt()),
            bias: gaussian_matrix(rng, 1, dim, 0.3),
            scale: 1.0,
        };
        let probe: Vec<f64> = (0..latent_dim).map(|i| if i % 2 == 0 { 0.5 } else { -0.5 }).collect();
        t.scale = t.shallow(&probe).iter().map(|v| v * v).sum::<f64>().sqrt();
        t
    }

    fn shallow(&self, z: &[f64]) -> Vec<f64> {
        let f = (0..self.dim)
            .map(|d| self.offset[d] + (0..self.latent_dim).map(|l| z[l] * self.embed[l * self.dim + d]).sum::<f64>())
            .collect();
        self.normalized(f)
    }

    fn deep(&self, fj: &[f64]) -> Vec<f64> {
        let f = (0..self.dim)
            .map(|d| {
                let pre = self.bias[d] + (0..self.dim).map(|i| fj[i] * self.mix[i * self.dim + d]).sum::<f64>();
                pre.tanh() + 0.25 * fj[d]
            })
            .collect();
        self.normalized(f)
    }

    /// Rescales to the common embedding norm, as a layer norm would.
    fn normalized(&self, mut f: Vec<f64>) -> Vec<f64> {
        let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        let target = (self.dim as f64).sqrt();
        if norm > 0.0 {
            for v in &mut f {
                *v *= target / norm;
            }
        }
        f
    }
}

/// A smooth random latent field over the patch grid.
fn latent_field(rng: &mut ChaCha8Rng, grid: usize, latent_dim: usize) -> Vec<f64> {
    let waves: Vec<[f64; 4]> = (0..latent_dim)
        .map(|_| {
            [
                rng.gen_range(0.5..2.0),
                rng.gen_range(0.5..2.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(-0.3..0.3),
            ]
        })
        .collect();
    let mut z = Vec::with_capacity(grid * grid * latent_dim);
    for r in 0..grid {
        for c in 0..grid {
            let (y, x) = (r as f64 / grid as f64, c as f64 / grid as f64);
            for [fy, fx, phase, shift] in &waves {
                z.push((std::f64::consts::TAU * (fy * y + fx * x) + phase).sin() * 0.8 + shift);
            }
        }
    }
    z
}

struct Block {
    row: u32,
    col: u32,
    h: u32,
    w: u32,
}

fn write_sample(
    dir: &Path,
    id: &str,
    layers: (u32, u32),
    grids: (Vec<f32>, Vec<f32>),
    cfg: &SyntheticConfig,
) -> Result<BTreeMap<u32, PathBuf>> {
    let orig = cfg.grid * cfg.patch_size - 2 * cfg.pad;
    let mut out = BTreeMap::new();
    for (layer, data) in [(layers.0, grids.0), (layers.1, grids.1)] {
        let path = dir.join("features").join(format!("{}_l{layer}.pefg", id.replace('/', "_")));
        write_feature_grid(
            &FeatureGrid {
                layer_index: layer,
                grid_h: cfg.grid,
                grid_w: cfg.grid,
                dim: cfg.dim,
                patch_size: cfg.patch_size,
                orig_h: orig,
                orig_w: orig,
                pad: Padding::uniform(cfg.pad),
                data,
            },
            &path,
        )?;
        out.insert(layer, path);
    }
    Ok(out)
}

/// Writes a complete synthetic dataset under `dir` and returns its manifest
/// (also saved as `dir/manifest.json`).
pub fn generate(cfg: &SyntheticConfig, dir: &Path) -> Result<Manifest> {
    if cfg.grid == 0 || cfg.dim == 0 || cfg.patch_size == 0 || 2 * cfg.pad >= cfg.grid * cfg.patch_size {
        return Err(Error::Config(format!("degenerate synthetic geometry {cfg:?}")));
    }
    if cfg.max_block == 0 || cfg.max_block > cfg.grid {
        return Err(Error::Config("max_block must lie in 1..=grid".into()));
    }
    for sub in ["features", "masks"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let grid = cfg.grid as usize;
    let dim = cfg.dim as usize;
    let orig = cfg.grid * cfg.patch_size - 2 * cfg.pad;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut samples = Vec::new();

    for category in &cfg.categories {
        let teacher = ToyTeacher::new(&mut rng, cfg.latent_dim, dim);
        let plan = std::iter::repeat_n((Split::Train, Label::Nominal), cfg.train)
            .chain(std::iter::repeat_n((Split::Test, Label::Nominal), cfg.test_nominal))
            .chain(std::iter::repeat_n((Split::Test, Label::Anomalous), cfg.test_anomalous));
        for (n, (split, label)) in plan.enumerate() {
            let id = format!(
                "{category}/{}/{}_{n:03}",
                if split == Split::Train { "train" } else { "test" },
                label.as_str()
            );
            let z = latent_field(&mut rng, grid, cfg.latent_dim);
            let mut base: Vec<Vec<f64>> = z.chunks_exact(cfg.latent_dim).map(|zp| teacher.shallow(zp)).collect();

            let mut mask = BinaryMask::empty(orig as usize, orig as usize);
            if label.is_anomalous() {
                let blocks = rng.gen_range(1..=2);
                for _ in 0..blocks {
                    let b = Block {
                        h: rng.gen_range(1..=cfg.max_block),
                        w: rng.gen_range(1..=cfg.max_block),
                        row: 0,
                        col: 0,
                    };
                    let b = Block {
                        row: rng.gen_range(0..=cfg.grid - b.h),
                        col: rng.gen_range(0..=cfg.grid - b.w),
                        ..b
                    };
                    let dir_vec: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                    let norm = dir_vec.iter().map(|v| v * v).sum::<f64>().sqrt();
                    for r in b.row..b.row + b.h {
                        for c in b.col..b.col + b.w {
                            let patch = &mut base[(r * cfg.grid + c) as usize];
                            for (v, d) in patch.iter_mut().zip(&dir_vec) {
                                *v += cfg.anomaly_strength * teacher.scale * d / norm;
                            }
                            *patch = teacher.normalized(std::mem::take(patch));
                        }
                    }
                    let p = cfg.patch_size as i64;
                    let lo = |cell: u32| (cell as i64 * p - cfg.pad as i64).clamp(0, orig as i64) as usize;
                    for y in lo(b.row)..lo(b.row + b.h) {
                        for x in lo(b.col)..lo(b.col + b.w) {
                            mask.set(y, x, true);
                        }
                    }
                }
            }
            // Each layer gets a component the other layer does not carry.
            let mut nuisance = |f: Vec<f64>| {
                let f = f
                    .into_iter()
                    .map(|v| v + rng.sample::<f64, _>(StandardNormal) * cfg.nuisance)
                    .collect();
                teacher.normalized(f).into_iter().map(|v| v as f32)
            };
            let fj: Vec<f32> = base.iter().flat_map(|f| nuisance(f.clone())).collect();
            let fk: Vec<f32> = base.iter().flat_map(|f| nuisance(teacher.deep(f))).collect();

            let features = write_sample(dir, &id, cfg.layer_pair, (fj, fk), cfg)?;
            let mask_path = if label.is_anomalous() {
                let p = dir.join("masks").join(format!("{}.png", id.replace('/', "_")));
                write_mask(&mask, &p)?;
                Some(p)
            } else {
                None
            };
            samples.push(SampleRecord {
                sample_id: id,
                category: category.clone(),
                split,
                label,
                features,
                mask: mask_path,
                image_dims: (orig, orig),
            });
        }
    }
    let manifest = Manifest {
        dataset_name: cfg.dataset_name.clone(),
        layer_pair: cfg.layer_pair,
        samples,
    };
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}
