use std::sync::mpsc::sync_channel;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::adam_step;
use super::loss::{LossDistance, LossReduction, LossStats};
use super::mlp::StudentNet;
use crate::error::{Error, Result};
use crate::feature_store::{read_feature_grid, read_feature_header, FeatureGrid, Manifest, SampleRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Shallow layer `j` and deep layer `k`.
    pub layer_pair: (u32, u32),
    pub epochs: usize,
    pub learning_rate: f64,
    pub loss_distance: LossDistance,
    pub loss_reduction: LossReduction,
    pub seed: u64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    /// Hidden width; `None` uses each network's input dimension.
    pub hidden_units: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            layer_pair: (8, 12),
            epochs: 50,
            learning_rate: 1e-3,
            loss_distance: LossDistance::Cosine,
            loss_reduction: LossReduction::Mean,
            seed: 0,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            hidden_units: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (j, k) = self.layer_pair;
        let mut problems = Vec::new();
        if j >= k {
            problems.push(format!("layer pair ({j}, {k}) needs j < k"));
        }
        if self.epochs == 0 {
            problems.push("epochs must be at least 1".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!("learning rate {} must be positive", self.learning_rate));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            problems.push(format!("Adam betas ({b1}, {b2}) must lie in [0, 1)"));
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            problems.push("Adam epsilon must be positive".to_string());
        }
        if self.hidden_units == Some(0) {
            problems.push("hidden units must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// The forward (`j -> k`) and backward (`k -> j`) Students with the
/// configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub config: TrainConfig,
    pub forward: StudentNet<f32>,
    pub backward: StudentNet<f32>,
}

impl TrainedModel {
    pub fn check_layer_pair(&self, requested: (u32, u32)) -> Result<()> {
        if self.config.layer_pair != requested {
            return Err(Error::LayerPairMismatch {
                model: self.config.layer_pair,
                requested,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub forward_loss: f64,
    pub backward_loss: f64,
    pub forward_steps: u64,
    pub backward_steps: u64,
    pub degenerate_patches: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
}

/// Loads the `(F_j, F_k)` grids of one sample and checks they describe the
/// same patch lattice.
pub fn load_pair(sample: &SampleRecord, (j, k): (u32, u32)) -> Result<(FeatureGrid, FeatureGrid)> {
    let load = || -> Result<(FeatureGrid, FeatureGrid)> {
        let fj = read_feature_grid(sample.feature_path(j)?)?;
        let fk = read_feature_grid(sample.feature_path(k)?)?;
        if (fj.grid_h, fj.grid_w, fj.pad, fj.patch_size) != (fk.grid_h, fk.grid_w, fk.pad, fk.patch_size) {
            return Err(Error::Shape(format!(
                "layer {j} grid {}x{} and layer {k} grid {}x{} differ in geometry",
                fj.grid_h, fj.grid_w, fk.grid_h, fk.grid_w
            )));
        }
        if (fj.orig_h, fj.orig_w) != sample.image_dims {
            return Err(Error::Shape(format!(
                "features describe a {}x{} image, manifest says {}x{}",
                fj.orig_h, fj.orig_w, sample.image_dims.0, sample.image_dims.1
            )));
        }
        Ok((fj, fk))
    };
    load().map_err(|e| e.in_sample(&sample.sample_id))
}

pub fn train(manifest: &Manifest, config: &TrainConfig) -> Result<(TrainedModel, TrainingLog)> {
    train_with(manifest, config, |_| {})
}

/// Joint training of both Students: every training image is one batch of all
/// its patches, and each network takes one Adam step per image on its own loss.
pub fn train_with(
    manifest: &Manifest,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(TrainedModel, TrainingLog)> {
    config.validate()?;
    if manifest.layer_pair != config.layer_pair {
        return Err(Error::LayerPairMismatch {
            model: config.layer_pair,
            requested: manifest.layer_pair,
        });
    }
    let samples: Vec<&SampleRecord> = manifest.train().collect();
    if samples.is_empty() {
        return Err(Error::Config("manifest has no training samples".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.label.is_anomalous()) {
        return Err(Error::Config(format!("training sample {} is anomalous", s.sample_id)));
    }
    let (j, k) = config.layer_pair;
    let dim_j = read_feature_header(samples[0].feature_path(j)?)?.dim as usize;
    let dim_k = read_feature_header(samples[0].feature_path(k)?)?.dim as usize;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut forward = StudentNet::new(dim_j, config.hidden_units.unwrap_or(dim_j), dim_k, &mut rng);
    let mut backward = StudentNet::new(dim_k, config.hidden_units.unwrap_or(dim_k), dim_j, &mut rng);

    let mut log = TrainingLog::default();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut fwd_total = 0.0;
        let mut bwd_total = 0.0;
        let mut degenerate = 0;
        std::thread::scope(|scope| -> Result<()> {
            let (tx, rx) = sync_channel(1);
            let order = &order;
            let samples = &samples;
            scope.spawn(move || {
                for &i in order {
                    if tx.send(load_pair(samples[i], (j, k))).is_err() {
                        break;
                    }
                }
            });
            for &i in order {
                let (fj, fk) = rx.recv().expect("prefetch thread ended early")?;
                if fj.dim as usize != dim_j || fk.dim as usize != dim_k {
                    return Err(Error::Shape(format!(
                        "embedding dims {}/{} differ from {dim_j}/{dim_k}",
                        fj.dim, fk.dim
                    ))
                    .in_sample(&samples[i].sample_id));
                }
                let diverged = |net: &str, detail: String| Error::Diverged {
                    epoch,
                    sample_id: samples[i].sample_id.clone(),
                    detail: format!("{net}: {detail}"),
                };
                let fwd = step(&mut forward, &fj.data, &fk.data, config)
                    .map_err(|e| diverged("forward student", e.to_string()))?;
                let bwd = step(&mut backward, &fk.data, &fj.data, config)
                    .map_err(|e| diverged("backward student", e.to_string()))?;
                fwd_total += fwd.mean;
                bwd_total += bwd.mean;
                degenerate += fwd.degenerate + bwd.degenerate;
            }
            Ok(())
        })?;
        if degenerate > 0 {
            log::warn!("epoch {epoch}: {degenerate} patches had zero-norm cosine operands");
        }
        let entry = EpochLog {
            epoch,
            forward_loss: fwd_total / samples.len() as f64,
            backward_loss: bwd_total / samples.len() as f64,
            forward_steps: forward.adam.step,
            backward_steps: backward.adam.step,
            degenerate_patches: degenerate,
        };
        on_epoch(&entry);
        log.epochs.push(entry);
    }
    Ok((
        TrainedModel {
            config: config.clone(),
            forward,
            backward,
        },
        log,
    ))
}

fn step(net: &mut StudentNet<f32>, input: &[f32], target: &[f32], config: &TrainConfig) -> Result<LossStats> {
    let (stats, grads) = net.backward(input, target, config.loss_distance, config.loss_reduction)?;
    if !stats.mean.is_finite() {
        return Err(Error::NonFinite {
            index: 0,
            context: format!("loss {}", stats.mean),
        });
    }
    adam_step(net, &grads, config.learning_rate, config.adam_betas, config.adam_eps)?;
    Ok(stats)
}
