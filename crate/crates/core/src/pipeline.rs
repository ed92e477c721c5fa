//! Whole-dataset drivers: inference over every test sample and the
//! layer-pair / distance / fusion ablation sweep.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::Serialize;

use crate::anomaly_map::{infer_grids, AnomalyMap, Fusion, InferConfig};
use crate::error::{Error, Result};
use crate::feature_store::{Manifest, SampleRecord};
use crate::metrics::{evaluate, EvaluationReport};
use crate::student::{load_pair, train, LossDistance, TrainConfig, TrainedModel};

#[derive(Debug, Clone)]
pub struct InferenceRun {
    /// In manifest order of the test split.
    pub maps: Vec<AnomalyMap>,
    /// Mean wall time from features-in-memory to finished map, excluding a
    /// warm-up sample.
    pub mean_latency: Duration,
}

/// Infers every test sample. Parallel over samples on the current rayon pool;
/// the output does not depend on the number of workers.
pub fn infer_manifest(manifest: &Manifest, model: &TrainedModel, config: &InferConfig) -> Result<InferenceRun> {
    model.check_layer_pair(manifest.layer_pair)?;
    config.validate()?;
    let tests: Vec<&SampleRecord> = manifest.test().collect();
    if let Some(first) = tests.first() {
        let (fj, fk) = load_pair(first, manifest.layer_pair)?;
        infer_grids(&first.sample_id, &fj, &fk, model, config)?;
    }
    let timed = tests
        .par_iter()
        .map(|s| {
            let (fj, fk) = load_pair(s, manifest.layer_pair)?;
            let start = Instant::now();
            let map = infer_grids(&s.sample_id, &fj, &fk, model, config)?;
            Ok((map, start.elapsed()))
        })
        .collect::<Result<Vec<_>>>()?;
    let total: Duration = timed.iter().map(|(_, d)| *d).sum();
    let mean_latency = if timed.is_empty() { Duration::ZERO } else { total / timed.len() as u32 };
    Ok(InferenceRun {
        maps: timed.into_iter().map(|(m, _)| m).collect(),
        mean_latency,
    })
}

/// Train, infer and evaluate with one configuration.
pub fn run_experiment(
    manifest: &Manifest,
    train_config: &TrainConfig,
    infer_config: &InferConfig,
    limits: &[f64],
) -> Result<(TrainedModel, EvaluationReport)> {
    let (model, _) = train(manifest, train_config)?;
    let run = infer_manifest(manifest, &model, infer_config)?;
    let report = evaluate(manifest, &run.maps, limits)?;
    Ok((model, report))
}

/// The configurations swept by an ablation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationGrid {
    pub layer_pairs: Vec<(u32, u32)>,
    pub train_distances: Vec<LossDistance>,
    pub infer_distances: Vec<LossDistance>,
    pub fusions: Vec<Fusion>,
}

impl AblationGrid {
    pub fn len(&self) -> usize {
        self.layer_pairs.len() * self.train_distances.len() * self.infer_distances.len() * self.fusions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub layer_pair: (u32, u32),
    pub train_distance: LossDistance,
    pub infer_distance: LossDistance,
    pub fusion: Fusion,
    pub i_auroc: f64,
    pub p_auroc: f64,
    /// `(limit, aupro, rho)` per limit, dataset means.
    pub limits: Vec<(f64, f64, f64)>,
}

/// Row label of an ablation table: `[j -> k]` is the layer-`j` discrepancy
/// map alone, `[j <- k]` the layer-`k` one, `[j <-> k]` their product.
pub fn direction_label(pair: (u32, u32), fusion: Fusion) -> String {
    let (j, k) = pair;
    match fusion {
        Fusion::Product => format!("[{j} <-> {k}]"),
        Fusion::Sum => format!("[{j} + {k}]"),
        Fusion::DeltaJOnly => format!("[{j} -> {k}]"),
        Fusion::DeltaKOnly => format!("[{j} <- {k}]"),
    }
}

/// Trains once per (layer pair, train distance) and evaluates every
/// (infer distance, fusion) combination on that model.
pub fn run_ablation(
    manifest: &Manifest,
    base_train: &TrainConfig,
    base_infer: &InferConfig,
    grid: &AblationGrid,
    limits: &[f64],
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    if grid.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &pair in &grid.layer_pairs {
        let mut m = manifest.clone();
        m.layer_pair = pair;
        if let Some(s) = m.samples.iter().find(|s| !s.features.contains_key(&pair.0) || !s.features.contains_key(&pair.1)) {
            return Err(Error::Config(format!(
                "sample {} lacks features for layer pair {pair:?}",
                s.sample_id
            )));
        }
        for &train_distance in &grid.train_distances {
            let tc = TrainConfig {
                layer_pair: pair,
                loss_distance: train_distance,
                ..base_train.clone()
            };
            let (model, _) = train(&m, &tc)?;
            for &infer_distance in &grid.infer_distances {
                for &fusion in &grid.fusions {
                    let ic = InferConfig {
                        infer_distance,
                        fusion,
                        ..base_infer.clone()
                    };
                    let run = infer_manifest(&m, &model, &ic)?;
                    let report = evaluate(&m, &run.maps, limits)?;
                    let row = AblationRow {
                        layer_pair: pair,
                        train_distance,
                        infer_distance,
                        fusion,
                        i_auroc: report.mean.i_auroc,
                        p_auroc: report.mean.p_auroc,
                        limits: report.mean.limits.iter().map(|(l, a, _, r)| (*l, *a, *r)).collect(),
                    };
                    on_row(&row);
                    rows.push(row);
                }
            }
        }
    }
    Ok(rows)
}

pub fn ablation_tsv(rows: &[AblationRow]) -> String {
    let mut out = String::from("layers\ttrain_distance\tinfer_distance\tfusion\ti_auroc\tp_auroc");
    if let Some(first) = rows.first() {
        for (limit, ..) in &first.limits {
            let l = limit * 100.0;
            out.push_str(&format!("\taupro@{l}%\trho@{l}%"));
        }
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            direction_label(r.layer_pair, r.fusion),
            r.train_distance.as_str(),
            r.infer_distance.as_str(),
            r.fusion.as_str(),
            r.i_auroc,
            r.p_auroc
        ));
        for (_, aupro, rho) in &r.limits {
            out.push_str(&format!("\t{aupro}\t{rho}"));
        }
        out.push('\n');
    }
    out
}
