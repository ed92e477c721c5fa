use std::collections::HashMap;
use std::fs;
use std::path::{Component, Path, PathBuf};

use log::info;
use pinpoint_core::anomaly_map::{read_anomaly_map, read_scores, write_anomaly_map, write_scores, AnomalyMap, ScoreRow};
use pinpoint_core::feature_store::{load_manifest, sample_fewshot, validate_manifest, Manifest};
use pinpoint_core::metrics::{evaluate as evaluate_maps, render_table};
use pinpoint_core::pipeline::{ablation_tsv, infer_manifest, run_ablation, AblationGrid};
use pinpoint_core::student::{load_model, save_model, train_with};
use pinpoint_core::synthetic::generate;
use pinpoint_core::{Error, Result};
use serde_json::json;

use crate::args::{AblateArgs, EvaluateArgs, InferArgs, ReportArgs, SynthArgs, TrainArgs};
use crate::config::{self, apply_infer, apply_train, banner};
use crate::plot;

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

/// The manifest with its working layer pair replaced, checked again so that
/// missing feature files for the new pair surface before any work starts.
fn with_layer_pair(mut manifest: Manifest, pair: (u32, u32), path: &Path) -> Result<Manifest> {
    if manifest.layer_pair == pair {
        return Ok(manifest);
    }
    manifest.layer_pair = pair;
    let violations = validate_manifest(&manifest);
    if violations.is_empty() {
        Ok(manifest)
    } else {
        Err(Error::Manifest { path: path.to_path_buf(), violations })
    }
}

/// `maps/<sample id>.pefg`, with the id's `/`-separated parts as directories.
pub fn map_path(dir: &Path, sample_id: &str) -> Result<PathBuf> {
    let rel = Path::new(sample_id);
    let safe = !sample_id.is_empty() && rel.components().all(|c| matches!(c, Component::Normal(_)));
    if !safe {
        return Err(Error::Config(format!("sample id {sample_id:?} cannot be used as a file name")));
    }
    let mut p = dir.join("maps").join(rel);
    let name = format!("{}.pefg", p.file_name().unwrap().to_string_lossy());
    p.set_file_name(name);
    Ok(p)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let file = config::load(a.config.as_deref())?;
    let cfg = apply_train(file.train, &a.train)?;
    banner(
        "train",
        &json!({"manifest": a.manifest, "model": a.model, "shots": a.shots, "shots_seed": a.shots_seed, "train": cfg}),
    );
    let mut manifest = with_layer_pair(load_manifest(&a.manifest)?, cfg.layer_pair, &a.manifest)?;
    if let Some(shots) = a.shots {
        manifest = sample_fewshot(&manifest, shots, a.shots_seed)?;
    }
    info!("training on {} nominal images", manifest.train().count());
    let mut log = String::from("epoch\tforward_loss\tbackward_loss\tforward_steps\tbackward_steps\tdegenerate_patches\n");
    let (model, _) = train_with(&manifest, &cfg, |e| {
        println!(
            "epoch {:>3}  forward {:.6}  backward {:.6}",
            e.epoch + 1,
            e.forward_loss,
            e.backward_loss
        );
        log.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            e.epoch + 1,
            e.forward_loss,
            e.backward_loss,
            e.forward_steps,
            e.backward_steps,
            e.degenerate_patches
        ));
    })?;
    if let Some(dir) = a.model.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_model(&model, &a.model)?;
    if let Some(path) = &a.log {
        write(path, &log)?;
    }
    info!("model written to {}", a.model.display());
    Ok(())
}

pub fn infer(a: &InferArgs) -> Result<()> {
    let file = config::load(a.config.as_deref())?;
    let cfg = apply_infer(file.infer, &a.infer)?;
    let model = load_model(&a.model)?;
    banner(
        "infer",
        &json!({"manifest": a.manifest, "model": a.model, "out": a.out, "layer_pair": model.config.layer_pair, "infer": cfg}),
    );
    let manifest = with_layer_pair(load_manifest(&a.manifest)?, model.config.layer_pair, &a.manifest)?;
    let run = infer_manifest(&manifest, &model, &cfg)?;
    let mut rows = Vec::with_capacity(run.maps.len());
    for (map, sample) in run.maps.iter().zip(manifest.test()) {
        let path = map_path(&a.out, &map.sample_id)?;
        create_dir(path.parent().unwrap())?;
        write_anomaly_map(&map.map, &path)?;
        rows.push(ScoreRow {
            sample_id: map.sample_id.clone(),
            global_score: map.global_score,
            label: sample.label,
        });
    }
    write_scores(&rows, &a.out.join("scores.tsv"))?;
    println!(
        "{} anomaly maps written to {}; mean time per sample {:.3} ms",
        rows.len(),
        a.out.join("maps").display(),
        run.mean_latency.as_secs_f64() * 1e3
    );
    Ok(())
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let file = config::load(a.config.as_deref())?;
    let limits = config::limits(&file, a.limits.as_ref().map(|l| l.0.as_slice()))?;
    banner("evaluate", &json!({"manifest": a.manifest, "maps": a.maps, "out": a.out, "limits": limits}));
    let manifest = load_manifest(&a.manifest)?;
    let scores: HashMap<String, f64> = read_scores(&a.maps.join("scores.tsv"))?
        .into_iter()
        .map(|r| (r.sample_id, r.global_score))
        .collect();
    let maps = manifest
        .test()
        .map(|s| {
            let map = read_anomaly_map(&map_path(&a.maps, &s.sample_id)?)?;
            let global_score = *scores
                .get(&s.sample_id)
                .ok_or_else(|| Error::Metric(format!("no global score for {}", s.sample_id)))?;
            Ok(AnomalyMap { sample_id: s.sample_id.clone(), map, global_score })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate_maps(&manifest, &maps, &limits)?;
    create_dir(&a.out)?;
    let tsv = report.to_tsv();
    let table = render_table(&tsv);
    write(&a.out.join("metrics.tsv"), &tsv)?;
    write(&a.out.join("metrics.txt"), &table)?;
    write(&a.out.join("curves.tsv"), &report.curves_tsv())?;
    write(
        &a.out.join("report.json"),
        &serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    print!("{table}");
    Ok(())
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let file = config::load(a.config.as_deref())?;
    let limits = config::limits(&file, a.limits.as_ref().map(|l| l.0.as_slice()))?;
    let train_cfg = apply_train(file.train, &a.train)?;
    let infer_cfg = apply_infer(file.infer, &a.infer)?;
    let grid = AblationGrid {
        layer_pairs: a.layer_pairs.as_ref().map_or(vec![train_cfg.layer_pair], |p| p.0.clone()),
        train_distances: a.train_distances.as_ref().map_or(vec![train_cfg.loss_distance], |l| l.0.clone()),
        infer_distances: a.infer_distances.as_ref().map_or(vec![infer_cfg.infer_distance], |l| l.0.clone()),
        fusions: a.fusions.as_ref().map_or(vec![infer_cfg.fusion], |l| l.0.clone()),
    };
    banner(
        "ablate",
        &json!({"manifest": a.manifest, "out": a.out, "grid": grid, "train": train_cfg, "infer": infer_cfg, "limits": limits}),
    );
    let manifest = load_manifest(&a.manifest)?;
    info!("{} configurations", grid.len());
    let rows = run_ablation(&manifest, &train_cfg, &infer_cfg, &grid, &limits, |row| {
        info!(
            "{} train {} infer {} {}: I-AUROC {:.4}",
            pinpoint_core::pipeline::direction_label(row.layer_pair, row.fusion),
            row.train_distance.as_str(),
            row.infer_distance.as_str(),
            row.fusion.as_str(),
            row.i_auroc
        )
    })?;
    create_dir(&a.out)?;
    let tsv = ablation_tsv(&rows);
    let table = render_table(&tsv);
    write(&a.out.join("ablation.tsv"), &tsv)?;
    write(&a.out.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn report(a: &ReportArgs) -> Result<()> {
    let out = match &a.out {
        Some(o) => o.clone(),
        None => a.metrics.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    banner("report", &json!({"metrics": a.metrics, "curves": a.curves, "out": out}));
    let table = render_table(&read(&a.metrics)?);
    if !out.as_os_str().is_empty() {
        create_dir(&out)?;
    }
    write(&out.join("table.txt"), &table)?;
    print!("{table}");
    if let Some(curves) = &a.curves {
        let series = plot::parse_curves(&read(curves)?).map_err(|e| Error::Shape(format!("{}: {e}", curves.display())))?;
        for ((category, limit), sets) in &series {
            let name = format!("pro_{}_{}.svg", plot::file_stem(category), plot::limit_label(limit));
            let path = out.join(name);
            write(&path, &plot::svg(category, limit, sets))?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let file = config::load(a.config.as_deref())?;
    let mut cfg = file.synthetic;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(c) = &a.categories {
        cfg.categories = c.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    }
    banner("synth", &json!({"out": a.out, "synthetic": cfg}));
    let manifest = generate(&cfg, &a.out)?;
    println!(
        "{} samples written; manifest at {}",
        manifest.samples.len(),
        a.out.join("manifest.json").display()
    );
    Ok(())
}
