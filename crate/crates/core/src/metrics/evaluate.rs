use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::anomaly_map::AnomalyMap;
use crate::error::{Error, Result};
use crate::feature_store::{BinaryMask, Manifest};

use super::auroc::{auroc, p_auroc};
use super::pro::{ProCurve, ProSetup, ScoredMask};
use super::quartile::{quartile_report, QuartileReport};

/// Integration limits reported by default.
pub const DEFAULT_LIMITS: [f64; 2] = [0.3, 0.05];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LimitReport {
    pub limit: f64,
    /// AUPRO over every region of every test image.
    pub aupro: f64,
    pub quartiles: QuartileReport,
    #[serde(skip)]
    pub curve: ProCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryReport {
    pub category: String,
    pub test_samples: usize,
    pub anomalous_samples: usize,
    pub i_auroc: f64,
    pub p_auroc: f64,
    pub limits: Vec<LimitReport>,
}

/// Unweighted means over categories.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanReport {
    pub i_auroc: f64,
    pub p_auroc: f64,
    /// Per limit: `(limit, aupro, [aupro_q1..q4], rho)`.
    pub limits: Vec<(f64, f64, [f64; 4], f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub dataset_name: String,
    pub categories: Vec<CategoryReport>,
    pub mean: MeanReport,
}

/// Metrics of one category from in-memory maps and masks.
pub fn evaluate_category(
    category: &str,
    maps: &[&AnomalyMap],
    masks: &[BinaryMask],
    labels: &[bool],
    limits: &[f64],
) -> Result<CategoryReport> {
    let scores: Vec<(f64, bool)> = maps.iter().map(|m| m.global_score).zip(labels.iter().copied()).collect();
    let i_auroc = auroc(&scores)?;
    let grids: Vec<_> = maps.iter().map(|m| &m.map).collect();
    let mask_refs: Vec<&BinaryMask> = masks.iter().collect();
    let p_auroc = p_auroc(&grids, &mask_refs)?;
    let images: Vec<ScoredMask> = maps
        .iter()
        .zip(masks)
        .map(|(m, mask)| ScoredMask {
            sample_id: &m.sample_id,
            map: &m.map,
            mask,
        })
        .collect();
    let setup = ProSetup::new(&images)?;
    let limits = limits
        .iter()
        .map(|&limit| {
            let curve = setup.curve(limit, None)?;
            let quartiles = quartile_report(&setup, limit)?;
            Ok(LimitReport {
                limit,
                aupro: curve.aupro,
                quartiles,
                curve,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CategoryReport {
        category: category.to_string(),
        test_samples: maps.len(),
        anomalous_samples: labels.iter().filter(|&&l| l).count(),
        i_auroc,
        p_auroc,
        limits,
    })
}

/// Full report over every test sample of `manifest`. Maps must already be at
/// the ground-truth resolution.
pub fn evaluate(manifest: &Manifest, maps: &[AnomalyMap], limits: &[f64]) -> Result<EvaluationReport> {
    if limits.is_empty() {
        return Err(Error::Config("no integration limits requested".into()));
    }
    let by_id: HashMap<&str, &AnomalyMap> = maps.iter().map(|m| (m.sample_id.as_str(), m)).collect();
    let missing: Vec<&str> = manifest
        .test()
        .filter(|s| !by_id.contains_key(s.sample_id.as_str()))
        .map(|s| s.sample_id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Metric(format!(
            "no anomaly map for {} test samples: {}",
            missing.len(),
            missing.join(", ")
        )));
    }
    let categories = manifest.categories();
    let reports = categories
        .par_iter()
        .filter(|c| manifest.test().any(|s| &s.category == *c))
        .map(|category| {
            let samples: Vec<_> = manifest.test().filter(|s| &s.category == category).collect();
            let masks = samples.iter().map(|s| s.load_mask()).collect::<Result<Vec<_>>>()?;
            let cat_maps: Vec<&AnomalyMap> = samples.iter().map(|s| by_id[s.sample_id.as_str()]).collect();
            let labels: Vec<bool> = samples.iter().map(|s| s.label.is_anomalous()).collect();
            evaluate_category(category, &cat_maps, &masks, &labels, limits)
                .map_err(|e| Error::Metric(format!("category {category}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvaluationReport {
        dataset_name: manifest.dataset_name.clone(),
        mean: mean_report(&reports, limits),
        categories: reports,
    })
}

fn mean_report(reports: &[CategoryReport], limits: &[f64]) -> MeanReport {
    let n = reports.len().max(1) as f64;
    let mean = |f: &dyn Fn(&CategoryReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    MeanReport {
        i_auroc: mean(&|r| r.i_auroc),
        p_auroc: mean(&|r| r.p_auroc),
        limits: limits
            .iter()
            .enumerate()
            .map(|(i, &limit)| {
                let q = [0, 1, 2, 3].map(|qi| mean(&|r| r.limits[i].quartiles.aupro[qi]));
                (limit, mean(&|r| r.limits[i].aupro), q, mean(&|r| r.limits[i].quartiles.rho))
            })
            .collect(),
    }
}

fn pct(limit: f64) -> String {
    format!("{}%", (limit * 100.0 * 1e6).round() / 1e6)
}

impl EvaluationReport {
    pub fn tsv_header(&self) -> String {
        let mut cols = vec!["category".to_string(), "i_auroc".into(), "p_auroc".into()];
        for (limit, ..) in &self.mean.limits {
            let l = pct(*limit);
            cols.push(format!("aupro@{l}"));
            for q in 1..=4 {
                cols.push(format!("q{q}_aupro@{l}"));
            }
            cols.push(format!("rho@{l}"));
        }
        cols.join("\t")
    }

    /// Delimiter-separated table: one row per category plus a `mean` row.
    pub fn to_tsv(&self) -> String {
        let mut out = self.tsv_header();
        out.push('\n');
        for r in &self.categories {
            let mut row = vec![r.category.clone(), r.i_auroc.to_string(), r.p_auroc.to_string()];
            for l in &r.limits {
                row.push(l.aupro.to_string());
                row.extend(l.quartiles.aupro.iter().map(f64::to_string));
                row.push(l.quartiles.rho.to_string());
            }
            out.push_str(&row.join("\t"));
            out.push('\n');
        }
        let mut row = vec!["mean".to_string(), self.mean.i_auroc.to_string(), self.mean.p_auroc.to_string()];
        for (_, aupro, q, rho) in &self.mean.limits {
            row.push(aupro.to_string());
            row.extend(q.iter().map(f64::to_string));
            row.push(rho.to_string());
        }
        out.push_str(&row.join("\t"));
        out.push('\n');
        out
    }

    /// Curve points for plotting: `category, limit, set, fpr, pro` where set is
    /// `all` or `q1`..`q4`.
    pub fn curves_tsv(&self) -> String {
        let mut out = String::from("category\tlimit\tset\tfpr\tpro\n");
        for r in &self.categories {
            for l in &r.limits {
                let sets = std::iter::once(("all".to_string(), &l.curve))
                    .chain(l.quartiles.curves.iter().enumerate().map(|(i, c)| (format!("q{}", i + 1), c)));
                for (name, curve) in sets {
                    for (fpr, pro) in &curve.points {
                        let _ = writeln!(out, "{}\t{}\t{name}\t{fpr}\t{pro}", r.category, l.limit);
                    }
                }
            }
        }
        out
    }
}

/// Fixed-width human-readable rendering of a metrics table.
pub fn render_table(tsv: &str) -> String {
    let rows: Vec<Vec<String>> = tsv
        .lines()
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, line)| {
            line.split('\t')
                .enumerate()
                .map(|(j, cell)| match (i, j, cell.parse::<f64>()) {
                    (0, ..) | (_, 0, _) => cell.to_string(),
                    (_, _, Ok(v)) => format!("{v:.3}"),
                    _ => cell.to_string(),
                })
                .collect()
        })
        .collect();
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|j| rows.iter().filter_map(|r| r.get(j)).map(String::len).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(j, c)| if j == 0 { format!("{c:<w$}", w = widths[j]) } else { format!("{c:>w$}", w = widths[j]) })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * cols.saturating_sub(1)));
            out.push('\n');
        }
    }
    out
}
