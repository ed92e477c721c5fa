use serde::Serialize;

use crate::error::{Error, Result};

use super::pro::{ProCurve, ProSetup};

/// Linear-interpolation percentile of sorted data (`q` in `[0, 1]`).
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Cumulative quartile thresholds `Q1..Q4` of a category's region sizes.
pub fn quartile_thresholds(region_sizes: &[usize]) -> Result<[f64; 4]> {
    if region_sizes.is_empty() {
        return Err(Error::Metric("no anomalous regions to take quartiles of".into()));
    }
    let mut sorted: Vec<f64> = region_sizes.iter().map(|&s| s as f64).collect();
    sorted.sort_by(f64::total_cmp);
    Ok([0.25, 0.5, 0.75, 1.0].map(|q| percentile(&sorted, q)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Robustness {
    /// Mean AUPRO across the four quartile sets.
    pub w: f64,
    /// Relative spread between the all-defects and smallest-defects AUPRO.
    pub s: f64,
    pub rho: f64,
}

/// `rho = w * (1 - s)`; `s` is 0 when both AUPRO(Q1) and AUPRO(Q4) are 0.
pub fn robustness(aupro_q: [f64; 4]) -> Robustness {
    let w = aupro_q.iter().sum::<f64>() / 4.0;
    let (q1, q4) = (aupro_q[0], aupro_q[3]);
    let denom = q1.max(q4);
    let s = if denom > 0.0 { (q4 - q1).abs() / denom } else { 0.0 };
    Robustness { w, s, rho: w * (1.0 - s) }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuartileReport {
    pub limit: f64,
    pub thresholds: [f64; 4],
    /// Regions entering each cumulative quartile set.
    pub region_counts: [usize; 4],
    pub aupro: [f64; 4],
    pub w: f64,
    pub s: f64,
    pub rho: f64,
    #[serde(skip)]
    pub curves: Vec<ProCurve>,
}

/// AUPRO at `limit` on each cumulative quartile set, and the robustness it implies.
pub fn quartile_report(setup: &ProSetup, limit: f64) -> Result<QuartileReport> {
    let sizes = setup.region_sizes();
    let thresholds = quartile_thresholds(&sizes)?;
    let mut curves = Vec::with_capacity(4);
    for q in thresholds {
        curves.push(setup.curve(limit, Some(q))?);
    }
    let aupro = [0, 1, 2, 3].map(|i| curves[i].aupro);
    let region_counts = thresholds.map(|q| sizes.iter().filter(|&&s| s as f64 <= q).count());
    let Robustness { w, s, rho } = robustness(aupro);
    Ok(QuartileReport {
        limit,
        thresholds,
        region_counts,
        aupro,
        w,
        s,
        rho,
        curves,
    })
}
