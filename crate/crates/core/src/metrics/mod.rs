//! Detection and segmentation metrics: image- and pixel-level AUROC, PRO
//! curves with partial-FPR integration, cumulative-quartile AUPRO by defect
//! size, and the robustness score derived from them.

mod auroc;
mod evaluate;
mod pro;
mod quartile;
mod regions;

pub use auroc::{auroc, p_auroc};
pub use evaluate::{
    evaluate, evaluate_category, render_table, CategoryReport, EvaluationReport, LimitReport, MeanReport,
    DEFAULT_LIMITS,
};
pub use pro::{pro_curve, ProCurve, ProSetup, ScoredMask, FPR_LEVELS};
pub use quartile::{percentile, quartile_report, quartile_thresholds, robustness, QuartileReport, Robustness};
pub use regions::{connected_components, Region};
