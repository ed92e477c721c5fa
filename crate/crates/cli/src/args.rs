use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use pinpoint_core::anomaly_map::Fusion;
use pinpoint_core::student::{LossDistance, LossReduction};

#[derive(Debug, Parser)]
#[command(name = "pinpoint", version, about = "Teacher-Student anomaly detection on exported ViT patch features")]
pub struct Cli {
    /// Worker threads for inference and evaluation (default: all cores).
    #[arg(long, global = true, env = "PINPOINT_THREADS")]
    pub threads: Option<usize>,

    /// More logging (-v debug, -vv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the forward and backward Students on a manifest's nominal training split.
    Train(TrainArgs),
    /// Write an anomaly map per test sample and a table of global scores.
    Infer(InferArgs),
    /// Compute I-AUROC, P-AUROC, AUPRO, quartile AUPROs and robustness.
    Evaluate(EvaluateArgs),
    /// Train and evaluate over a grid of layer pairs, distances and fusions.
    Ablate(AblateArgs),
    /// Render a metrics table and PRO-curve plots from evaluate's output.
    Report(ReportArgs),
    /// Write a synthetic feature dataset for trying the pipeline out.
    Synth(SynthArgs),
}

pub fn parse_pair(s: &str) -> Result<(u32, u32), String> {
    let (j, k) = s
        .split_once(',')
        .ok_or_else(|| format!("expected two layers as j,k, got {s:?}"))?;
    let j = j.trim().parse().map_err(|_| format!("bad layer index {j:?}"))?;
    let k = k.trim().parse().map_err(|_| format!("bad layer index {k:?}"))?;
    Ok((j, k))
}

/// Comma-separated list; an empty string is an empty list.
#[derive(Debug, Clone)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr<Err = String>> FromStr for List<T> {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.split(',').map(str::trim).filter(|p| !p.is_empty()).map(T::from_str).collect::<Result<_, _>>().map(List)
    }
}

/// Layer pairs separated by `;` or spaces, each written `j,k`.
#[derive(Debug, Clone)]
pub struct Pairs(pub Vec<(u32, u32)>);

impl FromStr for Pairs {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.split([';', ' ']).filter(|p| !p.is_empty()).map(parse_pair).collect::<Result<_, _>>().map(Pairs)
    }
}

fn parse_limits(s: &str) -> Result<List<f64>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<f64>().map_err(|_| format!("bad limit {p:?}")))
        .collect::<Result<_, _>>()
        .map(List)
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    /// Shallow and deep layer, e.g. 8,12.
    #[arg(long, value_parser = parse_pair)]
    pub layers: Option<(u32, u32)>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    /// Training distance: cosine or l2.
    #[arg(long)]
    pub loss: Option<LossDistance>,
    /// How per-patch losses combine: mean or sum.
    #[arg(long, value_parser = parse_reduction)]
    pub loss_reduction: Option<LossReduction>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Hidden width of both Students (default: their input dimension).
    #[arg(long)]
    pub hidden_units: Option<usize>,
}

fn parse_reduction(s: &str) -> Result<LossReduction, String> {
    match s {
        "mean" => Ok(LossReduction::Mean),
        "sum" => Ok(LossReduction::Sum),
        _ => Err(format!("unknown reduction {s:?} (expected mean or sum)")),
    }
}

#[derive(Debug, Args)]
pub struct InferFlags {
    /// Distance for the anomaly maps: cosine or l2.
    #[arg(long)]
    pub infer_distance: Option<LossDistance>,
    /// product, sum, delta_j_only or delta_k_only.
    #[arg(long)]
    pub fusion: Option<Fusion>,
    /// Gaussian smoothing sigma in pixels (0 disables).
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Fraction of pixels averaged into the global score.
    #[arg(long)]
    pub top_fraction: Option<f64>,
    /// Smooth the padded map and crop afterwards.
    #[arg(long)]
    pub smooth_before_crop: Option<bool>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Where to write the trained model.
    #[arg(long)]
    pub model: PathBuf,
    /// JSON file with `train` (and optionally other) sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Train on this many randomly chosen nominal images per category.
    #[arg(long)]
    pub shots: Option<usize>,
    /// Seed of the few-shot draw.
    #[arg(long, default_value_t = 0)]
    pub shots_seed: u64,
    /// Also write per-epoch losses here as TSV.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Output directory for maps/ and scores.tsv.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub infer: InferFlags,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory written by `infer` (containing maps/).
    #[arg(long)]
    pub maps: PathBuf,
    /// Output directory for metrics.tsv, metrics.txt, curves.tsv and report.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// FPR integration limits.
    #[arg(long, value_parser = parse_limits)]
    pub limits: Option<List<f64>>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for ablation.tsv and ablation.txt.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Layer pairs, e.g. "8,12;10,12" (default: the training layers).
    #[arg(long)]
    pub layer_pairs: Option<Pairs>,
    /// Training distances, comma-separated (default: the training loss).
    #[arg(long)]
    pub train_distances: Option<List<LossDistance>>,
    /// Inference distances, comma-separated (default: the inference distance).
    #[arg(long)]
    pub infer_distances: Option<List<LossDistance>>,
    /// Fusions, comma-separated (default: the inference fusion).
    #[arg(long)]
    pub fusions: Option<List<Fusion>>,
    #[arg(long, value_parser = parse_limits)]
    pub limits: Option<List<f64>>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub infer: InferFlags,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// metrics.tsv or ablation.tsv.
    #[arg(long)]
    pub metrics: PathBuf,
    /// curves.tsv from `evaluate`; one SVG per category and limit.
    #[arg(long)]
    pub curves: Option<PathBuf>,
    /// Directory for the table and plots (default: next to the metrics file).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with a `synthetic` section.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Category names, comma-separated.
    #[arg(long)]
    pub categories: Option<String>,
}
