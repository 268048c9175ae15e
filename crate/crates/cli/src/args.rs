use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dlfa_core::aif::{AifVariant, GateMode};
use dlfa_core::analysis::ReportFormat;

#[derive(Debug, Parser)]
#[command(name = "dlfa", version, about = "Attention-gated layer fusion experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic source/target pair of layer banks.
    GenTask(GenTaskArgs),
    /// Fuse two layers of a bank and write the result as a one-layer bank.
    Fuse(FuseArgs),
    /// Train a classifier (optionally with a fusion module) on a source bank.
    Train(TrainArgs),
    /// Baseline plus D_x rows for a list of layers.
    Sweep(SweepArgs),
    /// Baseline plus global-only, local-only and full gates at one layer.
    Ablate(AblateArgs),
    /// Average cross-lingual cosine similarity of sentence embeddings.
    Cossim(CossimArgs),
    /// Check analytic gradients of the full pipeline against finite differences.
    Gradcheck(GradcheckArgs),
    /// Summarize a layer bank.
    InspectBank(InspectArgs),
    /// Re-execute a run from its manifest and verify its outputs.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Full,
    Global,
    Local,
}

impl From<VariantArg> for AifVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Full => AifVariant::Full,
            VariantArg::Global => AifVariant::Global,
            VariantArg::Local => AifVariant::Local,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GateModeArg {
    /// The gate is the sigmoid output itself.
    Sigmoid,
    /// The gate is the averaged input scaled by the sigmoid output.
    Literal,
}

impl From<GateModeArg> for GateMode {
    fn from(m: GateModeArg) -> Self {
        match m {
            GateModeArg::Sigmoid => GateMode::SigmoidOnly,
            GateModeArg::Literal => GateMode::InputScaled,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Csv,
    Json,
    Text,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Json => ReportFormat::Json,
            FormatArg::Text => ReportFormat::Text,
        }
    }
}

/// Parses `3`, `1..12` (inclusive) and comma-separated mixtures of both.
pub fn parse_layers(s: &str) -> Result<Vec<usize>, String> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim) {
        if let Some((a, b)) = part.split_once("..") {
            let a: usize = a.trim().parse().map_err(|_| format!("bad range start in {part:?}"))?;
            let b: usize = b
                .trim()
                .trim_start_matches('=')
                .parse()
                .map_err(|_| format!("bad range end in {part:?}"))?;
            if a == 0 || a > b {
                return Err(format!("range {part:?} must satisfy 1 <= start <= end"));
            }
            out.extend(a..=b);
        } else {
            let v: usize = part.parse().map_err(|_| format!("bad layer index {part:?}"))?;
            if v == 0 {
                return Err("layers are numbered from 1".into());
            }
            out.push(v);
        }
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// Where the run manifest goes, when not next to the primary output.
#[derive(Debug, Clone, Args)]
pub struct ManifestArg {
    /// Write the run manifest here instead of `<primary output>.run.json`.
    #[arg(long, value_name = "PATH")]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainFlags {
    /// JSON training configuration; flags below override its fields.
    #[arg(long, value_name = "PATH", conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Named hyperparameter preset.
    #[arg(long, value_parser = ["desk", "paper-scale"])]
    pub preset: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct GateFlags {
    #[arg(long, value_enum, default_value = "sigmoid")]
    pub gate_mode: GateModeArg,
    /// Bottleneck reduction ratio of the gate branches.
    #[arg(long, default_value_t = 4)]
    pub reduction: usize,
}

#[derive(Debug, Clone, Args)]
pub struct GenTaskArgs {
    /// JSON task specification; omitted fields take their defaults.
    #[arg(long, value_name = "PATH")]
    pub spec: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub out_src: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub out_tgt: PathBuf,
    /// Overrides the seed in the specification.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub manifest: ManifestArg,
}

#[derive(Debug, Clone, Args)]
pub struct FuseArgs {
    #[arg(long, value_name = "PATH")]
    pub bank: PathBuf,
    /// Lower layer x of the pair (x, upper).
    #[arg(long)]
    pub layer: usize,
    /// Upper layer; defaults to the bank's last layer.
    #[arg(long)]
    pub upper: Option<usize>,
    /// Trained model parameters; a freshly initialized gate otherwise.
    #[arg(long, value_name = "PATH", conflicts_with_all = ["variant", "upper"])]
    pub params: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    #[command(flatten)]
    pub gate: GateFlags,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    #[command(flatten)]
    pub manifest: ManifestArg,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Source bank; its train split is used for fitting.
    #[arg(long, value_name = "PATH")]
    pub src: PathBuf,
    /// Banks to evaluate on (test split) after training.
    #[arg(long, value_name = "PATH")]
    pub eval: Vec<PathBuf>,
    /// Fuse this layer with the last one; omit for the last-layer baseline.
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long, value_enum, default_value = "full", requires = "layer")]
    pub variant: VariantArg,
    #[command(flatten)]
    pub gate: GateFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Trained parameters (JSON).
    #[arg(long, value_name = "PATH")]
    pub out_params: PathBuf,
    /// Loss curve and metrics (JSON).
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub manifest: ManifestArg,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[arg(long, value_name = "PATH")]
    pub src: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub tgt: PathBuf,
    /// Layers x for the D_x rows, e.g. `1..12` or `3,6,11`.
    #[arg(long, value_parser = parse_layers)]
    pub layers: std::vec::Vec<usize>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "full")]
    pub variant: Vec<VariantArg>,
    #[command(flatten)]
    pub gate: GateFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Rows trained in parallel; the report does not depend on it.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub jobs: u64,
    #[arg(long, value_name = "PATH")]
    pub report: PathBuf,
    /// Report format; inferred from the extension when omitted.
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    #[command(flatten)]
    pub manifest: ManifestArg,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[arg(long, value_name = "PATH")]
    pub src: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub tgt: PathBuf,
    #[arg(long)]
    pub layer: usize,
    #[command(flatten)]
    pub gate: GateFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub jobs: u64,
    #[arg(long, value_name = "PATH")]
    pub report: PathBuf,
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    #[command(flatten)]
    pub manifest: ManifestArg,
}

#[derive(Debug, Clone, Args)]
pub struct CossimArgs {
    #[arg(long, value_name = "PATH")]
    pub src: PathBuf,
    /// Parallel target banks (repeatable).
    #[arg(long, value_name = "PATH", required = true)]
    pub tgt: Vec<PathBuf>,
    /// Layers x whose D_x systems are probed, besides the baseline.
    #[arg(long, value_parser = parse_layers)]
    pub layers: Option<std::vec::Vec<usize>>,
    /// Trained models to probe (repeatable), named by file stem.
    #[arg(long, value_name = "PATH")]
    pub params: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "full")]
    pub variant: VariantArg,
    #[command(flatten)]
    pub gate: GateFlags,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of parallel sentences probed (first N of the test split).
    #[arg(long, default_value_t = 20)]
    pub sentences: usize,
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    #[command(flatten)]
    pub manifest: ManifestArg,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 17)]
    pub seed: u64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub rtol: f64,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 8)]
    pub tokens: usize,
    #[arg(long, default_value_t = 32)]
    pub channels: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, value_enum, default_value = "full")]
    pub variant: VariantArg,
    #[command(flatten)]
    pub gate: GateFlags,
    /// Check with BN in evaluation mode instead of batch statistics.
    #[arg(long)]
    pub eval_mode: bool,
    /// Write the per-parameter report here as JSON.
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub manifest: ManifestArg,
}

#[derive(Debug, Clone, Args)]
pub struct InspectArgs {
    #[arg(value_name = "BANK")]
    pub bank: PathBuf,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
    #[command(flatten)]
    pub manifest: ManifestArg,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    #[arg(value_name = "MANIFEST")]
    pub manifest: PathBuf,
    /// Only re-run; skip the checksum comparison.
    #[arg(long)]
    pub no_verify: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn layer_syntax() {
        assert_eq!(parse_layers("1..4").unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(parse_layers("11,3,6").unwrap(), vec![3, 6, 11]);
        assert_eq!(parse_layers("1..2,8,2").unwrap(), vec![1, 2, 8]);
        assert_eq!(parse_layers("1..=3").unwrap(), vec![1, 2, 3]);
        assert!(parse_layers("0..3").is_err());
        assert!(parse_layers("5..3").is_err());
        assert!(parse_layers("x").is_err());
    }

    #[test]
    fn definition_is_consistent() {
        Cli::command().debug_assert();
    }
}
