use serde::{Deserialize, Serialize};

use crate::aif::{AifVariant, GateMode, DEFAULT_REDUCTION_RATIO};
use crate::bankio::{LayerBank, Split};
use crate::dlfa::LayerPair;
use crate::error::{Error, Result};

use super::model::{fused_id, ClassifierHead, FeatureSystem, Model};
use super::train::{evaluate, train, Metrics, TrainConfig};

/// One row of a sweep: the plain last layer, or a fusion of layer `lower`
/// with the last layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RowConfig {
    Baseline,
    Fused { lower: usize, variant: AifVariant },
}

impl RowConfig {
    pub fn id(&self) -> String {
        match self {
            RowConfig::Baseline => "baseline".into(),
            RowConfig::Fused { lower, variant } => fused_id(*lower, *variant),
        }
    }

    /// Baseline first, then by layer; at one layer G, L, then full.
    fn sort_key(&self) -> (usize, usize, u8) {
        match self {
            RowConfig::Baseline => (0, 0, 0),
            RowConfig::Fused { lower, variant } => (
                1,
                *lower,
                match variant {
                    AifVariant::Global => 0,
                    AifVariant::Local => 1,
                    AifVariant::Full => 2,
                },
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSettings {
    pub gate_mode: GateMode,
    pub reduction_ratio: usize,
    pub train: TrainConfig,
    /// Rows trained concurrently; results do not depend on it.
    pub jobs: usize,
}

impl Default for SweepSettings {
    fn default() -> Self {
        SweepSettings {
            gate_mode: GateMode::SigmoidOnly,
            reduction_ratio: DEFAULT_REDUCTION_RATIO,
            train: TrainConfig::default(),
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub config: String,
    pub row: RowConfig,
    /// Metrics on the source bank's test split.
    pub source: Metrics,
    /// Zero-shot metrics on the target bank's test split.
    pub target: Metrics,
    pub initial_loss: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub upper_layer: usize,
    pub gate_mode: GateMode,
    pub seed: u64,
    pub source_language: String,
    pub target_language: String,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn row(&self, config: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.config == config)
    }

    /// Row with the best target accuracy, excluding the baseline. Earlier rows win ties.
    pub fn best_fused(&self) -> Option<&SweepRow> {
        self.rows
            .iter()
            .filter(|r| r.row != RowConfig::Baseline)
            .fold(None, |best: Option<&SweepRow>, r| match best {
                Some(b) if b.target.accuracy >= r.target.accuracy => Some(b),
                _ => Some(r),
            })
    }
}

fn check_pair(source: &LayerBank, target: &LayerBank) -> Result<()> {
    let (s, t) = (source.shape(), target.shape());
    if source.n_layers() != target.n_layers() || s.tokens != t.tokens || s.channels != t.channels {
        return Err(Error::Data(format!(
            "source bank ({} layers of {s}) and target bank ({} layers of {t}) are incompatible",
            source.n_layers(),
            target.n_layers()
        )));
    }
    if source.num_classes() != target.num_classes() || source.flavor() != target.flavor() {
        return Err(Error::Data("source and target banks label different tasks".into()));
    }
    Ok(())
}

/// Freshly initialized model for one row. Every row draws its head from
/// the same seed stream, so rows differ only in their feature system.
pub fn build_model(config: RowConfig, bank: &LayerBank, settings: &SweepSettings) -> Result<Model> {
    let upper = bank.n_layers();
    let channels = bank.shape().channels;
    let seed = settings.train.seed;
    let system = match config {
        RowConfig::Baseline => FeatureSystem::baseline(upper)?,
        RowConfig::Fused { lower, variant } => FeatureSystem::fused(
            LayerPair::with_last(lower, upper)?,
            channels,
            settings.reduction_ratio,
            variant,
            settings.gate_mode,
            seed,
        )?,
    };
    let head = ClassifierHead::init(channels, bank.num_classes(), seed)?;
    Model::new(system, head, bank.flavor())
}

/// Trains one row on the source bank and evaluates on both test splits.
pub fn run_row(
    config: RowConfig,
    source: &LayerBank,
    target: &LayerBank,
    settings: &SweepSettings,
) -> Result<(SweepRow, Model)> {
    let model = build_model(config, source, settings)?;
    let outcome = train(&model, source, &settings.train)?;
    let row = SweepRow {
        config: config.id(),
        row: config,
        source: evaluate(&outcome.model, source, Split::Test)?,
        target: evaluate(&outcome.model, target, Split::Test)?,
        initial_loss: outcome.initial_loss,
        final_loss: outcome.final_loss,
    };
    Ok((row, outcome.model))
}

/// Runs every configuration (deduplicated) and assembles a report in
/// canonical row order, independent of `settings.jobs`.
pub fn run_configs(
    configs: &[RowConfig],
    source: &LayerBank,
    target: &LayerBank,
    settings: &SweepSettings,
) -> Result<SweepReport> {
    check_pair(source, target)?;
    if settings.jobs == 0 {
        return Err(Error::Config("jobs must be at least 1".into()));
    }
    let mut configs = configs.to_vec();
    configs.sort_by_key(RowConfig::sort_key);
    configs.dedup();
    for c in &configs {
        if let RowConfig::Fused { lower, .. } = c {
            LayerPair::with_last(*lower, source.n_layers())?;
        }
    }
    let run = |c: &RowConfig| run_row(*c, source, target, settings).map(|(row, _)| row);
    let rows = if settings.jobs == 1 {
        configs.iter().map(run).collect::<Result<Vec<_>>>()?
    } else {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(settings.jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| configs.par_iter().map(run).collect::<Result<Vec<_>>>())?
    };
    let language = |b: &LayerBank| b.languages().join("+");
    Ok(SweepReport {
        upper_layer: source.n_layers(),
        gate_mode: settings.gate_mode,
        seed: settings.train.seed,
        source_language: language(source),
        target_language: language(target),
        rows,
    })
}

/// Baseline plus `D_x` for every requested layer and variant.
pub fn layer_sweep(
    source: &LayerBank,
    target: &LayerBank,
    layers: &[usize],
    variants: &[AifVariant],
    settings: &SweepSettings,
) -> Result<SweepReport> {
    if layers.is_empty() || variants.is_empty() {
        return Err(Error::Config("a sweep needs at least one layer and one variant".into()));
    }
    let mut configs = vec![RowConfig::Baseline];
    for &lower in layers {
        for &variant in variants {
            configs.push(RowConfig::Fused { lower, variant });
        }
    }
    run_configs(&configs, source, target, settings)
}

/// Baseline, then `D_x_G`, `D_x_L` and `D_x` at one layer.
pub fn ablation(source: &LayerBank, target: &LayerBank, layer: usize, settings: &SweepSettings) -> Result<SweepReport> {
    layer_sweep(
        source,
        target,
        &[layer],
        &[AifVariant::Global, AifVariant::Local, AifVariant::Full],
        settings,
    )
}
