use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::aif::{AifVariant, GateMode, InitScheme};
use crate::bankio::{LayerBank, TaskFlavor};
use crate::dlfa::{record_dlfa, DlfaSystem, LayerPair};
use crate::error::{Error, Result};
use crate::gradcheck::Parameterized;
use crate::rng;
use crate::tape::{GradientTape, Value, Var};
use crate::tensor::{BatchStats, BnMode, FeatureTensor, Matrix};
use crate::AifParameters;

/// Linear classifier over `E` channels into `K` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl ClassifierHead {
    /// Weights drawn from `N(0, 1/E)`, zero bias.
    pub fn init(channels: usize, classes: usize, seed: u64) -> Result<Self> {
        if channels == 0 || classes < 2 {
            return Err(Error::Config(format!(
                "classifier needs channels >= 1 and classes >= 2, got {channels} and {classes}"
            )));
        }
        let mut r = rng::stream(seed, "head");
        let std = (1.0 / channels as f64).sqrt();
        let data = (0..channels * classes)
            .map(|_| std * r.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(ClassifierHead {
            weight: Matrix::new(channels, classes, data)?,
            bias: vec![0.0; classes],
        })
    }

    pub fn channels(&self) -> usize {
        self.weight.rows
    }

    pub fn classes(&self) -> usize {
        self.weight.cols
    }

    pub fn validate(&self) -> Result<()> {
        if self.weight.data.len() != self.weight.rows * self.weight.cols || self.bias.len() != self.weight.cols {
            return Err(Error::Config(format!(
                "classifier head {}×{} with {} biases",
                self.weight.rows,
                self.weight.cols,
                self.bias.len()
            )));
        }
        Ok(())
    }
}

/// What produces the features the classifier sees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FeatureSystem {
    /// A single encoder layer, unmodified.
    Baseline { layer: usize },
    /// Two layers fused by a gate.
    Fused(DlfaSystem),
}

impl FeatureSystem {
    pub fn baseline(layer: usize) -> Result<Self> {
        if layer == 0 {
            return Err(Error::Config("layers are numbered from 1".into()));
        }
        Ok(FeatureSystem::Baseline { layer })
    }

    /// A Kaiming-initialized fused system.
    pub fn fused(
        pair: LayerPair,
        channels: usize,
        reduction_ratio: usize,
        variant: AifVariant,
        mode: GateMode,
        seed: u64,
    ) -> Result<Self> {
        let params = AifParameters::init(channels, reduction_ratio, variant, InitScheme::Kaiming, seed)?;
        Ok(FeatureSystem::Fused(DlfaSystem::new(pair, mode, params)?))
    }

    /// Row label: `baseline`, `D_x`, `D_x_G` or `D_x_L`.
    pub fn config_id(&self) -> String {
        match self {
            FeatureSystem::Baseline { .. } => "baseline".into(),
            FeatureSystem::Fused(s) => fused_id(s.pair.lower, s.variant()),
        }
    }

    pub fn deepest_layer(&self) -> usize {
        match self {
            FeatureSystem::Baseline { layer } => *layer,
            FeatureSystem::Fused(s) => s.pair.upper,
        }
    }

    pub fn channels(&self) -> Option<usize> {
        match self {
            FeatureSystem::Baseline { .. } => None,
            FeatureSystem::Fused(s) => Some(s.params.channels),
        }
    }

    pub fn set_mode(&mut self, mode: BnMode) {
        if let FeatureSystem::Fused(s) = self {
            s.params.set_mode(mode);
        }
    }

    /// The layer tensors this system reads, restricted to `indices`.
    pub fn gather(&self, bank: &LayerBank, indices: &[usize]) -> Result<SystemInputs> {
        if self.deepest_layer() > bank.n_layers() {
            return Err(Error::Config(format!(
                "layer {} requested but the bank has {} layers",
                self.deepest_layer(),
                bank.n_layers()
            )));
        }
        match self {
            FeatureSystem::Baseline { layer } => Ok(SystemInputs {
                lower: None,
                upper: bank.layer(*layer)?.select_batch(indices)?,
            }),
            FeatureSystem::Fused(s) => Ok(SystemInputs {
                lower: Some(bank.layer(s.pair.lower)?.select_batch(indices)?),
                upper: bank.layer(s.pair.upper)?.select_batch(indices)?,
            }),
        }
    }

    /// Records the system on `tape`, returning the token-level features
    /// and, for fused systems, any training-mode batch statistics.
    pub fn record(
        &self,
        tape: &mut GradientTape,
        inputs: &SystemInputs,
    ) -> Result<(Var, Option<[[Option<BatchStats>; 2]; 2]>)> {
        let upper = tape.input(inputs.upper.clone());
        match (self, &inputs.lower) {
            (FeatureSystem::Baseline { .. }, None) => Ok((upper, None)),
            (FeatureSystem::Fused(s), Some(lower)) => {
                let lower = tape.input(lower.clone());
                let trace = record_dlfa(tape, lower, upper, &s.params, s.mode)?;
                Ok((trace.fused, Some(trace.aif.batch_stats)))
            }
            _ => Err(Error::Contract("inputs were gathered for a different system".into())),
        }
    }

    /// Token-level features in the current BN mode.
    pub fn features(&self, inputs: &SystemInputs) -> Result<FeatureTensor> {
        let mut tape = GradientTape::new();
        let (v, _) = self.record(&mut tape, inputs)?;
        Ok(tape.feature(v)?.clone())
    }
}

pub(crate) fn fused_id(lower: usize, variant: AifVariant) -> String {
    match variant {
        AifVariant::Full => format!("D_{lower}"),
        AifVariant::Global => format!("D_{lower}_G"),
        AifVariant::Local => format!("D_{lower}_L"),
    }
}

#[derive(Debug, Clone)]
pub struct SystemInputs {
    pub lower: Option<FeatureTensor>,
    pub upper: FeatureTensor,
}

/// Feature system plus classifier head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub system: FeatureSystem,
    pub head: ClassifierHead,
    #[serde(default)]
    pub flavor: TaskFlavor,
}

#[derive(Debug, Clone)]
pub struct ModelTrace {
    /// Token-level system output.
    pub features: Var,
    /// `(B, 1, K)` for sentence tasks, `(B, T, K)` for token tasks.
    pub logits: Var,
    pub batch_stats: Option<[[Option<BatchStats>; 2]; 2]>,
}

impl Model {
    pub fn new(system: FeatureSystem, head: ClassifierHead, flavor: TaskFlavor) -> Result<Self> {
        head.validate()?;
        if let Some(c) = system.channels() {
            if c != head.channels() {
                return Err(Error::Config(format!(
                    "system has {c} channels but the head expects {}",
                    head.channels()
                )));
            }
        }
        Ok(Model { system, head, flavor })
    }

    /// Checks that `bank` can feed this model.
    pub fn check_bank(&self, bank: &LayerBank) -> Result<()> {
        let s = bank.shape();
        if s.channels != self.head.channels() {
            return Err(Error::dimension("model", s, format!("{} channels", self.head.channels())));
        }
        if bank.num_classes() != self.head.classes() {
            return Err(Error::Data(format!(
                "bank has {} classes but the head predicts {}",
                bank.num_classes(),
                self.head.classes()
            )));
        }
        if bank.flavor() != self.flavor {
            return Err(Error::Data("bank and model disagree on sentence vs token labels".into()));
        }
        if self.system.deepest_layer() > bank.n_layers() {
            return Err(Error::Config(format!(
                "layer {} requested but the bank has {} layers",
                self.system.deepest_layer(),
                bank.n_layers()
            )));
        }
        Ok(())
    }

    pub fn set_mode(&mut self, mode: BnMode) {
        self.system.set_mode(mode);
    }

    pub fn apply_batch_stats(&mut self, stats: &[[Option<BatchStats>; 2]; 2]) {
        if let FeatureSystem::Fused(s) = &mut self.system {
            s.params.apply_batch_stats(stats);
        }
    }

    /// Records the whole model. Parameters are registered in
    /// [`Parameterized`] order: gate parameters, then `head.weight`, `head.bias`.
    pub fn record(&self, tape: &mut GradientTape, inputs: &SystemInputs) -> Result<ModelTrace> {
        let (features, batch_stats) = self.system.record(tape, inputs)?;
        let pooled = match self.flavor {
            TaskFlavor::Sentence => tape.mean_pool(features)?,
            TaskFlavor::Token => features,
        };
        let w = tape.param("head.weight", Value::Matrix(self.head.weight.clone()));
        let b = tape.param("head.bias", Value::Vector(self.head.bias.clone()));
        let logits = tape.conv1x1(pooled, w, b)?;
        Ok(ModelTrace {
            features,
            logits,
            batch_stats,
        })
    }

    /// Labels for `indices` in the layout the logits use.
    pub fn targets(&self, bank: &LayerBank, indices: &[usize]) -> Result<Vec<usize>> {
        match self.flavor {
            TaskFlavor::Sentence => Ok(bank.labels(indices)),
            TaskFlavor::Token => bank.token_labels(indices),
        }
    }

    /// Mean cross-entropy on `indices` with BN in `mode`. Never touches the
    /// running statistics.
    pub fn loss(&self, bank: &LayerBank, indices: &[usize], mode: BnMode) -> Result<f64> {
        let mut m = self.clone();
        m.set_mode(mode);
        let inputs = m.system.gather(bank, indices)?;
        let mut tape = GradientTape::new();
        let trace = m.record(&mut tape, &inputs)?;
        let loss = tape.cross_entropy(trace.logits, &m.targets(bank, indices)?)?;
        tape.value(loss)
            .as_scalar()
            .ok_or_else(|| Error::Contract("loss is not a scalar".into()))
    }

    /// Logits in the current BN mode.
    pub fn logits(&self, inputs: &SystemInputs) -> Result<FeatureTensor> {
        let mut tape = GradientTape::new();
        let trace = self.record(&mut tape, inputs)?;
        Ok(tape.feature(trace.logits)?.clone())
    }
}

impl Parameterized for Model {
    fn parameters(&self) -> Vec<(String, &[f64])> {
        let mut out = match &self.system {
            FeatureSystem::Fused(s) => s.params.parameters(),
            FeatureSystem::Baseline { .. } => Vec::new(),
        };
        out.push(("head.weight".into(), &self.head.weight.data));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    fn parameters_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = match &mut self.system {
            FeatureSystem::Fused(s) => s.params.parameters_mut(),
            FeatureSystem::Baseline { .. } => Vec::new(),
        };
        out.push(("head.weight".into(), &mut self.head.weight.data));
        out.push(("head.bias".into(), &mut self.head.bias));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bankio::{BankManifest, SentenceMeta, Split};
    use crate::tensor::Shape;

    fn bank() -> LayerBank {
        let shape = Shape::new(4, 3, 8);
        let layers = (0..2)
            .map(|l| FeatureTensor::from_fn(shape, |b, t, e| ((l + b * 5 + t * 3 + e) % 7) as f64 - 3.0).unwrap())
            .collect();
        let sentences = (0..4)
            .map(|i| SentenceMeta {
                label: i % 2,
                language: "en".into(),
                split: Split::Train,
                token_labels: None,
            })
            .collect();
        LayerBank::new(
            layers,
            BankManifest {
                num_classes: 2,
                flavor: TaskFlavor::Sentence,
                sentences,
            },
        )
        .unwrap()
    }

    #[test]
    fn registration_order_matches_parameter_order() {
        let sys = FeatureSystem::fused(LayerPair::new(1, 2).unwrap(), 8, 4, AifVariant::Full, GateMode::SigmoidOnly, 3)
            .unwrap();
        let model = Model::new(sys, ClassifierHead::init(8, 2, 3).unwrap(), TaskFlavor::Sentence).unwrap();
        let b = bank();
        let inputs = model.system.gather(&b, &[0, 1, 2]).unwrap();
        let mut tape = GradientTape::new();
        model.record(&mut tape, &inputs).unwrap();
        let tape_names: Vec<&str> = tape.params().iter().map(|(n, _)| n.as_str()).collect();
        let params = model.parameters();
        let names: Vec<&str> = params.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(tape_names, names);
        assert_eq!(names.len(), 18);
    }

    #[test]
    fn fused_with_last_layer_matches_baseline_features() {
        let b = bank();
        let base = FeatureSystem::baseline(2).unwrap();
        let fused =
            FeatureSystem::fused(LayerPair::new(2, 2).unwrap(), 8, 4, AifVariant::Full, GateMode::SigmoidOnly, 0).unwrap();
        let idx = [0, 1, 2, 3];
        assert_eq!(
            base.features(&base.gather(&b, &idx).unwrap()).unwrap(),
            fused.features(&fused.gather(&b, &idx).unwrap()).unwrap()
        );
        assert_eq!(fused.config_id(), "D_2");
        assert_eq!(base.config_id(), "baseline");
    }

    #[test]
    fn head_init_statistics_and_validation() {
        let h = ClassifierHead::init(400, 10, 1).unwrap();
        let n = h.weight.data.len() as f64;
        let var = h.weight.data.iter().map(|w| w * w).sum::<f64>() / n;
        assert!((var * 400.0 - 1.0).abs() < 0.1, "{var}");
        assert!(h.bias.iter().all(|&b| b == 0.0));
        assert!(ClassifierHead::init(4, 1, 0).is_err());
        let sys = FeatureSystem::fused(LayerPair::new(1, 2).unwrap(), 6, 4, AifVariant::Full, GateMode::SigmoidOnly, 0)
            .unwrap();
        assert!(Model::new(sys, ClassifierHead::init(8, 2, 0).unwrap(), TaskFlavor::Sentence).is_err());
    }

    #[test]
    fn too_deep_system_is_rejected() {
        let model = Model::new(
            FeatureSystem::baseline(3).unwrap(),
            ClassifierHead::init(8, 2, 0).unwrap(),
            TaskFlavor::Sentence,
        )
        .unwrap();
        assert!(matches!(model.check_bank(&bank()), Err(Error::Config(_))));
    }
}
