//! Attentional information fusion: a sigmoid gate built from two bottleneck
//! branches of 1×1 convolutions.
//!
//! Each branch is `BN(conv2(ReLU(BN(conv1(x)))))` with a `⌈E/r⌉`-wide
//! bottleneck. A *global* branch mean-pools tokens first and yields one
//! vector per sentence; a *local* branch keeps the token axis. The gate is
//! `sigmoid(branch_a ⊕ branch_b)`. The full module pairs one global with one
//! local branch; the ablations pair two independent branches of one kind.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcheck::Parameterized;
use crate::rng;
use crate::tape::{GradientTape, Value, Var};
use crate::tensor::{BatchNormState, BatchStats, BnMode, FeatureTensor, Matrix};

pub const DEFAULT_REDUCTION_RATIO: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchKind {
    Global,
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AifVariant {
    /// One global and one local branch.
    Full,
    /// Two independent global branches.
    Global,
    /// Two independent local branches.
    Local,
}

impl AifVariant {
    pub fn kinds(self) -> [BranchKind; 2] {
        match self {
            AifVariant::Full => [BranchKind::Global, BranchKind::Local],
            AifVariant::Global => [BranchKind::Global, BranchKind::Global],
            AifVariant::Local => [BranchKind::Local, BranchKind::Local],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AifVariant::Full => "full",
            AifVariant::Global => "global",
            AifVariant::Local => "local",
        }
    }
}

/// What the module hands downstream as its output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GateMode {
    /// The sigmoid gate itself, in (0, 1).
    #[serde(rename = "sigmoid")]
    SigmoidOnly,
    /// The input scaled by the gate, `w ⊙ sigmoid(…)`.
    #[serde(rename = "literal")]
    InputScaled,
}

impl GateMode {
    pub fn name(self) -> &'static str {
        match self {
            GateMode::SigmoidOnly => "sigmoid",
            GateMode::InputScaled => "literal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// He-normal kernels (`std = sqrt(2 / fan_in)`), zero biases.
    Kaiming,
    /// Kaiming first convolutions, all-zero second convolutions: every
    /// pre-sigmoid activation is 0, so the gate is exactly 0.5.
    ZeroGate,
}

/// A 1×1 convolution: `in × out` kernel plus bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointwiseConv {
    pub kernel: Matrix,
    pub bias: Vec<f64>,
}

impl PointwiseConv {
    fn kaiming(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
        PointwiseConv {
            kernel: Matrix {
                rows: fan_in,
                cols: fan_out,
                data,
            },
            bias: vec![0.0; fan_out],
        }
    }

    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        PointwiseConv {
            kernel: Matrix::zeros(fan_in, fan_out),
            bias: vec![0.0; fan_out],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub kind: BranchKind,
    pub conv1: PointwiseConv,
    pub bn1: BatchNormState,
    pub conv2: PointwiseConv,
    pub bn2: BatchNormState,
}

impl Branch {
    fn init(kind: BranchKind, channels: usize, inner: usize, scheme: InitScheme, rng: &mut impl Rng) -> Self {
        let conv1 = PointwiseConv::kaiming(channels, inner, rng);
        let conv2 = match scheme {
            InitScheme::Kaiming => PointwiseConv::kaiming(inner, channels, rng),
            InitScheme::ZeroGate => PointwiseConv::zeros(inner, channels),
        };
        Branch {
            kind,
            conv1,
            bn1: BatchNormState::new(inner),
            conv2,
            bn2: BatchNormState::new(channels),
        }
    }

    fn tensors(&self) -> [(&'static str, &[f64]); 8] {
        [
            ("conv1.kernel", &self.conv1.kernel.data),
            ("conv1.bias", &self.conv1.bias),
            ("bn1.gamma", &self.bn1.gamma),
            ("bn1.beta", &self.bn1.beta),
            ("conv2.kernel", &self.conv2.kernel.data),
            ("conv2.bias", &self.conv2.bias),
            ("bn2.gamma", &self.bn2.gamma),
            ("bn2.beta", &self.bn2.beta),
        ]
    }

    fn tensors_mut(&mut self) -> [(&'static str, &mut [f64]); 8] {
        [
            ("conv1.kernel", &mut self.conv1.kernel.data),
            ("conv1.bias", &mut self.conv1.bias),
            ("bn1.gamma", &mut self.bn1.gamma),
            ("bn1.beta", &mut self.bn1.beta),
            ("conv2.kernel", &mut self.conv2.kernel.data),
            ("conv2.bias", &mut self.conv2.bias),
            ("bn2.gamma", &mut self.bn2.gamma),
            ("bn2.beta", &mut self.bn2.beta),
        ]
    }

    fn validate(&self, channels: usize, inner: usize) -> Result<()> {
        let shapes_ok = self.conv1.kernel.rows == channels
            && self.conv1.kernel.cols == inner
            && self.conv1.bias.len() == inner
            && self.bn1.channels() == inner
            && self.conv2.kernel.rows == inner
            && self.conv2.kernel.cols == channels
            && self.conv2.bias.len() == channels
            && self.bn2.channels() == channels;
        if !shapes_ok {
            return Err(Error::Config(format!(
                "{:?} branch does not match {channels} channels with inner width {inner}",
                self.kind
            )));
        }
        self.bn1.validate()?;
        self.bn2.validate()
    }

    /// Records the branch on `tape`; returns its output and the batch
    /// statistics of both normalizations (training mode only).
    fn record(
        &self,
        tape: &mut GradientTape,
        input: Var,
        prefix: &str,
    ) -> Result<(Var, [Option<BatchStats>; 2])> {
        let p = |tape: &mut GradientTape, name: &str, value: Value| {
            tape.param(format!("{prefix}.{name}"), value)
        };
        let k1 = p(tape, "conv1.kernel", Value::Matrix(self.conv1.kernel.clone()));
        let b1 = p(tape, "conv1.bias", Value::Vector(self.conv1.bias.clone()));
        let g1 = p(tape, "bn1.gamma", Value::Vector(self.bn1.gamma.clone()));
        let be1 = p(tape, "bn1.beta", Value::Vector(self.bn1.beta.clone()));
        let k2 = p(tape, "conv2.kernel", Value::Matrix(self.conv2.kernel.clone()));
        let b2 = p(tape, "conv2.bias", Value::Vector(self.conv2.bias.clone()));
        let g2 = p(tape, "bn2.gamma", Value::Vector(self.bn2.gamma.clone()));
        let be2 = p(tape, "bn2.beta", Value::Vector(self.bn2.beta.clone()));

        let x = match self.kind {
            BranchKind::Global => tape.mean_pool(input)?,
            BranchKind::Local => input,
        };
        let h = tape.conv1x1(x, k1, b1)?;
        let (h, s1) = tape.batch_norm(h, g1, be1, &self.bn1)?;
        let h = tape.relu(h)?;
        let h = tape.conv1x1(h, k2, b2)?;
        let (h, s2) = tape.batch_norm(h, g2, be2, &self.bn2)?;
        Ok((h, [s1, s2]))
    }
}

/// Parameters of one fusion gate: two branches and the reduction ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AifParameters {
    pub channels: usize,
    pub reduction_ratio: usize,
    pub variant: AifVariant,
    pub branches: [Branch; 2],
}

/// Bottleneck width `⌈E / r⌉`, never below 1.
pub fn inner_width(channels: usize, reduction_ratio: usize) -> usize {
    channels.div_ceil(reduction_ratio).max(1)
}

/// What [`AifParameters::record`] leaves on the tape.
#[derive(Debug, Clone)]
pub struct AifTrace {
    /// Module output: the gate, or the input scaled by it, per [`GateMode`].
    pub output: Var,
    /// `sigmoid(branch_a ⊕ branch_b)`, expanded to the input's token count.
    pub gate: Var,
    pub pre_activation: Var,
    pub branch_outputs: [Var; 2],
    /// Training-mode batch statistics, indexed `[branch][norm]`.
    pub batch_stats: [[Option<BatchStats>; 2]; 2],
}

impl AifParameters {
    pub fn init(
        channels: usize,
        reduction_ratio: usize,
        variant: AifVariant,
        scheme: InitScheme,
        seed: u64,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config("channel count must be at least 1".into()));
        }
        if reduction_ratio == 0 {
            return Err(Error::Config("reduction ratio must be at least 1".into()));
        }
        let inner = inner_width(channels, reduction_ratio);
        let [ka, kb] = variant.kinds();
        let a = Branch::init(ka, channels, inner, scheme, &mut rng::stream(seed, "aif.branch0"));
        let b = Branch::init(kb, channels, inner, scheme, &mut rng::stream(seed, "aif.branch1"));
        Ok(AifParameters {
            channels,
            reduction_ratio,
            variant,
            branches: [a, b],
        })
    }

    pub fn inner_width(&self) -> usize {
        inner_width(self.channels, self.reduction_ratio)
    }

    pub fn validate(&self) -> Result<()> {
        if self.reduction_ratio == 0 || self.channels == 0 {
            return Err(Error::Config("channels and reduction ratio must be positive".into()));
        }
        let kinds = self.variant.kinds();
        for (branch, kind) in self.branches.iter().zip(kinds) {
            if branch.kind != kind {
                return Err(Error::Config(format!(
                    "{} variant expects a {:?} branch, found {:?}",
                    self.variant.name(),
                    kind,
                    branch.kind
                )));
            }
            branch.validate(self.channels, self.inner_width())?;
        }
        Ok(())
    }

    /// Parameter-name prefix for each branch.
    pub fn branch_labels(&self) -> [&'static str; 2] {
        match self.variant {
            AifVariant::Full => ["global", "local"],
            AifVariant::Global => ["global_a", "global_b"],
            AifVariant::Local => ["local_a", "local_b"],
        }
    }

    pub fn set_mode(&mut self, mode: BnMode) {
        for b in &mut self.branches {
            b.bn1.mode = mode;
            b.bn2.mode = mode;
        }
    }

    /// Folds training-mode batch statistics from a trace into the running estimates.
    pub fn apply_batch_stats(&mut self, stats: &[[Option<BatchStats>; 2]; 2]) {
        for (branch, s) in self.branches.iter_mut().zip(stats) {
            if let Some(s) = &s[0] {
                branch.bn1.update_running(s);
            }
            if let Some(s) = &s[1] {
                branch.bn2.update_running(s);
            }
        }
    }

    /// Records the gate computation on `tape`. Parameters are registered as
    /// `aif.<branch>.<tensor>` in [`Parameterized`] order.
    pub fn record(&self, tape: &mut GradientTape, input: Var, mode: GateMode) -> Result<AifTrace> {
        let shape = tape.feature(input)?.shape();
        if shape.channels != self.channels {
            return Err(Error::dimension(
                "aif",
                shape,
                format!("parameters for {} channels", self.channels),
            ));
        }
        let labels = self.branch_labels();
        let (a, sa) = self.branches[0].record(tape, input, &format!("aif.{}", labels[0]))?;
        let (b, sb) = self.branches[1].record(tape, input, &format!("aif.{}", labels[1]))?;
        let pre = tape.add(a, b)?;
        let mut gate = tape.sigmoid(pre)?;
        if tape.feature(gate)?.shape().tokens != shape.tokens {
            gate = tape.expand_tokens(gate, shape.tokens)?;
        }
        let output = match mode {
            GateMode::SigmoidOnly => gate,
            GateMode::InputScaled => tape.mul(input, gate)?,
        };
        Ok(AifTrace {
            output,
            gate,
            pre_activation: pre,
            branch_outputs: [a, b],
            batch_stats: [sa, sb],
        })
    }

    /// Output of the first branch of `kind`, evaluated on its own.
    pub fn branch_output(&self, w: &FeatureTensor, kind: BranchKind) -> Result<FeatureTensor> {
        let branch = self
            .branches
            .iter()
            .find(|b| b.kind == kind)
            .ok_or_else(|| Error::Config(format!("{} variant has no {kind:?} branch", self.variant.name())))?;
        if w.shape().channels != self.channels {
            return Err(Error::dimension("aif", w.shape(), format!("{} channels", self.channels)));
        }
        let mut tape = GradientTape::new();
        let x = tape.input(w.clone());
        let (out, _) = branch.record(&mut tape, x, "branch")?;
        Ok(tape.feature(out)?.clone())
    }

    /// Forward pass for any variant: `(output, gate)`.
    ///
    /// Normalizations in training mode use the batch statistics but leave the
    /// running estimates untouched; training loops fold them in explicitly.
    pub fn forward(&self, w: &FeatureTensor, mode: GateMode) -> Result<(FeatureTensor, FeatureTensor)> {
        let mut tape = GradientTape::new();
        let x = tape.input(w.clone());
        let trace = self.record(&mut tape, x, mode)?;
        Ok((tape.feature(trace.output)?.clone(), tape.feature(trace.gate)?.clone()))
    }

    fn expect_variant(&self, variant: AifVariant) -> Result<()> {
        if self.variant != variant {
            return Err(Error::Config(format!(
                "parameters are for the {} variant, not {}",
                self.variant.name(),
                variant.name()
            )));
        }
        Ok(())
    }
}

impl Parameterized for AifParameters {
    fn parameters(&self) -> Vec<(String, &[f64])> {
        let labels = self.branch_labels();
        self.branches
            .iter()
            .zip(labels)
            .flat_map(|(b, label)| {
                b.tensors()
                    .into_iter()
                    .map(move |(n, t)| (format!("aif.{label}.{n}"), t))
            })
            .collect()
    }

    fn parameters_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let labels = self.branch_labels();
        self.branches
            .iter_mut()
            .zip(labels)
            .flat_map(|(b, label)| {
                b.tensors_mut()
                    .into_iter()
                    .map(move |(n, t)| (format!("aif.{label}.{n}"), t))
            })
            .collect()
    }
}

pub fn init_aif(channels: usize, reduction_ratio: usize, scheme: InitScheme, seed: u64) -> Result<AifParameters> {
    AifParameters::init(channels, reduction_ratio, AifVariant::Full, scheme, seed)
}

/// Global branch output, shape `(B, 1, E)`.
pub fn aif_global_branch(w: &FeatureTensor, p: &AifParameters) -> Result<FeatureTensor> {
    p.branch_output(w, BranchKind::Global)
}

/// Local branch output, shape `(B, T, E)`.
pub fn aif_local_branch(w: &FeatureTensor, p: &AifParameters) -> Result<FeatureTensor> {
    p.branch_output(w, BranchKind::Local)
}

/// Full module: gate from one global and one local branch. Returns `(output, gate)`.
pub fn aif_forward(w: &FeatureTensor, p: &AifParameters, mode: GateMode) -> Result<(FeatureTensor, FeatureTensor)> {
    p.expect_variant(AifVariant::Full)?;
    p.forward(w, mode)
}

/// Ablation with the local branch replaced by a second global branch.
pub fn aif_global_only(w: &FeatureTensor, p: &AifParameters, mode: GateMode) -> Result<(FeatureTensor, FeatureTensor)> {
    p.expect_variant(AifVariant::Global)?;
    p.forward(w, mode)
}

/// Ablation with the global branch replaced by a second local branch.
pub fn aif_local_only(w: &FeatureTensor, p: &AifParameters, mode: GateMode) -> Result<(FeatureTensor, FeatureTensor)> {
    p.expect_variant(AifVariant::Local)?;
    p.forward(w, mode)
}
