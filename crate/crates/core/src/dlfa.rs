//! Double-layer feature aggregation: fuse a lower encoder layer with the top
//! layer through a gate computed on their average.
//!
//! `m = (l1 ⊕ l2) / 2`, `g = AIF(m)`, `fused = l1 ⊙ g + l2 ⊙ (1 − g)`.

use serde::{Deserialize, Serialize};

use crate::aif::{AifParameters, AifTrace, AifVariant, GateMode, InitScheme, DEFAULT_REDUCTION_RATIO};
use crate::error::{Error, Result};
use crate::tape::{GradientTape, Var};
use crate::tensor::FeatureTensor;

/// Which two layers are fused: `lower` (the `x` in `D_x`) and `upper`,
/// normally the encoder's last layer. Indices are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerPair {
    pub lower: usize,
    pub upper: usize,
}

impl LayerPair {
    pub fn new(lower: usize, upper: usize) -> Result<Self> {
        if lower < 1 || lower > upper {
            return Err(Error::Config(format!(
                "layer pair needs 1 <= lower <= upper, got lower={lower} upper={upper}"
            )));
        }
        Ok(LayerPair { lower, upper })
    }

    /// Pairs `lower` with the last of `n_layers` layers.
    pub fn with_last(lower: usize, n_layers: usize) -> Result<Self> {
        Self::new(lower, n_layers)
    }

    pub fn check_depth(&self, n_layers: usize) -> Result<()> {
        if self.upper > n_layers {
            return Err(Error::Config(format!(
                "layer {} requested but the bank has {n_layers} layers",
                self.upper
            )));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.lower == self.upper
    }
}

#[derive(Debug, Clone)]
pub struct DlfaTrace {
    pub fused: Var,
    /// Mixing coefficient applied to the lower layer.
    pub mix: Var,
    pub aif: AifTrace,
}

/// Records the fusion on `tape`.
pub fn record_dlfa(
    tape: &mut GradientTape,
    lower: Var,
    upper: Var,
    params: &AifParameters,
    mode: GateMode,
) -> Result<DlfaTrace> {
    let (sl, su) = (tape.feature(lower)?.shape(), tape.feature(upper)?.shape());
    if sl != su {
        return Err(Error::dimension("dlfa", sl, su));
    }
    let sum = tape.add(lower, upper)?;
    let mean = tape.scale(sum, 0.5)?;
    let aif = params.record(tape, mean, mode)?;
    let fused = tape.convex_mix(lower, upper, aif.output)?;
    Ok(DlfaTrace {
        fused,
        mix: aif.output,
        aif,
    })
}

/// Returns `(fused, g)` where `g` is the coefficient applied to `l1`: the
/// sigmoid gate in [`GateMode::SigmoidOnly`], or `m ⊙ gate` in
/// [`GateMode::InputScaled`].
pub fn dlfa_forward(
    l1: &FeatureTensor,
    l2: &FeatureTensor,
    params: &AifParameters,
    mode: GateMode,
) -> Result<(FeatureTensor, FeatureTensor)> {
    let mut tape = GradientTape::new();
    let a = tape.input(l1.clone());
    let b = tape.input(l2.clone());
    let trace = record_dlfa(&mut tape, a, b, params, mode)?;
    Ok((tape.feature(trace.fused)?.clone(), tape.feature(trace.mix)?.clone()))
}

/// A fusion module bound to a layer pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DlfaSystem {
    pub pair: LayerPair,
    pub mode: GateMode,
    pub params: AifParameters,
}

impl DlfaSystem {
    pub fn new(pair: LayerPair, mode: GateMode, params: AifParameters) -> Result<Self> {
        params.validate()?;
        Ok(DlfaSystem { pair, mode, params })
    }

    pub fn variant(&self) -> AifVariant {
        self.params.variant
    }

    pub fn forward(&self, lower: &FeatureTensor, upper: &FeatureTensor) -> Result<(FeatureTensor, FeatureTensor)> {
        dlfa_forward(lower, upper, &self.params, self.mode)
    }
}

/// Kaiming-initialized system with the default reduction ratio.
pub fn build_dlfa_system(
    pair: LayerPair,
    channels: usize,
    variant: AifVariant,
    mode: GateMode,
    seed: u64,
) -> Result<DlfaSystem> {
    let params = AifParameters::init(channels, DEFAULT_REDUCTION_RATIO, variant, InitScheme::Kaiming, seed)?;
    DlfaSystem::new(pair, mode, params)
}
