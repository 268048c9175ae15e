//! Dense rank-3 feature tensors and the primitive operations the fusion
//! modules are built from.
//!
//! A [`FeatureTensor`] has shape `batch × tokens × channels` and is stored
//! row-major as `[b][t][e]`. Every operation here is a pure forward kernel;
//! the matching reverse-mode rules live in [`crate::tape`].

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::exact_mean;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub batch: usize,
    pub tokens: usize,
    pub channels: usize,
}

impl Shape {
    pub const fn new(batch: usize, tokens: usize, channels: usize) -> Self {
        Shape {
            batch,
            tokens,
            channels,
        }
    }

    pub const fn len(&self) -> usize {
        self.batch * self.tokens * self.channels
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of (batch, token) positions.
    pub const fn positions(&self) -> usize {
        self.batch * self.tokens
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}×{}×{})", self.batch, self.tokens, self.channels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTensor {
    shape: Shape,
    data: Vec<f64>,
}

impl FeatureTensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.batch == 0 || shape.tokens == 0 || shape.channels == 0 {
            return Err(Error::InvalidTensor(format!(
                "every dimension must be at least 1, got {shape}"
            )));
        }
        if data.len() != shape.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(FeatureTensor { shape, data })
    }

    pub fn full(shape: Shape, value: f64) -> Result<Self> {
        Self::new(shape, vec![value; shape.len()])
    }

    pub fn zeros(shape: Shape) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(shape.len());
        for b in 0..shape.batch {
            for t in 0..shape.tokens {
                for e in 0..shape.channels {
                    data.push(f(b, t, e));
                }
            }
        }
        Self::new(shape, data)
    }

    /// Builds a tensor from nested `[b][t][e]` vectors.
    pub fn from_nested(values: &[Vec<Vec<f64>>]) -> Result<Self> {
        let batch = values.len();
        let tokens = values.first().map_or(0, Vec::len);
        let channels = values
            .first()
            .and_then(|b| b.first())
            .map_or(0, Vec::len);
        let shape = Shape::new(batch, tokens, channels);
        let mut data = Vec::with_capacity(shape.len());
        for row in values {
            if row.len() != tokens {
                return Err(Error::InvalidTensor("ragged token dimension".into()));
            }
            for tok in row {
                if tok.len() != channels {
                    return Err(Error::InvalidTensor("ragged channel dimension".into()));
                }
                data.extend_from_slice(tok);
            }
        }
        Self::new(shape, data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, b: usize, t: usize, e: usize) -> usize {
        (b * self.shape.tokens + t) * self.shape.channels + e
    }

    #[inline]
    pub fn get(&self, b: usize, t: usize, e: usize) -> f64 {
        self.data[self.index(b, t, e)]
    }

    /// Channel vector at one (batch, token) position.
    #[inline]
    pub fn row(&self, b: usize, t: usize) -> &[f64] {
        let start = (b * self.shape.tokens + t) * self.shape.channels;
        &self.data[start..start + self.shape.channels]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        FeatureTensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Rows `indices` of the batch dimension, in order.
    pub fn select_batch(&self, indices: &[usize]) -> Result<Self> {
        let per = self.shape.tokens * self.shape.channels;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            if i >= self.shape.batch {
                return Err(Error::Data(format!(
                    "batch index {i} out of range for shape {}",
                    self.shape
                )));
            }
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        Self::new(
            Shape::new(indices.len(), self.shape.tokens, self.shape.channels),
            data,
        )
    }
}

/// Dense row-major matrix, used for 1×1 convolution kernels (`in × out`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidTensor(format!(
                "matrix {rows}×{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    Training,
    Evaluation,
}

/// Per-channel batch normalization parameters and running statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub epsilon: f64,
    pub momentum: f64,
    pub mode: BnMode,
}

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
            mode: BnMode::Evaluation,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.gamma.len();
        if self.beta.len() != n || self.running_mean.len() != n || self.running_var.len() != n {
            return Err(Error::InvalidTensor(
                "batch norm gamma, beta and running statistics differ in length".into(),
            ));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidTensor("batch norm epsilon must be positive".into()));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::InvalidTensor("batch norm momentum must lie in (0, 1)".into()));
        }
        if self.running_var.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::InvalidTensor("negative running variance".into()));
        }
        Ok(())
    }

    /// Folds one batch's statistics into the running estimates.
    ///
    /// `var` is the population variance used for normalization; the running
    /// estimate stores the unbiased variance.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let n = stats.count as f64;
        let correction = if stats.count > 1 { n / (n - 1.0) } else { 1.0 };
        let m = self.momentum;
        for c in 0..self.channels() {
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * stats.mean[c];
            self.running_var[c] = (1.0 - m) * self.running_var[c] + m * stats.var[c] * correction;
        }
    }
}

/// Per-channel statistics of one batch: mean and population variance over
/// all `batch × tokens` positions.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

pub fn batch_stats(w: &FeatureTensor) -> BatchStats {
    let s = w.shape();
    let n = s.positions();
    let mut mean = vec![0.0; s.channels];
    for row in w.data.chunks_exact(s.channels) {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0; s.channels];
    for row in w.data.chunks_exact(s.channels) {
        for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
            let d = x - m;
            *v += d * d;
        }
    }
    for v in &mut var {
        *v /= n as f64;
    }
    BatchStats {
        mean,
        var,
        count: n,
    }
}

fn broadcast_shape(op: &'static str, a: Shape, b: Shape) -> Result<Shape> {
    let tokens_ok = a.tokens == b.tokens || a.tokens == 1 || b.tokens == 1;
    if a.batch != b.batch || a.channels != b.channels || !tokens_ok {
        return Err(Error::dimension(op, a, b));
    }
    Ok(Shape::new(a.batch, a.tokens.max(b.tokens), a.channels))
}

fn broadcast_zip(
    op: &'static str,
    a: &FeatureTensor,
    b: &FeatureTensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<FeatureTensor> {
    let out = broadcast_shape(op, a.shape, b.shape)?;
    let mut data = Vec::with_capacity(out.len());
    for bi in 0..out.batch {
        for t in 0..out.tokens {
            let ra = a.row(bi, if a.shape.tokens == 1 { 0 } else { t });
            let rb = b.row(bi, if b.shape.tokens == 1 { 0 } else { t });
            data.extend(ra.iter().zip(rb).map(|(&x, &y)| f(x, y)));
        }
    }
    Ok(FeatureTensor { shape: out, data })
}

/// `a ⊕ b`: elementwise sum, replicating a single-token operand across tokens.
pub fn broadcast_add(a: &FeatureTensor, b: &FeatureTensor) -> Result<FeatureTensor> {
    broadcast_zip("broadcast_add", a, b, |x, y| x + y)
}

/// `a ⊙ b`: Hadamard product with the same token broadcasting as [`broadcast_add`].
pub fn elementwise_mul(a: &FeatureTensor, b: &FeatureTensor) -> Result<FeatureTensor> {
    broadcast_zip("elementwise_mul", a, b, |x, y| x * y)
}

pub fn sub(a: &FeatureTensor, b: &FeatureTensor) -> Result<FeatureTensor> {
    if a.shape != b.shape {
        return Err(Error::dimension("sub", a.shape, b.shape));
    }
    broadcast_zip("sub", a, b, |x, y| x - y)
}

pub fn scale(a: &FeatureTensor, factor: f64) -> FeatureTensor {
    a.map(|x| x * factor)
}

/// Average over the token axis; output shape `(B, 1, E)`.
///
/// Each entry is the double nearest the exact mean, so the result is
/// bit-identical under any permutation or repetition of the token set.
pub fn mean_pool_tokens(w: &FeatureTensor) -> FeatureTensor {
    let s = w.shape;
    let mut data = Vec::with_capacity(s.batch * s.channels);
    for b in 0..s.batch {
        for e in 0..s.channels {
            data.push(exact_mean((0..s.tokens).map(|t| w.get(b, t, e))));
        }
    }
    FeatureTensor {
        shape: Shape::new(s.batch, 1, s.channels),
        data,
    }
}

/// 1×1 convolution: the per-token affine map `x · kernel + bias`.
pub fn conv1x1(w: &FeatureTensor, kernel: &Matrix, bias: &[f64]) -> Result<FeatureTensor> {
    let s = w.shape;
    if kernel.rows != s.channels {
        return Err(Error::dimension(
            "conv1x1",
            s,
            format!("kernel {}×{}", kernel.rows, kernel.cols),
        ));
    }
    if bias.len() != kernel.cols {
        return Err(Error::dimension(
            "conv1x1",
            format!("kernel {}×{}", kernel.rows, kernel.cols),
            format!("bias of length {}", bias.len()),
        ));
    }
    let out_c = kernel.cols;
    let mut data = Vec::with_capacity(s.positions() * out_c);
    for x in w.data.chunks_exact(s.channels) {
        let start = data.len();
        data.extend_from_slice(bias);
        let out = &mut data[start..];
        for (i, &xi) in x.iter().enumerate() {
            let krow = &kernel.data[i * out_c..(i + 1) * out_c];
            for (o, k) in out.iter_mut().zip(krow) {
                *o += xi * k;
            }
        }
    }
    Ok(FeatureTensor {
        shape: Shape::new(s.batch, s.tokens, out_c),
        data,
    })
}

/// `gamma · (x − mean) / sqrt(var + eps) + beta` with the given per-channel statistics.
pub fn normalize(
    w: &FeatureTensor,
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    epsilon: f64,
) -> Result<FeatureTensor> {
    let c = w.shape.channels;
    if gamma.len() != c || beta.len() != c || mean.len() != c || var.len() != c {
        return Err(Error::dimension(
            "batch_norm",
            w.shape,
            format!("{} channels", gamma.len()),
        ));
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
    let mut data = Vec::with_capacity(w.data.len());
    for row in w.data.chunks_exact(c) {
        for e in 0..c {
            data.push(gamma[e] * (row[e] - mean[e]) * inv_std[e] + beta[e]);
        }
    }
    Ok(FeatureTensor {
        shape: w.shape,
        data,
    })
}

pub(crate) fn check_bn_input(w: &FeatureTensor, state: &BatchNormState) -> Result<()> {
    if state.channels() != w.shape.channels {
        return Err(Error::dimension(
            "batch_norm",
            w.shape,
            format!("state with {} channels", state.channels()),
        ));
    }
    if state.mode == BnMode::Training && w.shape.positions() == 1 {
        return Err(Error::DegenerateBatch(w.shape));
    }
    Ok(())
}

/// Batch normalization over all `(b, t)` positions per channel.
///
/// Training mode normalizes with the batch statistics and folds them into the
/// running estimates; evaluation mode uses the running estimates unchanged.
pub fn batch_norm(w: &FeatureTensor, state: &mut BatchNormState) -> Result<FeatureTensor> {
    check_bn_input(w, state)?;
    match state.mode {
        BnMode::Training => {
            let stats = batch_stats(w);
            let out = normalize(w, &state.gamma, &state.beta, &stats.mean, &stats.var, state.epsilon)?;
            state.update_running(&stats);
            Ok(out)
        }
        BnMode::Evaluation => normalize(
            w,
            &state.gamma,
            &state.beta,
            &state.running_mean,
            &state.running_var,
            state.epsilon,
        ),
    }
}

pub fn relu(w: &FeatureTensor) -> FeatureTensor {
    w.map(|x| if x > 0.0 { x } else { 0.0 })
}

/// Logistic function, kept strictly inside (0, 1): saturated inputs return
/// the nearest representable value to the bound instead of the bound itself.
#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let z = x.exp();
        z / (1.0 + z)
    };
    s.clamp(f64::MIN_POSITIVE, SIGMOID_CEILING)
}

const SIGMOID_CEILING: f64 = 1.0 - f64::EPSILON / 2.0;

pub fn sigmoid(w: &FeatureTensor) -> FeatureTensor {
    w.map(sigmoid_scalar)
}

/// `lower ⊙ gate + upper ⊙ (1 − gate)`.
///
/// Where `gate ∈ [0, 1]` the result is clamped to the interval spanned by
/// `lower` and `upper`; where `lower == upper` it is `upper`, bit-exactly.
pub fn convex_mix(
    lower: &FeatureTensor,
    upper: &FeatureTensor,
    gate: &FeatureTensor,
) -> Result<FeatureTensor> {
    if lower.shape != upper.shape {
        return Err(Error::dimension("convex_mix", lower.shape, upper.shape));
    }
    if gate.shape != lower.shape {
        return Err(Error::dimension("convex_mix", lower.shape, gate.shape));
    }
    let data = lower
        .data
        .iter()
        .zip(&upper.data)
        .zip(&gate.data)
        .map(|((&l, &u), &g)| mix_scalar(l, u, g))
        .collect();
    Ok(FeatureTensor {
        shape: lower.shape,
        data,
    })
}

#[inline]
fn mix_scalar(lower: f64, upper: f64, gate: f64) -> f64 {
    if lower == upper {
        return upper;
    }
    let v = lower * gate + upper * (1.0 - gate);
    if (0.0..=1.0).contains(&gate) {
        v.clamp(lower.min(upper), lower.max(upper))
    } else {
        v
    }
}
