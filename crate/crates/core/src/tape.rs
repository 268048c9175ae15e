//! Reverse-mode differentiation over the tensor primitives.
//!
//! A [`GradientTape`] records each operation together with the values the
//! backward rule needs. Nodes are appended in evaluation order, so replaying
//! them from the root down to index zero visits every operation in reverse
//! topological order. Gradients are accumulated additively, which handles a
//! value that feeds several downstream operations.

use crate::error::{Error, Result};
use crate::tensor::{
    self, batch_stats, check_bn_input, BatchNormState, BatchStats, BnMode, FeatureTensor, Matrix,
    Shape,
};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Scalar(f64),
    Vector(Vec<f64>),
    Matrix(Matrix),
    Feature(FeatureTensor),
}

impl Value {
    pub fn as_slice(&self) -> &[f64] {
        match self {
            Value::Scalar(x) => std::slice::from_ref(x),
            Value::Vector(v) => v,
            Value::Matrix(m) => &m.data,
            Value::Feature(f) => f.data(),
        }
    }

    fn as_mut_slice(&mut self) -> &mut [f64] {
        match self {
            Value::Scalar(x) => std::slice::from_mut(x),
            Value::Vector(v) => v,
            Value::Matrix(m) => &mut m.data,
            Value::Feature(f) => f.data_mut(),
        }
    }

    pub fn zeros_like(&self) -> Value {
        let mut z = self.clone();
        z.as_mut_slice().fill(0.0);
        z
    }

    pub fn as_feature(&self) -> Option<&FeatureTensor> {
        match self {
            Value::Feature(f) => Some(f),
            _ => None,
        }
    }

    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            Value::Scalar(x) => Some(*x),
            _ => None,
        }
    }

    fn accumulate(&mut self, other: &Value) {
        for (a, b) in self.as_mut_slice().iter_mut().zip(other.as_slice()) {
            *a += b;
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ExpandTokens(Var),
    MeanPool(Var),
    Conv1x1 {
        input: Var,
        kernel: Var,
        bias: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: FeatureTensor,
        inv_std: Vec<f64>,
        batch_statistics: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    ConvexMix {
        lower: Var,
        upper: Var,
        gate: Var,
    },
    Sum(Var),
    WeightedSum(Var, Vec<f64>),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Value,
}

#[derive(Debug, Default)]
pub struct GradientTape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

/// Gradients produced by [`GradientTape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Value>>,
}

impl Gradients {
    /// Gradient of `var`, or `None` when the root does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Value> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var` flattened row-major, zero-filled when unreachable.
    pub fn flat(&self, tape: &GradientTape, var: Var) -> Vec<f64> {
        match self.get(var) {
            Some(g) => g.as_slice().to_vec(),
            None => vec![0.0; tape.value(var).as_slice().len()],
        }
    }

    pub fn feature(&self, var: Var) -> Option<&FeatureTensor> {
        self.get(var).and_then(Value::as_feature)
    }

    /// Gradients of every registered parameter, in registration order.
    pub fn named(&self, tape: &GradientTape) -> Vec<(String, Vec<f64>)> {
        tape.params
            .iter()
            .map(|(name, var)| (name.clone(), self.flat(tape, *var)))
            .collect()
    }
}

fn reduce_tokens(grad: FeatureTensor, target: Shape) -> FeatureTensor {
    let s = grad.shape();
    if target.tokens == s.tokens {
        return grad;
    }
    let mut out = FeatureTensor::zeros(target).expect("valid target shape");
    let data = out.data_mut();
    for b in 0..s.batch {
        for t in 0..s.tokens {
            let row = grad.row(b, t);
            for (o, g) in data[b * s.channels..(b + 1) * s.channels].iter_mut().zip(row) {
                *o += g;
            }
        }
    }
    out
}

impl GradientTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Value) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that is not tracked as a parameter (data, labels, constants).
    pub fn constant(&mut self, value: Value) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn input(&mut self, x: FeatureTensor) -> Var {
        self.constant(Value::Feature(x))
    }

    /// A trainable leaf registered under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Value) -> Var {
        let v = self.push(Op::Leaf, value);
        self.params.push((name.into(), v));
        v
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn value(&self, var: Var) -> &Value {
        &self.nodes[var.0].value
    }

    pub fn feature(&self, var: Var) -> Result<&FeatureTensor> {
        self.value(var)
            .as_feature()
            .ok_or_else(|| Error::Contract(format!("node {} is not a feature tensor", var.0)))
    }

    fn vector(&self, var: Var) -> Result<&[f64]> {
        match self.value(var) {
            Value::Vector(v) => Ok(v),
            _ => Err(Error::Contract(format!("node {} is not a vector", var.0))),
        }
    }

    fn matrix(&self, var: Var) -> Result<&Matrix> {
        match self.value(var) {
            Value::Matrix(m) => Ok(m),
            _ => Err(Error::Contract(format!("node {} is not a matrix", var.0))),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::broadcast_add(self.feature(a)?, self.feature(b)?)?;
        Ok(self.push(Op::Add(a, b), Value::Feature(v)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::sub(self.feature(a)?, self.feature(b)?)?;
        Ok(self.push(Op::Sub(a, b), Value::Feature(v)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::elementwise_mul(self.feature(a)?, self.feature(b)?)?;
        Ok(self.push(Op::Mul(a, b), Value::Feature(v)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let v = tensor::scale(self.feature(a)?, factor);
        Ok(self.push(Op::Scale(a, factor), Value::Feature(v)))
    }

    /// Replicates a single-token tensor across `tokens` positions.
    pub fn expand_tokens(&mut self, a: Var, tokens: usize) -> Result<Var> {
        let x = self.feature(a)?;
        let s = x.shape();
        if s.tokens != 1 || tokens == 0 {
            return Err(Error::dimension("expand_tokens", s, format!("{tokens} tokens")));
        }
        let v = FeatureTensor::from_fn(Shape::new(s.batch, tokens, s.channels), |b, _, e| {
            x.get(b, 0, e)
        })?;
        Ok(self.push(Op::ExpandTokens(a), Value::Feature(v)))
    }

    pub fn mean_pool(&mut self, a: Var) -> Result<Var> {
        let v = tensor::mean_pool_tokens(self.feature(a)?);
        Ok(self.push(Op::MeanPool(a), Value::Feature(v)))
    }

    pub fn conv1x1(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let v = tensor::conv1x1(self.feature(input)?, self.matrix(kernel)?, self.vector(bias)?)?;
        Ok(self.push(Op::Conv1x1 { input, kernel, bias }, Value::Feature(v)))
    }

    /// Batch normalization with `gamma`/`beta` read from the tape and the
    /// mode, epsilon and running statistics taken from `state`.
    ///
    /// In training mode the batch statistics are returned so the caller can
    /// fold them into the running estimates; the tape never mutates `state`.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &BatchNormState,
    ) -> Result<(Var, Option<BatchStats>)> {
        let x = self.feature(input)?;
        check_bn_input(x, state)?;
        let g = self.vector(gamma)?;
        let bt = self.vector(beta)?;
        if g.len() != x.shape().channels || bt.len() != x.shape().channels {
            return Err(Error::dimension(
                "batch_norm",
                x.shape(),
                format!("{} affine channels", g.len()),
            ));
        }
        let (mean, var, stats) = match state.mode {
            BnMode::Training => {
                let s = batch_stats(x);
                (s.mean.clone(), s.var.clone(), Some(s))
            }
            BnMode::Evaluation => (state.running_mean.clone(), state.running_var.clone(), None),
        };
        let xhat = tensor::normalize(
            x,
            &vec![1.0; mean.len()],
            &vec![0.0; mean.len()],
            &mean,
            &var,
            state.epsilon,
        )?;
        let out = tensor::normalize(x, g, bt, &mean, &var, state.epsilon)?;
        let inv_std = var.iter().map(|v| 1.0 / (v + state.epsilon).sqrt()).collect();
        let var = self.push(
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_statistics: state.mode == BnMode::Training,
            },
            Value::Feature(out),
        );
        Ok((var, stats))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = tensor::relu(self.feature(a)?);
        Ok(self.push(Op::Relu(a), Value::Feature(v)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = tensor::sigmoid(self.feature(a)?);
        Ok(self.push(Op::Sigmoid(a), Value::Feature(v)))
    }

    /// `lower ⊙ gate + upper ⊙ (1 − gate)`; see [`tensor::convex_mix`].
    pub fn convex_mix(&mut self, lower: Var, upper: Var, gate: Var) -> Result<Var> {
        let v = tensor::convex_mix(self.feature(lower)?, self.feature(upper)?, self.feature(gate)?)?;
        Ok(self.push(Op::ConvexMix { lower, upper, gate }, Value::Feature(v)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.feature(a)?.data().iter().sum();
        Ok(self.push(Op::Sum(a), Value::Scalar(s)))
    }

    /// `Σ weights[i] · a[i]` over the flattened feature tensor.
    pub fn weighted_sum(&mut self, a: Var, weights: Vec<f64>) -> Result<Var> {
        let x = self.feature(a)?;
        if weights.len() != x.data().len() {
            return Err(Error::dimension(
                "weighted_sum",
                x.shape(),
                format!("{} weights", weights.len()),
            ));
        }
        let s = x.data().iter().zip(&weights).map(|(a, w)| a * w).sum();
        Ok(self.push(Op::WeightedSum(a, weights), Value::Scalar(s)))
    }

    /// Mean softmax cross-entropy. Every `(b, t)` position of `logits` is one
    /// sample over its channel axis; `labels` has one class per position.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.feature(logits)?;
        let s = x.shape();
        if labels.len() != s.positions() {
            return Err(Error::Data(format!(
                "{} labels for {} logit rows",
                labels.len(),
                s.positions()
            )));
        }
        let k = s.channels;
        let mut probs = Vec::with_capacity(x.data().len());
        let mut total = 0.0;
        for (row, &label) in x.data().chunks_exact(k).zip(labels) {
            if label >= k {
                return Err(Error::Data(format!("label {label} out of range for {k} classes")));
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = z.ln() + max;
            total += log_z - row[label];
            probs.extend(row.iter().map(|v| (v - log_z).exp()));
        }
        let loss = total / s.positions() as f64;
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Value::Scalar(loss),
        ))
    }

    /// Sign pattern (`input > 0`) of every ReLU input on the tape, in
    /// recording order. Two evaluations with equal patterns lie on the same
    /// linear piece of every ReLU.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                out.extend(self.nodes[a.0].value.as_slice().iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    /// Reverse pass from a scalar `root`, seeded with `d root = seed`.
    pub fn backward(&self, root: Var, seed: f64) -> Result<Gradients> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Contract(format!("node {} is not on this tape", root.0)));
        }
        if !matches!(self.nodes[root.0].value, Value::Scalar(_)) {
            return Err(Error::Contract(
                "backward needs a scalar-valued root".into(),
            ));
        }
        let mut grads: Vec<Option<Value>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Value::Scalar(seed));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            for (target, contribution) in self.node_backward(node, &g)? {
                match &mut grads[target.0] {
                    Some(acc) => acc.accumulate(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, node: &Node, grad: &Value) -> Result<Vec<(Var, Value)>> {
        let feature_grad = || {
            grad.as_feature()
                .cloned()
                .ok_or_else(|| Error::Contract("expected a feature gradient".into()))
        };
        let scalar_grad = || {
            grad.as_scalar()
                .ok_or_else(|| Error::Contract("expected a scalar gradient".into()))
        };
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => {
                let g = feature_grad()?;
                let sa = self.feature(*a)?.shape();
                let sb = self.feature(*b)?.shape();
                vec![
                    (*a, Value::Feature(reduce_tokens(g.clone(), sa))),
                    (*b, Value::Feature(reduce_tokens(g, sb))),
                ]
            }
            Op::Sub(a, b) => {
                let g = feature_grad()?;
                vec![(*b, Value::Feature(tensor::scale(&g, -1.0))), (*a, Value::Feature(g))]
            }
            Op::Mul(a, b) => {
                let g = feature_grad()?;
                let xa = self.feature(*a)?;
                let xb = self.feature(*b)?;
                let ga = reduce_tokens(tensor::elementwise_mul(&g, xb)?, xa.shape());
                let gb = reduce_tokens(tensor::elementwise_mul(&g, xa)?, xb.shape());
                vec![(*a, Value::Feature(ga)), (*b, Value::Feature(gb))]
            }
            Op::Scale(a, factor) => {
                vec![(*a, Value::Feature(tensor::scale(&feature_grad()?, *factor)))]
            }
            Op::ExpandTokens(a) => {
                let s = self.feature(*a)?.shape();
                vec![(*a, Value::Feature(reduce_tokens(feature_grad()?, s)))]
            }
            Op::MeanPool(a) => {
                let g = feature_grad()?;
                let s = self.feature(*a)?.shape();
                let inv = 1.0 / s.tokens as f64;
                let gi = FeatureTensor::from_fn(s, |b, _, e| g.get(b, 0, e) * inv)?;
                vec![(*a, Value::Feature(gi))]
            }
            Op::Conv1x1 {
                input,
                kernel,
                bias,
            } => {
                let g = feature_grad()?;
                let x = self.feature(*input)?;
                let k = self.matrix(*kernel)?;
                let (cin, cout) = (k.rows, k.cols);
                let mut gx = Vec::with_capacity(x.data().len());
                let mut gk = Matrix::zeros(cin, cout);
                let mut gb = vec![0.0; cout];
                for (xr, gr) in x.data().chunks_exact(cin).zip(g.data().chunks_exact(cout)) {
                    for (acc, gv) in gb.iter_mut().zip(gr) {
                        *acc += gv;
                    }
                    for i in 0..cin {
                        let krow = &k.data[i * cout..(i + 1) * cout];
                        gx.push(krow.iter().zip(gr).map(|(kv, gv)| kv * gv).sum());
                        let gkrow = &mut gk.data[i * cout..(i + 1) * cout];
                        for (acc, gv) in gkrow.iter_mut().zip(gr) {
                            *acc += xr[i] * gv;
                        }
                    }
                }
                vec![
                    (*input, Value::Feature(FeatureTensor::new(x.shape(), gx)?)),
                    (*kernel, Value::Matrix(gk)),
                    (*bias, Value::Vector(gb)),
                ]
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_statistics,
            } => {
                let g = feature_grad()?;
                let gam = self.vector(*gamma)?;
                let s = g.shape();
                let c = s.channels;
                let n = s.positions() as f64;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (gr, xr) in g.data().chunks_exact(c).zip(xhat.data().chunks_exact(c)) {
                    for e in 0..c {
                        dgamma[e] += gr[e] * xr[e];
                        dbeta[e] += gr[e];
                    }
                }
                let mut dx = Vec::with_capacity(g.data().len());
                for (gr, xr) in g.data().chunks_exact(c).zip(xhat.data().chunks_exact(c)) {
                    for e in 0..c {
                        let v = if *batch_statistics {
                            gam[e] * inv_std[e] / n * (n * gr[e] - dbeta[e] - xr[e] * dgamma[e])
                        } else {
                            gr[e] * gam[e] * inv_std[e]
                        };
                        dx.push(v);
                    }
                }
                vec![
                    (*input, Value::Feature(FeatureTensor::new(s, dx)?)),
                    (*gamma, Value::Vector(dgamma)),
                    (*beta, Value::Vector(dbeta)),
                ]
            }
            Op::Relu(a) => {
                let g = feature_grad()?;
                let x = self.feature(*a)?;
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                vec![(*a, Value::Feature(FeatureTensor::new(x.shape(), data)?))]
            }
            Op::Sigmoid(a) => {
                let g = feature_grad()?;
                let s = node.value.as_feature().expect("sigmoid output is a feature");
                let data = g
                    .data()
                    .iter()
                    .zip(s.data())
                    .map(|(gv, sv)| gv * sv * (1.0 - sv))
                    .collect();
                vec![(*a, Value::Feature(FeatureTensor::new(s.shape(), data)?))]
            }
            Op::ConvexMix { lower, upper, gate } => {
                let g = feature_grad()?;
                let l = self.feature(*lower)?;
                let u = self.feature(*upper)?;
                let gt = self.feature(*gate)?;
                let shape = g.shape();
                let n = g.data().len();
                let (mut gl, mut gu, mut gg) =
                    (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
                for i in 0..n {
                    let (gv, w) = (g.data()[i], gt.data()[i]);
                    gl.push(gv * w);
                    gu.push(gv * (1.0 - w));
                    gg.push(gv * (l.data()[i] - u.data()[i]));
                }
                vec![
                    (*lower, Value::Feature(FeatureTensor::new(shape, gl)?)),
                    (*upper, Value::Feature(FeatureTensor::new(shape, gu)?)),
                    (*gate, Value::Feature(FeatureTensor::new(shape, gg)?)),
                ]
            }
            Op::Sum(a) => {
                let seed = scalar_grad()?;
                let s = self.feature(*a)?.shape();
                vec![(*a, Value::Feature(FeatureTensor::full(s, seed)?))]
            }
            Op::WeightedSum(a, w) => {
                let seed = scalar_grad()?;
                let s = self.feature(*a)?.shape();
                let data = w.iter().map(|wv| wv * seed).collect();
                vec![(*a, Value::Feature(FeatureTensor::new(s, data)?))]
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let seed = scalar_grad()?;
                let s = self.feature(*logits)?.shape();
                let k = s.channels;
                let scale = seed / s.positions() as f64;
                let mut data: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (row, &label) in labels.iter().enumerate() {
                    data[row * k + label] -= scale;
                }
                vec![(*logits, Value::Feature(FeatureTensor::new(s, data)?))]
            }
        };
        Ok(out)
    }
}
