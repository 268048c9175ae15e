//! Reverse-mode gradients against central differences, for every tape
//! operation and for the full fusion → pooling → classifier → loss pipeline.

use dlfa_core::aif::{AifParameters, AifVariant, GateMode, InitScheme};
use dlfa_core::bankio::TaskFlavor;
use dlfa_core::dlfa::{record_dlfa, LayerPair};
use dlfa_core::harness::{ClassifierHead, FeatureSystem, Model, SystemInputs};
use dlfa_core::rng;
use dlfa_core::tape::{GradientTape, Value, Var};
use dlfa_core::tensor::{BatchNormState, BnMode, FeatureTensor, Matrix, Shape};
use dlfa_core::{finite_difference_check_piecewise, CheckOptions, Parameterized, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const SEEDS: u64 = 20;

/// Per-operation checks use the pinned step and tolerance, re-measuring
/// roundoff-limited entries (tiny gradients next to O(1) losses) at 1e-4.
fn op_options() -> CheckOptions {
    CheckOptions {
        fallback_step: Some(1e-4),
        ..CheckOptions::default()
    }
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

fn feature(shape: Shape, r: &mut ChaCha8Rng) -> Value {
    Value::Feature(FeatureTensor::from_fn(shape, |_, _, _| normal(r)).unwrap())
}

fn vector(n: usize, r: &mut ChaCha8Rng) -> Value {
    Value::Vector((0..n).map(|_| normal(r)).collect())
}

fn matrix(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> Value {
    Value::Matrix(Matrix::new(rows, cols, (0..rows * cols).map(|_| normal(r)).collect()).unwrap())
}

/// Named tensors perturbed by the checker.
#[derive(Clone)]
struct Blocks(Vec<(String, Value)>);

fn slice_mut(v: &mut Value) -> &mut [f64] {
    match v {
        Value::Scalar(x) => std::slice::from_mut(x),
        Value::Vector(v) => v,
        Value::Matrix(m) => &mut m.data,
        Value::Feature(f) => f.data_mut(),
    }
}

impl Parameterized for Blocks {
    fn parameters(&self) -> Vec<(String, &[f64])> {
        self.0.iter().map(|(n, v)| (n.clone(), v.as_slice())).collect()
    }

    fn parameters_mut(&mut self) -> Vec<(String, &mut [f64])> {
        self.0.iter_mut().map(|(n, v)| (n.clone(), slice_mut(v))).collect()
    }
}

/// Records `op` over the blocks and reduces a feature output with fixed
/// random weights, so every output entry carries a distinct cotangent.
fn scalar_loss(
    blocks: &Blocks,
    weights: &[f64],
    op: &dyn Fn(&mut GradientTape, &[Var]) -> Result<Var>,
) -> Result<(GradientTape, Var)> {
    let mut tape = GradientTape::new();
    let vars: Vec<Var> = blocks.0.iter().map(|(n, v)| tape.param(n.clone(), v.clone())).collect();
    let out = op(&mut tape, &vars)?;
    let root = match tape.value(out) {
        Value::Scalar(_) => out,
        _ => tape.weighted_sum(out, weights.to_vec())?,
    };
    Ok((tape, root))
}

fn check(name: &str, seed: u64, blocks: Blocks, op: impl Fn(&mut GradientTape, &[Var]) -> Result<Var>) {
    let mut r = rng::stream(seed, "weights");
    let (probe, out) = {
        let mut tape = GradientTape::new();
        let vars: Vec<Var> = blocks.0.iter().map(|(n, v)| tape.param(n.clone(), v.clone())).collect();
        let out = op(&mut tape, &vars).unwrap();
        (tape, out)
    };
    let weights: Vec<f64> = (0..probe.value(out).as_slice().len()).map(|_| normal(&mut r)).collect();
    let (tape, root) = scalar_loss(&blocks, &weights, &op).unwrap();
    let analytic = tape.backward(root, 1.0).unwrap().named(&tape);
    let report = finite_difference_check_piecewise(
        &blocks,
        &analytic,
        |b| {
            let (t, root) = scalar_loss(b, &weights, &op)?;
            Ok((t.value(root).as_scalar().unwrap(), t.activation_pattern()))
        },
        op_options(),
    )
    .unwrap();
    assert!(report.passed(), "{name}, seed {seed}:\n{report}");
}

fn each_seed(mut f: impl FnMut(u64, &mut ChaCha8Rng)) {
    for seed in 0..SEEDS {
        let mut r = rng::stream(seed, "inputs");
        f(seed, &mut r);
    }
}

#[test]
fn elementwise_and_broadcast_ops() {
    each_seed(|seed, r| {
        let s = Shape::new(3, 4, 5);
        let s1 = Shape::new(3, 1, 5);
        let b = Blocks(vec![("a".into(), feature(s, r)), ("b".into(), feature(s1, r))]);
        check("add", seed, b.clone(), |t, v| t.add(v[0], v[1]));
        check("mul", seed, b, |t, v| t.mul(v[0], v[1]));
        let b = Blocks(vec![("a".into(), feature(s, r)), ("b".into(), feature(s, r))]);
        check("sub", seed, b.clone(), |t, v| t.sub(v[0], v[1]));
        check("scale", seed, b, |t, v| t.scale(v[0], -1.7));
        let b = Blocks(vec![("a".into(), feature(s1, r))]);
        check("expand_tokens", seed, b, |t, v| t.expand_tokens(v[0], 4));
    });
}

#[test]
fn pooling_and_nonlinearities() {
    each_seed(|seed, r| {
        let s = Shape::new(2, 5, 4);
        let b = Blocks(vec![("x".into(), feature(s, r))]);
        check("mean_pool", seed, b.clone(), |t, v| t.mean_pool(v[0]));
        check("relu", seed, b.clone(), |t, v| t.relu(v[0]));
        check("sigmoid", seed, b, |t, v| {
            let scaled = t.scale(v[0], 3.0)?;
            t.sigmoid(scaled)
        });
    });
}

#[test]
fn conv1x1_all_arguments() {
    each_seed(|seed, r| {
        let b = Blocks(vec![
            ("x".into(), feature(Shape::new(2, 3, 6), r)),
            ("k".into(), matrix(6, 4, r)),
            ("bias".into(), vector(4, r)),
        ]);
        check("conv1x1", seed, b, |t, v| t.conv1x1(v[0], v[1], v[2]));
    });
}

#[test]
fn batch_norm_both_modes() {
    each_seed(|seed, r| {
        let b = Blocks(vec![
            ("x".into(), feature(Shape::new(3, 4, 5), r)),
            ("gamma".into(), vector(5, r)),
            ("beta".into(), vector(5, r)),
        ]);
        let mut train = BatchNormState::new(5);
        train.mode = BnMode::Training;
        check("batch_norm/train", seed, b.clone(), move |t, v| {
            t.batch_norm(v[0], v[1], v[2], &train).map(|(o, _)| o)
        });
        let mut eval = BatchNormState::new(5);
        eval.running_mean = (0..5).map(|i| 0.1 * i as f64).collect();
        eval.running_var = (0..5).map(|i| 0.5 + 0.3 * i as f64).collect();
        check("batch_norm/eval", seed, b, move |t, v| {
            t.batch_norm(v[0], v[1], v[2], &eval).map(|(o, _)| o)
        });
    });
}

#[test]
fn convex_mix_and_cross_entropy() {
    each_seed(|seed, r| {
        let s = Shape::new(2, 3, 4);
        let b = Blocks(vec![
            ("lower".into(), feature(s, r)),
            ("upper".into(), feature(s, r)),
            ("gate".into(), feature(s, r)),
        ]);
        check("convex_mix", seed, b, |t, v| {
            let g = t.sigmoid(v[2])?;
            t.convex_mix(v[0], v[1], g)
        });
        let labels: Vec<usize> = (0..6).map(|_| r.random_range(0..4)).collect();
        let b = Blocks(vec![("logits".into(), feature(s, r))]);
        check("cross_entropy", seed, b, move |t, v| t.cross_entropy(v[0], &labels));
    });
}

/// AIF parameters plus the inputs, so input gradients are checked too.
#[derive(Clone)]
struct Fusion {
    params: AifParameters,
    lower: FeatureTensor,
    upper: FeatureTensor,
}

impl Parameterized for Fusion {
    fn parameters(&self) -> Vec<(String, &[f64])> {
        let mut p = self.params.parameters();
        p.push(("lower".into(), self.lower.data()));
        p.push(("upper".into(), self.upper.data()));
        p
    }

    fn parameters_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut p = self.params.parameters_mut();
        p.push(("lower".into(), self.lower.data_mut()));
        p.push(("upper".into(), self.upper.data_mut()));
        p
    }
}

fn fusion_loss(f: &Fusion, mode: GateMode, weights: &[f64]) -> Result<(GradientTape, Var, Var, Var)> {
    let mut tape = GradientTape::new();
    // Parameters are registered by `record`; the inputs go last to match `parameters()`.
    let placeholder_l = tape.input(f.lower.clone());
    let placeholder_u = tape.input(f.upper.clone());
    let trace = record_dlfa(&mut tape, placeholder_l, placeholder_u, &f.params, mode)?;
    let root = tape.weighted_sum(trace.fused, weights.to_vec())?;
    Ok((tape, root, placeholder_l, placeholder_u))
}

#[test]
fn dlfa_fusion_every_variant_and_mode() {
    for variant in [AifVariant::Full, AifVariant::Global, AifVariant::Local] {
        for mode in [GateMode::SigmoidOnly, GateMode::InputScaled] {
            for bn in [BnMode::Training, BnMode::Evaluation] {
                each_seed(|seed, r| {
                    let s = Shape::new(3, 4, 8);
                    let mut params = AifParameters::init(8, 4, variant, InitScheme::Kaiming, seed).unwrap();
                    params.set_mode(bn);
                    let f = Fusion {
                        params,
                        lower: FeatureTensor::from_fn(s, |_, _, _| normal(r)).unwrap(),
                        upper: FeatureTensor::from_fn(s, |_, _, _| normal(r)).unwrap(),
                    };
                    let weights: Vec<f64> = (0..s.len()).map(|_| normal(r)).collect();
                    let (tape, root, l, u) = fusion_loss(&f, mode, &weights).unwrap();
                    let grads = tape.backward(root, 1.0).unwrap();
                    let mut analytic = grads.named(&tape);
                    analytic.push(("lower".into(), grads.flat(&tape, l)));
                    analytic.push(("upper".into(), grads.flat(&tape, u)));
                    let report = finite_difference_check_piecewise(
                        &f,
                        &analytic,
                        |f| {
                            let (t, root, _, _) = fusion_loss(f, mode, &weights)?;
                            Ok((t.value(root).as_scalar().unwrap(), t.activation_pattern()))
                        },
                        op_options(),
                    )
                    .unwrap();
                    assert!(report.passed(), "{variant:?}/{mode:?}/{bn:?} seed {seed}:\n{report}");
                });
            }
        }
    }
}

fn pipeline_loss(model: &Model, inputs: &SystemInputs, labels: &[usize]) -> Result<(GradientTape, Var)> {
    let mut tape = GradientTape::new();
    let trace = model.record(&mut tape, inputs)?;
    let loss = tape.cross_entropy(trace.logits, labels)?;
    Ok((tape, loss))
}

/// Fusion → mean pool → linear head → cross-entropy, at 4×8×32.
#[test]
fn full_pipeline_every_parameter() {
    let started = std::time::Instant::now();
    each_seed(|seed, r| {
        let s = Shape::new(4, 8, 32);
        let k = 3;
        let system = FeatureSystem::fused(
            LayerPair::new(3, 12).unwrap(),
            32,
            4,
            AifVariant::Full,
            GateMode::SigmoidOnly,
            seed,
        )
        .unwrap();
        let mut model = Model::new(system, ClassifierHead::init(32, k, seed).unwrap(), TaskFlavor::Sentence).unwrap();
        model.set_mode(BnMode::Training);
        let inputs = SystemInputs {
            lower: Some(FeatureTensor::from_fn(s, |_, _, _| normal(r)).unwrap()),
            upper: FeatureTensor::from_fn(s, |_, _, _| normal(r)).unwrap(),
        };
        let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..k)).collect();
        let (tape, root) = pipeline_loss(&model, &inputs, &labels).unwrap();
        let analytic = tape.backward(root, 1.0).unwrap().named(&tape);
        let report = finite_difference_check_piecewise(
            &model,
            &analytic,
            |m| {
                let (t, root) = pipeline_loss(m, &inputs, &labels)?;
                Ok((t.value(root).as_scalar().unwrap(), t.activation_pattern()))
            },
            CheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}:\n{report}");
        let skipped: usize = report.params.iter().map(|p| p.skipped).sum();
        assert!(skipped * 20 < model.parameter_count(), "too many kink skips: {skipped}");
    });
    assert!(started.elapsed().as_secs() < 60);
}

#[test]
fn token_head_and_baseline_pipelines() {
    each_seed(|seed, r| {
        let s = Shape::new(2, 3, 8);
        let k = 3;
        let inputs = SystemInputs {
            lower: None,
            upper: FeatureTensor::from_fn(s, |_, _, _| normal(r)).unwrap(),
        };
        for flavor in [TaskFlavor::Sentence, TaskFlavor::Token] {
            let model = Model::new(
                FeatureSystem::baseline(12).unwrap(),
                ClassifierHead::init(8, k, seed).unwrap(),
                flavor,
            )
            .unwrap();
            let n = if flavor == TaskFlavor::Token { 6 } else { 2 };
            let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
            let (tape, root) = pipeline_loss(&model, &inputs, &labels).unwrap();
            let analytic = tape.backward(root, 1.0).unwrap().named(&tape);
            let report = finite_difference_check_piecewise(
                &model,
                &analytic,
                |m| {
                    let (t, root) = pipeline_loss(m, &inputs, &labels)?;
                    Ok((t.value(root).as_scalar().unwrap(), t.activation_pattern()))
                },
                CheckOptions::default(),
            )
            .unwrap();
            assert!(report.passed(), "{flavor:?} seed {seed}:\n{report}");
        }
    });
}
