use dlfa_core::analysis::{avg_cross_lingual_similarity, probe_indices};
use dlfa_core::dlfa::record_dlfa;
use dlfa_core::tensor::convex_mix;
use dlfa_core::{
    dlfa_forward, generate_task, init_aif, AifParameters, AifVariant, BnMode, FeatureSystem, FeatureTensor, GateMode,
    GradientTape, InitScheme, LayerPair, Shape, SyntheticTaskSpec,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tensor(shape: Shape, scale: f64) -> impl Strategy<Value = FeatureTensor> {
    prop::collection::vec(-scale..scale, shape.len())
        .prop_map(move |data| FeatureTensor::new(shape, data).unwrap())
}

fn params(seed: u64, variant: AifVariant, mode: BnMode) -> AifParameters {
    let mut p = AifParameters::init(6, 2, variant, InitScheme::Kaiming, seed).unwrap();
    p.set_mode(mode);
    p
}

const SHAPE: Shape = Shape {
    batch: 3,
    tokens: 4,
    channels: 6,
};

#[test]
fn gate_stays_strictly_inside_unit_interval() {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    for draw in 0..10_000u64 {
        let scale = 10f64.powf(r.random_range(-2.0..3.0));
        let w = FeatureTensor::from_fn(SHAPE, |_, _, _| r.random_range(-1.0..1.0) * scale).unwrap();
        let mode = if draw % 2 == 0 { BnMode::Training } else { BnMode::Evaluation };
        let (_, gate) = params(draw, AifVariant::Full, mode).forward(&w, GateMode::SigmoidOnly).unwrap();
        assert!(gate.data().iter().all(|&g| g > 0.0 && g < 1.0), "draw {draw}");
    }
}

proptest! {
    #[test]
    fn literal_output_never_exceeds_input(w in tensor(SHAPE, 1e3), seed in 0u64..1000) {
        for variant in [AifVariant::Full, AifVariant::Global, AifVariant::Local] {
            let (out, _) = params(seed, variant, BnMode::Training).forward(&w, GateMode::InputScaled).unwrap();
            for (o, i) in out.data().iter().zip(w.data()) {
                prop_assert!(o.abs() <= i.abs());
            }
        }
    }

    #[test]
    fn fusion_preserves_shape_and_convexity(
        a in tensor(SHAPE, 50.0),
        b in tensor(SHAPE, 50.0),
        seed in 0u64..1000,
    ) {
        let p = init_aif(6, 2, InitScheme::Kaiming, seed).unwrap();
        let (fused, _) = dlfa_forward(&a, &b, &p, GateMode::SigmoidOnly).unwrap();
        prop_assert_eq!(fused.shape(), a.shape());
        for ((f, x), y) in fused.data().iter().zip(a.data()).zip(b.data()) {
            prop_assert!(x.min(*y) <= *f && *f <= x.max(*y));
        }
    }

    #[test]
    fn swapping_inputs_and_complementing_the_gate_agree(
        a in tensor(SHAPE, 10.0),
        b in tensor(SHAPE, 10.0),
        g in tensor(SHAPE, 1.0),
    ) {
        let g = g.map(f64::abs);
        let forward = convex_mix(&a, &b, &g).unwrap();
        let swapped = convex_mix(&b, &a, &g.map(|v| 1.0 - v)).unwrap();
        for ((x, y), (l, u)) in forward.data().iter().zip(swapped.data()).zip(a.data().iter().zip(b.data())) {
            prop_assert!((x - y).abs() <= 1e-15 * (l.abs() + u.abs()));
        }
    }

    #[test]
    fn identical_layers_give_parameters_zero_gradient(
        l in tensor(SHAPE, 5.0),
        weights in prop::collection::vec(-1.0f64..1.0, SHAPE.len()),
        seed in 0u64..1000,
        literal in any::<bool>(),
    ) {
        let mode = if literal { GateMode::InputScaled } else { GateMode::SigmoidOnly };
        let p = params(seed, AifVariant::Full, BnMode::Training);
        let mut tape = GradientTape::new();
        let lower = tape.input(l.clone());
        let upper = tape.input(l.clone());
        let trace = record_dlfa(&mut tape, lower, upper, &p, mode).unwrap();
        let loss = tape.weighted_sum(trace.fused, weights).unwrap();
        let grads = tape.backward(loss, 1.0).unwrap().named(&tape);
        prop_assert!(!grads.is_empty());
        for (name, g) in grads {
            prop_assert!(g.iter().all(|&v| v == 0.0), "{} has a nonzero gradient", name);
        }
    }
}

#[test]
fn similarity_tracks_constructed_invariance() {
    for seed in 0..5 {
        let task = generate_task(&SyntheticTaskSpec {
            invariance: vec![0.95, 0.5, 0.2, 0.1],
            train_per_language: 20,
            test_per_language: 40,
            seed,
            ..Default::default()
        })
        .unwrap();
        let idx = probe_indices(&task.source, None).unwrap();
        let probe = |lower: usize| {
            let system = FeatureSystem::fused(
                LayerPair::with_last(lower, 4).unwrap(),
                32,
                4,
                AifVariant::Full,
                GateMode::SigmoidOnly,
                seed,
            )
            .unwrap();
            avg_cross_lingual_similarity("probe", &system, &task.source, &[&task.target], &idx)
                .unwrap()
                .average
        };
        let (high, low) = (probe(1), probe(3));
        assert!(high > low, "seed {seed}: λ=0.95 gives {high}, λ=0.2 gives {low}");
    }
}
