//! Synthetic bilingual tasks with a controllable per-layer language invariance.
//!
//! Each sentence has a class and `T` latent token vectors `z ∈ ℝᵈ` drawn
//! around a class prototype. Layer `ℓ` of language `lang` renders a token as
//!
//! ```text
//! λ_ℓ · S_ℓ z + (1 − λ_ℓ) · A_ℓ Q_{lang,ℓ} z + noise
//! ```
//!
//! with `S_ℓ`, `A_ℓ` shared random `E×d` maps and `Q_{lang,ℓ}` a random
//! orthogonal matrix per language and layer. High `λ` makes a layer
//! language-invariant; low `λ` buries the shared structure under a
//! language-specific rotation. Source and target sentences at the same index
//! are parallel: they share class and latents exactly.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bankio::{quantize_to_f32, BankManifest, LayerBank, SentenceMeta, Split, TaskFlavor};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{FeatureTensor, Shape};

/// Default invariance schedule: rises to 0.9 at layer 6, falls to 0.1 at the top.
pub const DEFAULT_INVARIANCE: [f64; 12] = [0.5, 0.6, 0.7, 0.8, 0.85, 0.9, 0.8, 0.65, 0.5, 0.35, 0.2, 0.1];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub num_classes: usize,
    pub latent_dim: usize,
    pub tokens_per_sentence: usize,
    pub channels: usize,
    /// One entry per layer; its length is the layer count.
    pub invariance: Vec<f64>,
    pub train_per_language: usize,
    pub test_per_language: usize,
    pub noise_std: f64,
    /// Spread of token latents around the class prototype.
    pub token_spread: f64,
    pub prototype_scale: f64,
    pub source_language: String,
    pub target_language: String,
    pub flavor: TaskFlavor,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            num_classes: 4,
            latent_dim: 16,
            tokens_per_sentence: 8,
            channels: 32,
            invariance: DEFAULT_INVARIANCE.to_vec(),
            train_per_language: 500,
            test_per_language: 200,
            noise_std: 0.5,
            token_spread: 1.0,
            prototype_scale: 1.0,
            source_language: "en".into(),
            target_language: "xx".into(),
            flavor: TaskFlavor::Sentence,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn n_layers(&self) -> usize {
        self.invariance.len()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return fail(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.latent_dim < 1 || self.channels < 1 || self.tokens_per_sentence < 1 {
            return fail("latent_dim, channels and tokens_per_sentence must be at least 1".into());
        }
        if self.invariance.is_empty() {
            return fail("invariance schedule needs at least one layer".into());
        }
        if let Some((i, l)) = self.invariance.iter().enumerate().find(|(_, l)| !(0.0..=1.0).contains(*l)) {
            return fail(format!("invariance of layer {} is {l}, outside [0, 1]", i + 1));
        }
        if self.train_per_language < 1 || self.test_per_language < 1 {
            return fail("each split needs at least one sentence".into());
        }
        for (name, v) in [
            ("noise_std", self.noise_std),
            ("token_spread", self.token_spread),
            ("prototype_scale", self.prototype_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return fail(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.source_language == self.target_language {
            return fail("source and target languages must differ".into());
        }
        Ok(())
    }
}

/// A source bank and its parallel target bank.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedTask {
    pub source: LayerBank,
    pub target: LayerBank,
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    // Row-major fill order, so the draw sequence doesn't depend on storage layout.
    let mut m = DMatrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            m[(r, c)] = std * rng.sample::<f64, _>(StandardNormal);
        }
    }
    m
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
/// signs of `R`'s diagonal folded into `Q`.
fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let qr = gaussian(d, d, 1.0, rng).qr();
    let (mut q, r) = (qr.q(), qr.r());
    for c in 0..d {
        if r[(c, c)] < 0.0 {
            q.column_mut(c).neg_mut();
        }
    }
    q
}

fn balanced_labels(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    labels.shuffle(rng);
    labels
}

/// Generates a parallel source/target pair of layer banks.
pub fn generate_task(spec: &SyntheticTaskSpec) -> Result<GeneratedTask> {
    spec.validate()?;
    let (k, d, t, e) = (spec.num_classes, spec.latent_dim, spec.tokens_per_sentence, spec.channels);
    let n_layers = spec.n_layers();

    let mut maps_rng = rng::stream(spec.seed, "task.maps");
    let prototypes = gaussian(k, d, spec.prototype_scale, &mut maps_rng);
    let shared: Vec<(DMatrix<f64>, DMatrix<f64>)> = (0..n_layers)
        .map(|_| {
            let s = gaussian(e, d, (1.0 / d as f64).sqrt(), &mut maps_rng);
            let a = gaussian(e, d, (1.0 / d as f64).sqrt(), &mut maps_rng);
            (s, a)
        })
        .collect();
    // mixing[lang][layer] = λ S + (1 − λ) A Q
    let mixing: Vec<Vec<DMatrix<f64>>> = (0..2)
        .map(|_| {
            shared
                .iter()
                .zip(&spec.invariance)
                .map(|((s, a), &lambda)| {
                    let q = random_orthogonal(d, &mut maps_rng);
                    s * lambda + (a * q) * (1.0 - lambda)
                })
                .collect()
        })
        .collect();

    let mut sent_rng = rng::stream(spec.seed, "task.sentences");
    let mut sentences: Vec<(usize, Split, Option<Vec<usize>>)> = Vec::new();
    let mut latents: Vec<DMatrix<f64>> = Vec::new(); // d × T per sentence
    for (split, n) in [(Split::Train, spec.train_per_language), (Split::Test, spec.test_per_language)] {
        let labels = balanced_labels(n, k, &mut sent_rng);
        for label in labels {
            let token_classes: Vec<usize> = match spec.flavor {
                TaskFlavor::Sentence => vec![label; t],
                TaskFlavor::Token => (0..t).map(|_| sent_rng.random_range(0..k)).collect(),
            };
            let mut z = DMatrix::zeros(d, t);
            for (ti, &c) in token_classes.iter().enumerate() {
                for di in 0..d {
                    z[(di, ti)] = prototypes[(c, di)] + spec.token_spread * sent_rng.sample::<f64, _>(StandardNormal);
                }
            }
            latents.push(z);
            match spec.flavor {
                TaskFlavor::Sentence => sentences.push((label, split, None)),
                TaskFlavor::Token => {
                    let mut counts = vec![0usize; k];
                    for &c in &token_classes {
                        counts[c] += 1;
                    }
                    let majority = (0..k).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap_or(0);
                    sentences.push((majority, split, Some(token_classes)));
                }
            }
        }
    }

    let b = latents.len();
    let shape = Shape::new(b, t, e);
    let langs = [&spec.source_language, &spec.target_language];
    let mut banks = Vec::with_capacity(2);
    for (li, lang) in langs.into_iter().enumerate() {
        let mut noise_rng = rng::stream(spec.seed, if li == 0 { "task.noise.source" } else { "task.noise.target" });
        let mut layers = Vec::with_capacity(n_layers);
        for mix in &mixing[li] {
            let mut data = Vec::with_capacity(shape.len());
            for z in &latents {
                let rendered = mix * z; // E × T
                for ti in 0..t {
                    for ei in 0..e {
                        let noise = if spec.noise_std > 0.0 {
                            spec.noise_std * noise_rng.sample::<f64, _>(StandardNormal)
                        } else {
                            0.0
                        };
                        data.push(rendered[(ei, ti)] + noise);
                    }
                }
            }
            let mut layer = FeatureTensor::new(shape, data)?;
            quantize_to_f32(&mut layer);
            layers.push(layer);
        }
        let manifest = BankManifest {
            num_classes: k,
            flavor: spec.flavor,
            sentences: sentences
                .iter()
                .map(|(label, split, tokens)| SentenceMeta {
                    label: *label,
                    language: lang.clone(),
                    split: *split,
                    token_labels: tokens.clone(),
                })
                .collect(),
        };
        banks.push(LayerBank::new(layers, manifest)?);
    }
    let target = banks.pop().expect("two banks");
    let source = banks.pop().expect("two banks");
    Ok(GeneratedTask { source, target })
}
