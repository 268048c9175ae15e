use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Parser;
use dlfa_core::aif::AifVariant;
use dlfa_core::analysis::{self, ReportFormat, SimilarityReport};
use dlfa_core::bankio::{self, LayerBank, Split};
use dlfa_core::dlfa::LayerPair;
use dlfa_core::harness::{self, FeatureSystem, Model, RowConfig, SweepSettings, SyntheticTaskSpec, SystemInputs, TrainConfig};
use dlfa_core::rng;
use dlfa_core::tape::GradientTape;
use dlfa_core::tensor::{mean_pool_tokens, BnMode, FeatureTensor, Shape};
use dlfa_core::{finite_difference_check_piecewise, CheckOptions, ClassifierHead, GateMode, Parameterized};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use serde_json::json;

use crate::args::*;
use crate::manifest::{self, Artifact, RunManifest, MANIFEST_SCHEMA_VERSION};
use crate::CliError;

/// What a subcommand did, for its manifest.
struct RunRecord {
    config: serde_json::Value,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    manifest: Option<PathBuf>,
    /// Set when the run completed but a check it performs did not pass.
    failure: Option<String>,
}

impl RunRecord {
    fn new(config: impl Serialize, seed: Option<u64>, manifest: &ManifestArg) -> Self {
        RunRecord {
            config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            manifest: manifest.manifest.clone(),
            failure: None,
        }
    }
}

pub fn execute(cli: Cli, argv: Vec<String>) -> Result<(), CliError> {
    let started = Instant::now();
    let (name, record) = match cli.command {
        Command::GenTask(a) => ("gen-task", gen_task(a)?),
        Command::Fuse(a) => ("fuse", fuse(a)?),
        Command::Train(a) => ("train", train(a)?),
        Command::Sweep(a) => ("sweep", sweep(a)?),
        Command::Ablate(a) => ("ablate", ablate(a)?),
        Command::Cossim(a) => ("cossim", cossim(a)?),
        Command::Gradcheck(a) => ("gradcheck", gradcheck(a)?),
        Command::InspectBank(a) => ("inspect-bank", inspect(a)?),
        Command::Replay(a) => return replay(a),
    };
    let path = record
        .manifest
        .clone()
        .or_else(|| record.outputs.first().map(|o| manifest::default_path(o)));
    if let Some(path) = path {
        let m = RunManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            subcommand: name.to_string(),
            argv,
            cwd: std::env::current_dir().map_err(|e| CliError::io(Path::new("."), e))?,
            config: record.config,
            seed: record.seed,
            inputs: record.inputs.iter().map(|p| Artifact::of(p)).collect::<Result<_, _>>()?,
            outputs: record.outputs.iter().map(|p| Artifact::of(p)).collect::<Result<_, _>>()?,
            wall_clock_seconds: started.elapsed().as_secs_f64(),
        };
        m.write(&path)?;
    }
    match record.failure {
        Some(msg) => Err(CliError::CheckFailed(msg)),
        None => Ok(()),
    }
}

fn read_json<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| dlfa_core::Error::Config(format!("{}: {e}", path.display())).into())
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn resolve_train(flags: &TrainFlags, seed: u64) -> Result<TrainConfig, CliError> {
    let mut cfg = match (&flags.config, &flags.preset) {
        (Some(p), _) => read_json::<TrainConfig>(p)?,
        (None, Some(name)) => TrainConfig::preset(name)?,
        (None, None) => TrainConfig::default(),
    };
    if let Some(v) = flags.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = flags.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = flags.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = flags.weight_decay {
        cfg.weight_decay = v;
    }
    cfg.seed = seed;
    cfg.validate()?;
    Ok(cfg)
}

fn format_for(explicit: Option<FormatArg>, path: &Path) -> ReportFormat {
    explicit.map(Into::into).unwrap_or_else(|| ReportFormat::from_path(path))
}

fn gen_task(a: GenTaskArgs) -> Result<RunRecord, CliError> {
    let mut spec = match &a.spec {
        Some(p) => read_json::<SyntheticTaskSpec>(p)?,
        None => SyntheticTaskSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let task = harness::generate_task(&spec)?;
    bankio::write_bank(&task.source, &a.out_src)?;
    bankio::write_bank(&task.target, &a.out_tgt)?;
    println!(
        "wrote {} and {}: {} layers of {}",
        a.out_src.display(),
        a.out_tgt.display(),
        task.source.n_layers(),
        task.source.shape()
    );
    let mut r = RunRecord::new(&spec, Some(spec.seed), &a.manifest);
    r.inputs.extend(a.spec.clone());
    r.outputs = vec![a.out_src, a.out_tgt];
    Ok(r)
}

fn fuse(a: FuseArgs) -> Result<RunRecord, CliError> {
    let bank = bankio::read_bank(&a.bank)?;
    let system = match &a.params {
        Some(p) => {
            let model: Model = bankio::load_params(p)?;
            match model.system {
                FeatureSystem::Fused(s) if s.pair.lower == a.layer => FeatureSystem::Fused(s),
                other => {
                    return Err(dlfa_core::Error::Config(format!(
                        "{} holds a {} system, not D_{}",
                        p.display(),
                        other.config_id(),
                        a.layer
                    ))
                    .into())
                }
            }
        }
        None => FeatureSystem::fused(
            LayerPair::new(a.layer, a.upper.unwrap_or(bank.n_layers()))?,
            bank.shape().channels,
            a.gate.reduction,
            a.variant.unwrap_or(VariantArg::Full).into(),
            a.gate.gate_mode.into(),
            a.seed,
        )?,
    };
    let mut system = system;
    system.set_mode(BnMode::Evaluation);
    let all: Vec<usize> = (0..bank.shape().batch).collect();
    let fused = system.features(&system.gather(&bank, &all)?)?;
    let out = LayerBank::new(vec![fused], bank.manifest().clone())?;
    bankio::write_bank(&out, &a.out)?;
    println!("wrote {} ({}) to {}", system.config_id(), out.shape(), a.out.display());
    let mut r = RunRecord::new(
        json!({
            "bank": a.bank,
            "system": system,
            "params": a.params,
        }),
        Some(a.seed),
        &a.manifest,
    );
    r.inputs.push(a.bank);
    r.inputs.extend(a.params);
    r.outputs.push(a.out);
    Ok(r)
}

fn train(a: TrainArgs) -> Result<RunRecord, CliError> {
    let bank = bankio::read_bank(&a.src)?;
    let cfg = resolve_train(&a.train, a.seed)?;
    let settings = SweepSettings {
        gate_mode: a.gate.gate_mode.into(),
        reduction_ratio: a.gate.reduction,
        train: cfg.clone(),
        jobs: 1,
    };
    let row = match a.layer {
        Some(lower) => RowConfig::Fused {
            lower,
            variant: a.variant.into(),
        },
        None => RowConfig::Baseline,
    };
    let model = harness::build_model(row, &bank, &settings)?;
    let outcome = harness::train(&model, &bank, &cfg)?;
    bankio::save_params(&outcome.model, &a.out_params)?;

    let mut evals = Vec::new();
    for path in &a.eval {
        let b = bankio::read_bank(path)?;
        evals.push(json!({
            "bank": path,
            "metrics": harness::evaluate(&outcome.model, &b, Split::Test)?,
        }));
    }
    let report = json!({
        "config": row.id(),
        "initial_loss": outcome.initial_loss,
        "final_loss": outcome.final_loss,
        "train": harness::evaluate(&outcome.model, &bank, Split::Train)?,
        "evaluations": evals,
        "loss_curve": outcome.loss_curve,
    });
    println!(
        "{}: loss {:.4} -> {:.4} over {} steps",
        row.id(),
        outcome.initial_loss,
        outcome.final_loss,
        outcome.loss_curve.len()
    );
    if let Some(p) = &a.report {
        let mut text = serde_json::to_string_pretty(&report).expect("serializable report");
        text.push('\n');
        write_text(p, &text)?;
    }
    let mut r = RunRecord::new(
        json!({
            "row": row,
            "gate_mode": settings.gate_mode,
            "reduction_ratio": settings.reduction_ratio,
            "train": cfg,
        }),
        Some(a.seed),
        &a.manifest,
    );
    r.inputs.push(a.src);
    r.inputs.extend(a.eval);
    r.outputs.push(a.out_params);
    r.outputs.extend(a.report);
    Ok(r)
}

fn sweep_settings(gate: &GateFlags, train: &TrainFlags, seed: u64, jobs: u64) -> Result<SweepSettings, CliError> {
    Ok(SweepSettings {
        gate_mode: gate.gate_mode.into(),
        reduction_ratio: gate.reduction,
        train: resolve_train(train, seed)?,
        jobs: jobs as usize,
    })
}

fn sweep(a: SweepArgs) -> Result<RunRecord, CliError> {
    let source = bankio::read_bank(&a.src)?;
    let target = bankio::read_bank(&a.tgt)?;
    let settings = sweep_settings(&a.gate, &a.train, a.seed, a.jobs)?;
    let variants: Vec<AifVariant> = a.variant.iter().map(|&v| v.into()).collect();
    let report = harness::layer_sweep(&source, &target, &a.layers, &variants, &settings)?;
    write_text(&a.report, &analysis::emit_sweep(&report, format_for(a.format, &a.report))?)?;
    print!("{}", analysis::emit_sweep(&report, ReportFormat::Text)?);
    // `jobs` is left out of the recorded configuration: it cannot change results.
    let mut r = RunRecord::new(
        json!({
            "layers": a.layers,
            "variants": variants,
            "gate_mode": settings.gate_mode,
            "reduction_ratio": settings.reduction_ratio,
            "train": settings.train,
        }),
        Some(a.seed),
        &a.manifest,
    );
    r.inputs = vec![a.src, a.tgt];
    r.outputs.push(a.report);
    Ok(r)
}

fn ablate(a: AblateArgs) -> Result<RunRecord, CliError> {
    let source = bankio::read_bank(&a.src)?;
    let target = bankio::read_bank(&a.tgt)?;
    let settings = sweep_settings(&a.gate, &a.train, a.seed, a.jobs)?;
    let report = harness::ablation(&source, &target, a.layer, &settings)?;
    write_text(&a.report, &analysis::emit_sweep(&report, format_for(a.format, &a.report))?)?;
    print!("{}", analysis::emit_sweep(&report, ReportFormat::Text)?);
    let mut r = RunRecord::new(
        json!({
            "layer": a.layer,
            "gate_mode": settings.gate_mode,
            "reduction_ratio": settings.reduction_ratio,
            "train": settings.train,
        }),
        Some(a.seed),
        &a.manifest,
    );
    r.inputs = vec![a.src, a.tgt];
    r.outputs.push(a.report);
    Ok(r)
}

fn cossim(a: CossimArgs) -> Result<RunRecord, CliError> {
    let source = bankio::read_bank(&a.src)?;
    let targets = a
        .tgt
        .iter()
        .map(bankio::read_bank)
        .collect::<Result<Vec<_>, _>>()?;
    let target_refs: Vec<&LayerBank> = targets.iter().collect();
    let indices = analysis::probe_indices(&source, Some(a.sentences))?;
    let channels = source.shape().channels;
    let last = source.n_layers();

    let mut systems: Vec<(String, FeatureSystem)> = vec![("baseline".into(), FeatureSystem::baseline(last)?)];
    for &x in a.layers.iter().flatten() {
        let s = FeatureSystem::fused(
            LayerPair::with_last(x, last)?,
            channels,
            a.gate.reduction,
            a.variant.into(),
            a.gate.gate_mode.into(),
            a.seed,
        )?;
        systems.push((s.config_id(), s));
    }
    for p in &a.params {
        let model: Model = bankio::load_params(p)?;
        let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        systems.push((name, model.system));
    }
    let reports = systems
        .iter()
        .map(|(name, s)| analysis::avg_cross_lingual_similarity(name, s, &source, &target_refs, &indices))
        .collect::<Result<Vec<SimilarityReport>, _>>()?;
    print!("{}", analysis::emit_similarity(&reports, ReportFormat::Text)?);
    if let Some(p) = &a.report {
        write_text(p, &analysis::emit_similarity(&reports, format_for(a.format, p))?)?;
    }
    let mut r = RunRecord::new(
        json!({
            "systems": systems.iter().map(|(n, _)| n).collect::<Vec<_>>(),
            "variant": AifVariant::from(a.variant),
            "gate_mode": GateMode::from(a.gate.gate_mode),
            "reduction_ratio": a.gate.reduction,
            "sentences": a.sentences,
        }),
        Some(a.seed),
        &a.manifest,
    );
    r.inputs.push(a.src);
    r.inputs.extend(a.tgt);
    r.inputs.extend(a.params);
    r.outputs.extend(a.report);
    Ok(r)
}

fn gradcheck(a: GradcheckArgs) -> Result<RunRecord, CliError> {
    let shape = Shape::new(a.batch, a.tokens, a.channels);
    let mut r = rng::stream(a.seed, "gradcheck.inputs");
    let mut draw = |shape: Shape| FeatureTensor::from_fn(shape, |_, _, _| r.sample::<f64, _>(StandardNormal));
    let inputs = SystemInputs {
        lower: Some(draw(shape)?),
        upper: draw(shape)?,
    };
    let mut lr = rng::stream(a.seed, "gradcheck.labels");
    let labels: Vec<usize> = (0..a.batch).map(|_| lr.random_range(0..a.classes.max(1))).collect();
    let system = FeatureSystem::fused(
        LayerPair::new(1, 2)?,
        a.channels,
        a.gate.reduction,
        a.variant.into(),
        a.gate.gate_mode.into(),
        a.seed,
    )?;
    let mut model = Model::new(
        system,
        ClassifierHead::init(a.channels, a.classes, a.seed)?,
        dlfa_core::TaskFlavor::Sentence,
    )?;
    model.set_mode(if a.eval_mode { BnMode::Evaluation } else { BnMode::Training });

    let loss = |m: &Model| -> dlfa_core::Result<(GradientTape, dlfa_core::Var)> {
        let mut tape = GradientTape::new();
        let trace = m.record(&mut tape, &inputs)?;
        let l = tape.cross_entropy(trace.logits, &labels)?;
        Ok((tape, l))
    };
    let (tape, root) = loss(&model)?;
    let analytic = tape.backward(root, 1.0)?.named(&tape);
    let report = finite_difference_check_piecewise(
        &model,
        &analytic,
        |m| {
            let (t, root) = loss(m)?;
            Ok((t.value(root).as_scalar().unwrap_or(f64::NAN), t.activation_pattern()))
        },
        CheckOptions::new(a.eps, a.rtol),
    )?;
    print!("{report}");
    println!(
        "{} parameters, max error {:.3e}: {}",
        model.parameter_count(),
        report.max_error(),
        if report.passed() { "PASS" } else { "FAIL" }
    );
    if let Some(p) = &a.report {
        let doc = json!({
            "passed": report.passed(),
            "max_error": report.max_error(),
            "params": report.params.iter().map(|p| json!({
                "name": p.name,
                "entries": p.entries,
                "skipped": p.skipped,
                "max_error": p.max_error,
                "worst_index": p.worst_index,
                "analytic": p.analytic_at_worst,
                "numeric": p.numeric_at_worst,
                "passed": p.passed,
            })).collect::<Vec<_>>(),
        });
        let mut text = serde_json::to_string_pretty(&doc).expect("serializable report");
        text.push('\n');
        write_text(p, &text)?;
    }
    let mut rec = RunRecord::new(
        json!({
            "eps": a.eps,
            "rtol": a.rtol,
            "shape": [a.batch, a.tokens, a.channels],
            "classes": a.classes,
            "variant": AifVariant::from(a.variant),
            "gate_mode": GateMode::from(a.gate.gate_mode),
            "reduction_ratio": a.gate.reduction,
            "bn_mode": if a.eval_mode { "evaluation" } else { "training" },
        }),
        Some(a.seed),
        &a.manifest,
    );
    rec.outputs.extend(a.report);
    if !report.passed() {
        rec.failure = Some(format!(
            "gradient check failed for {} parameter tensors",
            report.failures().count()
        ));
    }
    Ok(rec)
}

#[derive(Serialize)]
struct LayerSummary {
    layer: usize,
    mean: f64,
    std: f64,
    min: f64,
    max: f64,
    mean_pooled_norm: f64,
}

fn inspect(a: InspectArgs) -> Result<RunRecord, CliError> {
    let bank = bankio::read_bank(&a.bank)?;
    let s = bank.shape();
    let layers: Vec<LayerSummary> = bank
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let d = l.data();
            let n = d.len() as f64;
            let mean = d.iter().sum::<f64>() / n;
            let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let pooled = mean_pool_tokens(l);
            let norms: f64 = pooled
                .data()
                .chunks_exact(s.channels)
                .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
                .sum();
            LayerSummary {
                layer: i + 1,
                mean,
                std: var.sqrt(),
                min: d.iter().copied().fold(f64::INFINITY, f64::min),
                max: d.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                mean_pooled_norm: norms / s.batch as f64,
            }
        })
        .collect();
    let m = bank.manifest();
    let mut class_counts = vec![0usize; m.num_classes];
    for sent in &m.sentences {
        class_counts[sent.label] += 1;
    }
    let splits: Vec<(Split, usize)> = [Split::Train, Split::Dev, Split::Test]
        .into_iter()
        .map(|sp| (sp, bank.indices(sp).len()))
        .collect();
    let summary = json!({
        "path": a.bank,
        "layers": bank.n_layers(),
        "batch": s.batch,
        "tokens": s.tokens,
        "channels": s.channels,
        "num_classes": m.num_classes,
        "flavor": m.flavor,
        "languages": bank.languages(),
        "splits": splits.iter().map(|(sp, n)| json!({"split": sp, "count": n})).collect::<Vec<_>>(),
        "class_counts": class_counts,
        "layer_stats": layers,
    });
    if a.json {
        println!("{}", serde_json::to_string_pretty(&summary).expect("serializable summary"));
    } else {
        println!("bank        {}", a.bank.display());
        println!("shape       {} layers × {}", bank.n_layers(), s);
        println!("classes     {} ({:?})", m.num_classes, m.flavor);
        println!("languages   {}", bank.languages().join(", "));
        for (sp, n) in &splits {
            println!("{:<11} {n}", format!("{sp:?}").to_lowercase());
        }
        println!("labels      {class_counts:?}");
        println!("{:>5} {:>10} {:>10} {:>10} {:>10} {:>12}", "layer", "mean", "std", "min", "max", "|pooled|");
        for l in &layers {
            println!(
                "{:>5} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>12.4}",
                l.layer, l.mean, l.std, l.min, l.max, l.mean_pooled_norm
            );
        }
    }
    let mut r = RunRecord::new(json!({ "json": a.json }), None, &a.manifest);
    r.inputs.push(a.bank);
    Ok(r)
}

fn replay(a: ReplayArgs) -> Result<(), CliError> {
    let recorded = RunManifest::read(&a.manifest)?;
    std::env::set_current_dir(&recorded.cwd).map_err(|e| CliError::io(&recorded.cwd, e))?;
    for input in &recorded.inputs {
        let now = manifest::sha256_file(&input.path)?;
        if now != input.sha256 {
            return Err(CliError::ReplayMismatch(format!(
                "input {} changed since the recorded run",
                input.path.display()
            )));
        }
    }
    let cli = Cli::try_parse_from(std::iter::once("dlfa".to_string()).chain(recorded.argv.iter().cloned()))
        .map_err(|e| CliError::Manifest(format!("recorded arguments no longer parse: {e}")))?;
    if matches!(cli.command, Command::Replay(_)) {
        return Err(CliError::Manifest("refusing to replay a replay".into()));
    }
    let result = execute(cli, recorded.argv.clone());
    if a.no_verify {
        return result;
    }
    result?;
    let mut mismatched = Vec::new();
    for output in &recorded.outputs {
        if manifest::sha256_file(&output.path)? != output.sha256 {
            mismatched.push(output.path.display().to_string());
        }
    }
    if !mismatched.is_empty() {
        return Err(CliError::ReplayMismatch(format!("outputs differ: {}", mismatched.join(", "))));
    }
    println!("replayed {}: {} outputs reproduced", recorded.subcommand, recorded.outputs.len());
    Ok(())
}
