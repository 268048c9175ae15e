//! Cross-lingual similarity probe and report rendering.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bankio::{LayerBank, Split};
use crate::error::{Error, Result};
use crate::harness::{FeatureSystem, SweepReport};
use crate::tensor::{mean_pool_tokens, BnMode};

/// `u·v / (‖u‖‖v‖)`, clamped to `[-1, 1]`. Symmetric bit-for-bit.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::dimension("cosine_similarity", u.len(), v.len()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::UndefinedSimilarity);
    }
    if u == v {
        return Ok(1.0);
    }
    // Normalize each side first so the product is symmetric and overflow-safe.
    let dot_hat: f64 = u.iter().zip(v).map(|(a, b)| (a / nu) * (b / nv)).sum();
    let c = if dot_hat.is_finite() { dot_hat } else { dot / nu / nv };
    Ok(c.clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSimilarity {
    pub source_language: String,
    pub target_language: String,
    pub mean: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub model: String,
    /// Mean over all `(sentence, target language)` pairs.
    pub average: f64,
    pub pairs: Vec<PairSimilarity>,
    pub samples: usize,
}

/// Mean-pooled sentence embeddings of `indices` under `system`, BN in
/// evaluation mode.
pub fn sentence_embeddings(system: &FeatureSystem, bank: &LayerBank, indices: &[usize]) -> Result<Vec<Vec<f64>>> {
    let mut system = system.clone();
    system.set_mode(BnMode::Evaluation);
    let pooled = mean_pool_tokens(&system.features(&system.gather(bank, indices)?)?);
    let e = pooled.shape().channels;
    Ok(pooled.data().chunks_exact(e).map(<[f64]>::to_vec).collect())
}

/// Which sentences to probe: the first `count` test sentences, or every
/// test sentence when `count` is `None`.
pub fn probe_indices(bank: &LayerBank, count: Option<usize>) -> Result<Vec<usize>> {
    let mut idx = bank.indices(Split::Test);
    if idx.is_empty() {
        idx = (0..bank.shape().batch).collect();
    }
    if let Some(n) = count {
        if n == 0 || n > idx.len() {
            return Err(Error::Config(format!("asked for {n} probe sentences, {} available", idx.len())));
        }
        idx.truncate(n);
    }
    Ok(idx)
}

/// Average cosine similarity between source and target embeddings of
/// parallel sentences.
pub fn avg_cross_lingual_similarity(
    model: &str,
    system: &FeatureSystem,
    source: &LayerBank,
    targets: &[&LayerBank],
    indices: &[usize],
) -> Result<SimilarityReport> {
    if targets.is_empty() {
        return Err(Error::Config("at least one target bank is required".into()));
    }
    if indices.is_empty() {
        return Err(Error::Data("no sentences to compare".into()));
    }
    let src = sentence_embeddings(system, source, indices)?;
    let src_lang = source.languages().join("+");
    let mut pairs = Vec::with_capacity(targets.len());
    let mut all = Vec::with_capacity(targets.len() * indices.len());
    for target in targets {
        if target.shape().batch != source.shape().batch {
            return Err(Error::Data(format!(
                "misaligned banks: source has {} sentences, target has {}",
                source.shape().batch,
                target.shape().batch
            )));
        }
        let tgt = sentence_embeddings(system, target, indices)?;
        let sims = src
            .iter()
            .zip(&tgt)
            .map(|(u, v)| cosine_similarity(u, v))
            .collect::<Result<Vec<f64>>>()?;
        pairs.push(PairSimilarity {
            source_language: src_lang.clone(),
            target_language: target.languages().join("+"),
            mean: sims.iter().sum::<f64>() / sims.len() as f64,
            count: sims.len(),
        });
        all.extend(sims);
    }
    Ok(SimilarityReport {
        model: model.to_string(),
        average: all.iter().sum::<f64>() / all.len() as f64,
        pairs,
        samples: all.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
    Text,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "text" | "table" => Ok(ReportFormat::Text),
            other => Err(Error::Config(format!("unknown report format {other:?} (csv, json, text)"))),
        }
    }
}

impl ReportFormat {
    /// Guesses from a file extension, defaulting to text.
    pub fn from_path(path: &std::path::Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => ReportFormat::Csv,
            Some("json") => ReportFormat::Json,
            _ => ReportFormat::Text,
        }
    }
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

pub fn emit_sweep(report: &SweepReport, format: ReportFormat) -> Result<String> {
    if report.rows.is_empty() {
        return Err(Error::Data("sweep report has no rows".into()));
    }
    let mut out = String::new();
    match format {
        ReportFormat::Json => return json(report),
        ReportFormat::Csv => {
            out.push_str("config,source_acc,target_acc,source_f1,target_f1,final_loss\n");
            for r in &report.rows {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    r.config, r.source.accuracy, r.target.accuracy, r.source.micro_f1, r.target.micro_f1, r.final_loss
                );
            }
        }
        ReportFormat::Text => {
            let _ = writeln!(
                out,
                "{:<12} {:>10} {:>10} {:>10} {:>10}",
                "Model", "src Acc", "tgt Acc", "src F1", "tgt F1"
            );
            for r in &report.rows {
                let _ = writeln!(
                    out,
                    "{:<12} {:>10} {:>10} {:>10} {:>10}",
                    r.config,
                    pct(r.source.accuracy),
                    pct(r.target.accuracy),
                    pct(r.source.micro_f1),
                    pct(r.target.micro_f1)
                );
            }
        }
    }
    Ok(out)
}

pub fn emit_similarity(reports: &[SimilarityReport], format: ReportFormat) -> Result<String> {
    if reports.is_empty() || reports.iter().any(|r| r.pairs.is_empty()) {
        return Err(Error::Data("similarity report has an empty breakdown".into()));
    }
    let mut out = String::new();
    match format {
        ReportFormat::Json => return json(&reports),
        ReportFormat::Csv => {
            out.push_str("model,source,target,avg_cs,count\n");
            for r in reports {
                for p in &r.pairs {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{}",
                        r.model, p.source_language, p.target_language, p.mean, p.count
                    );
                }
            }
        }
        ReportFormat::Text => {
            let _ = writeln!(out, "{:<12} {:>10}", "Model", "Avg C.S.");
            for r in reports {
                let _ = writeln!(out, "{:<12} {:>10.4}", r.model, r.average);
            }
        }
    }
    Ok(out)
}
