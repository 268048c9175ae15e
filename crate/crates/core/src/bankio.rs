//! Layer banks on disk, and model parameter files.
//!
//! Bank layout, all integers little-endian:
//!
//! ```text
//! "DLFB"              4-byte magic
//! version             u32 (currently 1)
//! n_layers B T E      4 × u32
//! payload             n_layers·B·T·E × f32, row-major [layer][b][t][e]
//! manifest_len        u64
//! manifest            UTF-8 JSON, manifest_len bytes
//! ```
//!
//! Payload values are stored as `f32` and widened to `f64` on load, so a
//! bank roundtrips bit-exactly when its values are `f32`-representable
//! (generated banks always are). Parameter files are JSON.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{FeatureTensor, Shape};

pub const BANK_MAGIC: [u8; 4] = *b"DLFB";
pub const BANK_VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// Whether labels are per sentence or per token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskFlavor {
    #[default]
    Sentence,
    Token,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceMeta {
    pub label: usize,
    pub language: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_labels: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankManifest {
    pub num_classes: usize,
    #[serde(default)]
    pub flavor: TaskFlavor,
    pub sentences: Vec<SentenceMeta>,
}

/// Per-layer token embeddings for a set of sentences. Layers are 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerBank {
    layers: Vec<FeatureTensor>,
    manifest: BankManifest,
}

impl LayerBank {
    pub fn new(layers: Vec<FeatureTensor>, manifest: BankManifest) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(Error::Data("a bank needs at least one layer".into()));
        };
        let shape = first.shape();
        if let Some((i, l)) = layers.iter().enumerate().find(|(_, l)| l.shape() != shape) {
            return Err(Error::Data(format!(
                "layer {} has shape {} but layer 1 has {shape}",
                i + 1,
                l.shape()
            )));
        }
        if manifest.sentences.len() != shape.batch {
            return Err(Error::Data(format!(
                "manifest lists {} sentences for a batch of {}",
                manifest.sentences.len(),
                shape.batch
            )));
        }
        if manifest.num_classes < 2 {
            return Err(Error::Data("a bank needs at least two classes".into()));
        }
        for (i, s) in manifest.sentences.iter().enumerate() {
            if s.label >= manifest.num_classes {
                return Err(Error::Data(format!("sentence {i}: label {} out of range", s.label)));
            }
            match (&s.token_labels, manifest.flavor) {
                (Some(t), _) if t.len() != shape.tokens || t.iter().any(|&l| l >= manifest.num_classes) => {
                    return Err(Error::Data(format!("sentence {i}: invalid token labels")));
                }
                (None, TaskFlavor::Token) => {
                    return Err(Error::Data(format!("sentence {i}: token task without token labels")));
                }
                _ => {}
            }
        }
        Ok(LayerBank { layers, manifest })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn shape(&self) -> Shape {
        self.layers[0].shape()
    }

    pub fn manifest(&self) -> &BankManifest {
        &self.manifest
    }

    pub fn layers(&self) -> &[FeatureTensor] {
        &self.layers
    }

    pub fn layer(&self, index: usize) -> Result<&FeatureTensor> {
        if index == 0 || index > self.layers.len() {
            return Err(Error::Config(format!(
                "layer {index} requested but the bank has layers 1..={}",
                self.layers.len()
            )));
        }
        Ok(&self.layers[index - 1])
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }

    pub fn flavor(&self) -> TaskFlavor {
        self.manifest.flavor
    }

    /// Batch indices of sentences in `split`, ascending.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.manifest
            .sentences
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.manifest.sentences[i].label).collect()
    }

    /// Token labels of `indices`, flattened `[sentence][token]`.
    pub fn token_labels(&self, indices: &[usize]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(indices.len() * self.shape().tokens);
        for &i in indices {
            let t = self.manifest.sentences[i]
                .token_labels
                .as_ref()
                .ok_or_else(|| Error::Data(format!("sentence {i} has no token labels")))?;
            out.extend_from_slice(t);
        }
        Ok(out)
    }

    pub fn languages(&self) -> Vec<String> {
        let mut langs: Vec<String> = self.manifest.sentences.iter().map(|s| s.language.clone()).collect();
        langs.sort();
        langs.dedup();
        langs
    }
}

pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn dim_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} = {v} does not fit in u32")))
}

/// Serializes a bank to the on-disk layout.
pub fn encode_bank(bank: &LayerBank) -> Result<Vec<u8>> {
    let s = bank.shape();
    let manifest = serde_json::to_vec(&bank.manifest).map_err(|e| Error::Format(e.to_string()))?;
    let payload = bank.n_layers() * s.len();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * payload + 8 + manifest.len());
    out.extend_from_slice(&BANK_MAGIC);
    out.extend_from_slice(&BANK_VERSION.to_le_bytes());
    for (v, what) in [
        (bank.n_layers(), "n_layers"),
        (s.batch, "batch"),
        (s.tokens, "tokens"),
        (s.channels, "channels"),
    ] {
        out.extend_from_slice(&dim_u32(v, what)?.to_le_bytes());
    }
    for layer in &bank.layers {
        for &v in layer.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    Ok(out)
}

/// Parses and validates the on-disk layout.
pub fn decode_bank(bytes: &[u8]) -> Result<LayerBank> {
    if bytes.len() < 4 || bytes[..4] != BANK_MAGIC {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned();
        return Err(Error::Format(format!("bad magic {found:?}, expected \"DLFB\"")));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "header needs {HEADER_LEN} bytes, file has {}",
            bytes.len()
        )));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let version = u32_at(4);
    if version != BANK_VERSION as usize {
        return Err(Error::Format(format!("unsupported bank version {version}")));
    }
    let (n_layers, b, t, e) = (u32_at(8), u32_at(12), u32_at(16), u32_at(20));
    if n_layers == 0 || b == 0 || t == 0 || e == 0 {
        return Err(Error::Format(format!(
            "header declares an empty bank ({n_layers} layers of {b}×{t}×{e})"
        )));
    }
    let per_layer = b
        .checked_mul(t)
        .and_then(|v| v.checked_mul(e))
        .ok_or_else(|| Error::Format("declared shape overflows".into()))?;
    let expected = per_layer
        .checked_mul(n_layers)
        .ok_or_else(|| Error::Format("declared shape overflows".into()))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() / 4 < expected {
        return Err(Error::Truncation {
            expected,
            found: body.len() / 4,
        });
    }
    let (payload, rest) = body.split_at(expected * 4);
    if rest.len() < 8 {
        return Err(Error::Format("missing manifest length after payload".into()));
    }
    let manifest_len = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes"));
    let manifest_bytes = &rest[8..];
    if (manifest_bytes.len() as u64) < manifest_len {
        return Err(Error::Format(format!(
            "manifest declares {manifest_len} bytes, file has {}",
            manifest_bytes.len()
        )));
    }
    if manifest_bytes.len() as u64 > manifest_len {
        return Err(Error::Format(format!(
            "{} trailing bytes after manifest",
            manifest_bytes.len() as u64 - manifest_len
        )));
    }
    let manifest: BankManifest =
        serde_json::from_slice(manifest_bytes).map_err(|err| Error::Format(format!("manifest: {err}")))?;

    let shape = Shape::new(b, t, e);
    let mut layers = Vec::with_capacity(n_layers);
    for (li, chunk) in payload.chunks_exact(per_layer * 4).enumerate() {
        let mut data = Vec::with_capacity(per_layer);
        for (i, c) in chunk.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(c.try_into().expect("4 bytes"));
            if !v.is_finite() {
                let (bi, rem) = (i / (t * e), i % (t * e));
                return Err(Error::Data(format!(
                    "non-finite value {v} at layer {}, sentence {bi}, token {}, channel {}",
                    li + 1,
                    rem / e,
                    rem % e
                )));
            }
            data.push(f64::from(v));
        }
        layers.push(FeatureTensor::new(shape, data)?);
    }
    LayerBank::new(layers, manifest)
}

pub fn write_bank(bank: &LayerBank, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    atomic_write(path, &encode_bank(bank)?)
}

pub fn read_bank(path: impl AsRef<Path>) -> Result<LayerBank> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bank(&bytes)
}

/// Narrows every value to the nearest `f32`, matching what a write/read
/// cycle would produce.
pub fn quantize_to_f32(x: &mut FeatureTensor) {
    for v in x.data_mut() {
        *v = f64::from(*v as f32);
    }
}

pub const PARAMS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize)]
struct ParamsFileOut<'a, T> {
    schema_version: u32,
    model: &'a T,
}

#[derive(Debug, Deserialize)]
struct ParamsFileIn<T> {
    #[allow(dead_code)]
    schema_version: u32,
    model: T,
}

/// Writes `model` as a versioned JSON parameter file. Numbers are rendered
/// with the shortest representation that parses back to the same `f64`.
pub fn save_params<T: Serialize>(model: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_params(model)?;
    atomic_write(path, &bytes)
}

pub fn encode_params<T: Serialize>(model: &T) -> Result<Vec<u8>> {
    let doc = ParamsFileOut {
        schema_version: PARAMS_SCHEMA_VERSION,
        model,
    };
    let value = serde_json::to_value(&doc).map_err(|e| Error::Format(e.to_string()))?;
    if contains_null(&value) {
        return Err(Error::Data("parameters contain non-finite values".into()));
    }
    let mut bytes = serde_json::to_vec_pretty(&value).map_err(|e| Error::Format(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn contains_null(v: &serde_json::Value) -> bool {
    match v {
        serde_json::Value::Null => true,
        serde_json::Value::Array(a) => a.iter().any(contains_null),
        serde_json::Value::Object(o) => o.values().any(contains_null),
        _ => false,
    }
}

pub fn decode_params<T: for<'de> Deserialize<'de>>(bytes: &[u8]) -> Result<T> {
    let value: serde_json::Value =
        serde_json::from_slice(bytes).map_err(|e| Error::Format(format!("parameter file: {e}")))?;
    match value.get("schema_version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == u64::from(PARAMS_SCHEMA_VERSION) => {}
        Some(v) => {
            return Err(Error::Format(format!(
                "parameter schema version {v}, expected {PARAMS_SCHEMA_VERSION}"
            )))
        }
        None => return Err(Error::Format("parameter file has no schema_version".into())),
    }
    let doc: ParamsFileIn<T> =
        serde_json::from_value(value).map_err(|e| Error::Format(format!("parameter file: {e}")))?;
    Ok(doc.model)
}

pub fn load_params<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_params(&bytes)
}
