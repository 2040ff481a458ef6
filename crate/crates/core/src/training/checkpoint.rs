//! Checkpoint container: one UTF-8 JSON header line, then the raw
//! little-endian `f32` payload of every array in header order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::classifier::{SparseClassifier, CLASSIFIER_W};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{numel, Array};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub config: TrainConfig,
    /// Epoch (1-based, within its phase) the weights were taken from; 0 for an untrained model.
    pub epoch: usize,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    byte_offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelEcho {
    resolution: usize,
    pos_grid: [usize; 2],
    reg_order: u32,
    class_names: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigEcho {
    train: TrainConfig,
    model: ModelEcho,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    arrays: Vec<ArrayEntry>,
    config: ConfigEcho,
    epoch: usize,
    metrics: BTreeMap<String, f64>,
}

fn named_arrays(model: &Model) -> Vec<(&str, &Array)> {
    let mut out: Vec<(&str, &Array)> = model.encoder.params.iter().map(|(k, v)| (k.as_str(), v)).collect();
    out.push((CLASSIFIER_W, &model.classifier.weights));
    out
}

pub fn encode_checkpoint(c: &Checkpoint) -> Result<Vec<u8>> {
    if c.metrics.values().any(|v| !v.is_finite()) {
        return Err(Error::format("metrics", "metric values must be finite"));
    }
    let arrays = named_arrays(&c.model);
    let mut entries = Vec::with_capacity(arrays.len());
    let mut offset = 0;
    for (name, a) in &arrays {
        entries.push(ArrayEntry {
            name: name.to_string(),
            shape: a.shape().to_vec(),
            dtype: "f32".into(),
            byte_offset: offset,
        });
        offset += a.len() * 4;
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        arrays: entries,
        config: ConfigEcho {
            train: c.config.clone(),
            model: ModelEcho {
                resolution: c.model.resolution,
                pos_grid: [c.model.encoder.pos_grid.0, c.model.encoder.pos_grid.1],
                reg_order: c.model.classifier.reg_order,
                class_names: c.model.classifier.class_names.clone(),
            },
        },
        epoch: c.epoch,
        metrics: c.metrics.clone(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.reserve(offset);
    for (_, a) in arrays {
        for v in a.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format("header", "missing newline after the JSON header"))?;
    let raw: serde_json::Value =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::format("header", e.to_string()))?;
    match raw.get("format_version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => return Err(Error::format("format_version", format!("expected {FORMAT_VERSION}, found {v}"))),
        None => return Err(Error::format("format_version", "missing or not an integer")),
    }
    if let Some(arrays) = raw.get("arrays").and_then(serde_json::Value::as_array) {
        for a in arrays {
            let dtype = a.get("dtype").and_then(serde_json::Value::as_str).unwrap_or("<missing>");
            if dtype != "f32" {
                return Err(Error::format("dtype", format!("unsupported dtype {dtype}")));
            }
        }
    }
    let header: Header = serde_json::from_value(raw).map_err(|e| Error::format("header", e.to_string()))?;
    let payload = &bytes[nl + 1..];

    let mut arrays: BTreeMap<String, Array> = BTreeMap::new();
    for (i, e) in header.arrays.iter().enumerate() {
        let end = header.arrays.get(i + 1).map_or(payload.len(), |n| n.byte_offset);
        let span = end.checked_sub(e.byte_offset).filter(|_| e.byte_offset <= payload.len());
        let want = numel(&e.shape) * 4;
        match span {
            Some(s) if s == want => {}
            _ if e.byte_offset + want > payload.len() => {
                return Err(Error::format(
                    "payload",
                    format!("truncated: {} needs bytes {}..{} of {}", e.name, e.byte_offset, e.byte_offset + want, payload.len()),
                ))
            }
            _ => {
                return Err(Error::format(
                    "shape",
                    format!("{} declares {:?} ({want} bytes) but spans {}", e.name, e.shape, end as i64 - e.byte_offset as i64),
                ))
            }
        }
        let data = payload[e.byte_offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if arrays.insert(e.name.clone(), Array::new(e.shape.clone(), data)?).is_some() {
            return Err(Error::format("arrays", format!("duplicate array {}", e.name)));
        }
    }

    let train = header.config.train;
    let m = header.config.model;
    let weights = arrays
        .remove(CLASSIFIER_W)
        .ok_or_else(|| Error::format("arrays", format!("missing {CLASSIFIER_W}")))?;
    if weights.data().iter().any(|&w| !(w >= 0.0)) {
        return Err(Error::format(CLASSIFIER_W, "classifier weights must be non-negative"));
    }
    let classifier = SparseClassifier::new(weights, m.reg_order, m.class_names)
        .map_err(|e| Error::format(CLASSIFIER_W, e.to_string()))?;

    let p = train.encoder.patch_size;
    if m.pos_grid[0] != m.pos_grid[1] {
        return Err(Error::format("pos_grid", "positional grid must be square"));
    }
    let reference = Encoder::init(train.encoder.clone(), m.pos_grid[0] * p, &mut ChaCha8Rng::seed_from_u64(0))
        .map_err(|e| Error::format("config", e.to_string()))?;
    let expected: Vec<(&String, &[usize])> = reference.params.iter().map(|(k, v)| (k, v.shape())).collect();
    let found: Vec<(&String, &[usize])> = arrays.iter().map(|(k, v)| (k, v.shape())).collect();
    if expected != found {
        return Err(Error::format("arrays", "encoder arrays do not match the configured architecture"));
    }
    let encoder = Encoder {
        config: train.encoder.clone(),
        params: arrays,
        pos_grid: (m.pos_grid[0], m.pos_grid[1]),
    };
    let model = Model::new(encoder, classifier, m.resolution).map_err(|e| Error::format("config", e.to_string()))?;
    Ok(Checkpoint {
        model,
        config: train,
        epoch: header.epoch,
        metrics: header.metrics,
    })
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(c)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
