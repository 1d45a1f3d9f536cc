//! Checkpoint directories: `manifest.json` describing every tensor and
//! `payload.bin` holding their values as little-endian f64.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Adam, RegistryEntry, TrainState};
use crate::config::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{ParamStore, UniMs};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
pub const PAYLOAD: &str = "payload.bin";
const FORMAT: &str = "unims-checkpoint-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
    fnv1a: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    step: usize,
    adam_t: u64,
    config: ModelConfig,
    train: TrainConfig,
    registry: Vec<RegistryEntry>,
    tensors: Vec<TensorEntry>,
}

/// A restored model with its optimizer state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: UniMs,
    pub state: TrainState,
    pub train: TrainConfig,
}

fn fnv1a(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

pub fn save_checkpoint(model: &UniMs, state: &TrainState, train: &TrainConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    let named = model
        .params
        .iter()
        .map(|(_, n, t)| (n.to_string(), t))
        .chain(model.params.iter().zip(&state.adam.m).map(|((_, n, _), t)| (format!("adam.m.{n}"), t)))
        .chain(model.params.iter().zip(&state.adam.v).map(|((_, n, _), t)| (format!("adam.v.{n}"), t)));
    for (name, t) in named {
        let start = payload.len();
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: start,
            len: t.len(),
            fnv1a: fnv1a(&payload[start..]),
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        step: state.step,
        adam_t: state.adam.t,
        config: model.config.clone(),
        train: train.clone(),
        registry: state.registry.clone(),
        tensors,
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    let mpath = dir.join(MANIFEST);
    fs::write(&mpath, text + "\n").map_err(|e| Error::io(&mpath, e))?;
    let ppath = dir.join(PAYLOAD);
    fs::write(&ppath, payload).map_err(|e| Error::io(&ppath, e))
}

/// Names the first field where `found` differs from `expected`.
fn first_difference(prefix: &str, expected: &Value, found: &Value) -> Option<String> {
    match (expected, found) {
        (Value::Object(e), Value::Object(f)) => e.iter().find_map(|(k, ev)| {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match f.get(k) {
                Some(fv) => first_difference(&path, ev, fv),
                None => Some(format!("{path} is missing")),
            }
        }),
        _ if expected != found => Some(format!("{prefix} is {found} but expected {expected}")),
        _ => None,
    }
}

/// Loads a checkpoint. With `expected`, the stored model configuration must
/// match it exactly.
pub fn load_checkpoint(dir: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))?;
    if manifest.format != FORMAT {
        return Err(Error::Format(format!("unknown checkpoint format '{}'", manifest.format)));
    }
    if let Some(want) = expected {
        if let Some(diff) = first_difference("", &serde_json::to_value(want)?, &serde_json::to_value(&manifest.config)?) {
            return Err(Error::Config(format!("checkpoint config mismatch: {diff}")));
        }
    }
    let ppath = dir.join(PAYLOAD);
    let payload = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;

    let mut read = Vec::with_capacity(manifest.tensors.len());
    let mut end = 0;
    for e in &manifest.tensors {
        let bytes = e.len * 8;
        if e.shape.iter().product::<usize>() != e.len {
            return Err(Error::Integrity(format!("tensor '{}': shape {:?} does not hold {} values", e.name, e.shape, e.len)));
        }
        if e.offset != end || e.offset + bytes > payload.len() {
            return Err(Error::Integrity(format!(
                "tensor '{}': bytes {}..{} not available in payload of {}",
                e.name,
                e.offset,
                e.offset + bytes,
                payload.len()
            )));
        }
        let raw = &payload[e.offset..e.offset + bytes];
        if fnv1a(raw) != e.fnv1a {
            return Err(Error::Integrity(format!("tensor '{}': payload checksum mismatch", e.name)));
        }
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        read.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
        end = e.offset + bytes;
    }
    if end != payload.len() {
        let last = manifest.tensors.last().map_or("<none>", |e| e.name.as_str());
        return Err(Error::Integrity(format!(
            "payload has {} trailing bytes after tensor '{last}'",
            payload.len() - end
        )));
    }

    let n = read.len() / 3;
    if read.len() != 3 * n {
        return Err(Error::Integrity(format!("{} tensors is not params plus two moment sets", read.len())));
    }
    let mut it = read.into_iter();
    let mut params = ParamStore::new();
    let mut names = Vec::with_capacity(n);
    for (name, t) in it.by_ref().take(n) {
        names.push(name.clone());
        params.add(name, t);
    }
    let moments = |kind: &str, it: &mut dyn Iterator<Item = (String, Tensor)>| -> Result<Vec<Tensor>> {
        names
            .iter()
            .map(|p| {
                let (name, t) = it.next().expect("counted");
                let want = format!("adam.{kind}.{p}");
                if name != want {
                    return Err(Error::Integrity(format!("tensor '{name}' found where '{want}' belongs")));
                }
                Ok(t)
            })
            .collect()
    };
    let m = moments("m", &mut it)?;
    let v = moments("v", &mut it)?;
    for ((p, m), v) in params.iter().zip(&m).zip(&v) {
        if p.2.shape() != m.shape() || p.2.shape() != v.shape() {
            return Err(Error::Integrity(format!("moments of '{}' have the wrong shape", p.1)));
        }
    }
    let model = UniMs::from_params(manifest.config, params)?;
    Ok(Checkpoint {
        model,
        state: TrainState {
            step: manifest.step,
            adam: Adam { m, v, t: manifest.adam_t },
            registry: manifest.registry,
        },
        train: manifest.train,
    })
}
