//! Checkpoint archives: parameters, Adam moments, step counters, random
//! stream positions and a fingerprint of the configuration.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{TrainConfig, TrainState};
use crate::archive::{BlobReader, BlobWriter};
use crate::error::{Error, Result};
use crate::model::{ModelBundle, ModelConfig};
use crate::nn::ParamSet;
use crate::optim::AdamMoments;
use crate::rng::{StreamState, TrainRng};
use crate::scalar::Scalar;

const MAGIC: &str = "VEIL-CHECKPOINT v1";

/// Schedule-only settings that may change between a checkpoint and its resume.
const UNFINGERPRINTED: [&str; 4] = ["epochs", "max_generator_steps", "log_every", "checkpoint_every"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub generator_steps: u64,
    pub discriminator_steps: u64,
    pub fingerprint: String,
    /// The configuration the fingerprint was computed from.
    pub config: Value,
    pub model_config: ModelConfig,
    pub rng_seed: u64,
    pub rng_streams: Vec<StreamState>,
}

fn fingerprinted(model: &ModelConfig, train: &TrainConfig) -> Result<Value> {
    let mut training = serde_json::to_value(train)?;
    if let Value::Object(map) = &mut training {
        for k in UNFINGERPRINTED {
            map.remove(k);
        }
    }
    Ok(serde_json::json!({ "model": serde_json::to_value(model)?, "training": training }))
}

/// SHA-256 of the canonical JSON form of the run-defining configuration.
pub fn fingerprint(model: &ModelConfig, train: &TrainConfig) -> Result<String> {
    let v = fingerprinted(model, train)?;
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(&v)?)))
}

/// One line per differing leaf: `path: checkpoint=.. current=..`.
pub fn config_diff(checkpoint: &Value, current: &Value) -> Vec<String> {
    fn walk(path: &str, a: Option<&Value>, b: Option<&Value>, out: &mut Vec<String>) {
        match (a, b) {
            (Some(Value::Object(x)), Some(Value::Object(y))) => {
                let mut keys: Vec<_> = x.keys().chain(y.keys()).collect();
                keys.sort();
                keys.dedup();
                for k in keys {
                    let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                    walk(&p, x.get(k), y.get(k), out);
                }
            }
            (a, b) if a != b => {
                let show = |v: Option<&Value>| v.map_or("<absent>".to_string(), Value::to_string);
                out.push(format!("{path}: checkpoint={} current={}", show(a), show(b)));
            }
            _ => {}
        }
    }
    let mut out = Vec::new();
    walk("", Some(checkpoint), Some(current), &mut out);
    out
}

fn push_set<T: Scalar>(w: &mut BlobWriter, prefix: &str, set: &ParamSet<T>) {
    for (name, v) in set.names.iter().zip(&set.values) {
        w.push(format!("{prefix}/{name}"), v.shape(), v.iter().map(|x| x.to_f32_lossy()));
    }
}

/// Writes `state` to `path`. Values are stored as `f32`; an `f32` state
/// round-trips bit-exactly.
pub fn save_checkpoint<T: Scalar>(state: &TrainState<T>, train: &TrainConfig, path: &Path) -> Result<()> {
    let model_config = state.model.config.clone();
    let header = CheckpointHeader {
        generator_steps: state.generator_steps,
        discriminator_steps: state.discriminator_steps,
        fingerprint: fingerprint(&model_config, train)?,
        config: fingerprinted(&model_config, train)?,
        model_config,
        rng_seed: state.rng.seed,
        rng_streams: state.rng.state(),
    };
    let mut w = BlobWriter::default();
    for ((_, params), (_, moments)) in state.model.partitions().into_iter().zip(&state.moments) {
        push_set(&mut w, "param", params);
        push_set(&mut w, "adam_m", &moments.m);
        push_set(&mut w, "adam_v", &moments.v);
    }
    w.write(path, MAGIC, &header)
}

fn fill_set<T: Scalar, H>(reader: &BlobReader<H>, prefix: &str, set: &mut ParamSet<T>, path: &Path) -> Result<()> {
    for (name, v) in set.names.iter().zip(set.values.iter_mut()) {
        let key = format!("{prefix}/{name}");
        let (shape, data) = reader.get(&key).ok_or_else(|| Error::Corrupt {
            path: path.to_path_buf(),
            reason: format!("missing tensor {key}"),
        })?;
        if shape != v.shape() {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                reason: format!("tensor {key} has shape {shape:?}, expected {:?}", v.shape()),
            });
        }
        *v = ArrayD::from_shape_vec(IxDyn(shape), data.iter().map(|&x| T::from_f32_exact(x)).collect())
            .expect("shape checked");
    }
    Ok(())
}

/// Reads only the header.
pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    Ok(BlobReader::<CheckpointHeader>::read(path, MAGIC)?.header)
}

/// Restores a training state. When `expected` is given, the checkpoint's
/// configuration fingerprint must match it.
pub fn load_checkpoint<T: Scalar>(path: &Path, expected: Option<&TrainConfig>) -> Result<(TrainState<T>, CheckpointHeader)> {
    let reader: BlobReader<CheckpointHeader> = BlobReader::read(path, MAGIC)?;
    let header = reader.header.clone();
    if let Some(train) = expected {
        let current = fingerprint(&header.model_config, train)?;
        if current != header.fingerprint {
            let diff = config_diff(&header.config, &fingerprinted(&header.model_config, train)?);
            return Err(Error::FingerprintMismatch { diff: diff.join("\n") });
        }
    }
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    // Parameter shapes come from the config; the values are overwritten below.
    let mut model: ModelBundle<T> = ModelBundle::init(header.model_config.clone(), &mut ChaCha8Rng::seed_from_u64(0))
        .map_err(|e| corrupt(format!("model config: {e}")))?;
    let mut moments = Vec::new();
    let parts: Vec<_> = model.partitions().into_iter().map(|(p, _)| p).collect();
    for p in parts {
        let set = model.partition_mut(p).expect("listed partition");
        fill_set(&reader, "param", set, path)?;
        let mut m = AdamMoments::zeros_like(set);
        fill_set(&reader, "adam_m", &mut m.m, path)?;
        fill_set(&reader, "adam_v", &mut m.v, path)?;
        moments.push((p, m));
    }
    let rng = TrainRng::restore(header.rng_seed, &header.rng_streams)
        .ok_or_else(|| corrupt("unreadable random stream state".into()))?;
    let state = TrainState {
        model,
        moments,
        generator_steps: header.generator_steps,
        discriminator_steps: header.discriminator_steps,
        rng,
    };
    Ok((state, header))
}
