//! Training-state archives.
//!
//! A checkpoint holds both parameter sets, the centroids, both optimizers'
//! moments, the MI window and, as metadata, the step, seed and configs.
//! Saving a loaded checkpoint reproduces the original bytes.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::{TrainConfig, TrainState, CENTROIDS};
use crate::archive::Archive;
use crate::error::{CapiError, Result};
use crate::network::{NetworkConfig, ParamSet};
use crate::optim::{AdamW, Moments};

const FORMAT: &str = "capi-train-state";

#[derive(Serialize, Deserialize)]
struct OptimMeta {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    steps: u64,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    format: String,
    step: u64,
    seed: u64,
    config_digest: String,
    network: NetworkConfig,
    train: TrainConfig,
    opt_network: OptimMeta,
    opt_centroids: OptimMeta,
    mi_window: usize,
}

/// Hex SHA-256 of the configs' canonical JSON.
pub fn config_digest(net: &NetworkConfig, cfg: &TrainConfig) -> Result<String> {
    let text = serde_json::to_string(&json!({ "network": net, "train": cfg }))?;
    Ok(Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

fn put_optim(archive: &mut Archive, prefix: &str, opt: &AdamW) -> OptimMeta {
    for (name, m) in &opt.moments {
        archive.insert(format!("{prefix}.first.{name}"), m.first.clone());
        archive.insert(format!("{prefix}.second.{name}"), m.second.clone());
    }
    OptimMeta {
        beta1: opt.beta1,
        beta2: opt.beta2,
        eps: opt.eps,
        weight_decay: opt.weight_decay,
        steps: opt.steps,
    }
}

fn take_optim(archive: &mut Archive, prefix: &str, meta: &OptimMeta) -> Result<AdamW> {
    let mut first = archive.take_prefixed(&format!("{prefix}.first."));
    let second = archive.take_prefixed(&format!("{prefix}.second."));
    let mut opt = AdamW::new(meta.beta1, meta.beta2, meta.weight_decay);
    opt.eps = meta.eps;
    opt.steps = meta.steps;
    for (name, v) in second {
        let m = first.remove(&name).ok_or_else(|| {
            CapiError::Archive(format!(
                "{prefix}: second moment without first for '{name}'"
            ))
        })?;
        opt.moments.insert(
            name,
            Moments {
                first: m,
                second: v,
            },
        );
    }
    if let Some(name) = first.keys().next() {
        return Err(CapiError::Archive(format!(
            "{prefix}: first moment without second for '{name}'"
        )));
    }
    Ok(opt)
}

pub fn to_archive(state: &TrainState, net: &NetworkConfig, cfg: &TrainConfig) -> Result<Archive> {
    let mut a = Archive::default();
    for (name, t) in state.network.iter() {
        a.insert(format!("student.{name}"), t.clone());
    }
    for (name, t) in state.teacher.iter() {
        a.insert(format!("teacher.{name}"), t.clone());
    }
    a.insert(CENTROIDS, state.centroids.clone());
    let opt_network = put_optim(&mut a, "optim.network", &state.opt_network);
    let opt_centroids = put_optim(&mut a, "optim.centroids", &state.opt_centroids);
    for (i, counts) in state.mi_window.iter().enumerate() {
        a.insert(format!("mi_window.{i:06}"), counts.clone());
    }
    a.meta = serde_json::to_value(Meta {
        format: FORMAT.into(),
        step: state.step,
        seed: state.seed,
        config_digest: config_digest(net, cfg)?,
        network: net.clone(),
        train: cfg.clone(),
        opt_network,
        opt_centroids,
        mi_window: state.mi_window.len(),
    })?;
    Ok(a)
}

pub fn from_archive(mut a: Archive) -> Result<(TrainState, NetworkConfig, TrainConfig)> {
    let meta: Meta = serde_json::from_value(a.meta.clone())
        .map_err(|e| CapiError::Archive(format!("checkpoint metadata: {e}")))?;
    if meta.format != FORMAT {
        return Err(CapiError::Archive(format!(
            "not a training checkpoint (format '{}')",
            meta.format
        )));
    }
    if config_digest(&meta.network, &meta.train)? != meta.config_digest {
        return Err(CapiError::Archive("config digest mismatch".into()));
    }
    let network = ParamSet::from_map(a.take_prefixed("student."));
    let teacher = ParamSet::from_map(a.take_prefixed("teacher."));
    teacher.check_same_shapes(&super::student_encoder(&network))?;
    let centroids = a.take(CENTROIDS)?;
    let opt_network = take_optim(&mut a, "optim.network", &meta.opt_network)?;
    let opt_centroids = take_optim(&mut a, "optim.centroids", &meta.opt_centroids)?;
    let mi_window: VecDeque<_> = a.take_prefixed("mi_window.").into_values().collect();
    if mi_window.len() != meta.mi_window {
        return Err(CapiError::Archive("mi window length mismatch".into()));
    }
    if let Some(name) = a.tensors.keys().next() {
        return Err(CapiError::Archive(format!("unexpected tensor '{name}'")));
    }
    let state = TrainState {
        network,
        teacher,
        centroids,
        opt_network,
        opt_centroids,
        step: meta.step,
        seed: meta.seed,
        mi_window,
    };
    Ok((state, meta.network, meta.train))
}

pub fn to_bytes(state: &TrainState, net: &NetworkConfig, cfg: &TrainConfig) -> Result<Vec<u8>> {
    to_archive(state, net, cfg)?.to_bytes()
}

pub fn from_bytes(bytes: &[u8]) -> Result<(TrainState, NetworkConfig, TrainConfig)> {
    from_archive(Archive::from_bytes(bytes)?)
}

pub fn save(path: &Path, state: &TrainState, net: &NetworkConfig, cfg: &TrainConfig) -> Result<()> {
    std::fs::write(path, to_bytes(state, net, cfg)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(TrainState, NetworkConfig, TrainConfig)> {
    from_bytes(&std::fs::read(path)?)
}
