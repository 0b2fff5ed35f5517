//! Named parameter tensors.
//!
//! Vectors are stored as `1 × d` matrices so every tensor shares one type.
//! Names are dotted paths (`encoder.blocks.0.attn.q.weight`); the optimizer
//! derives its parameter groups from them.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::NetworkConfig;
use crate::error::{CapiError, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Array2<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter '{name}'"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<f64>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Same names and shapes as `other`.
    pub fn same_shapes(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(other.tensors.iter())
                .all(|((na, a), (nb, b))| na == nb && a.dim() == b.dim())
    }

    pub fn check_same_shapes(&self, other: &ParamSet) -> Result<()> {
        if self.same_shapes(other) {
            Ok(())
        } else {
            Err(CapiError::InvalidShape(
                "parameter sets differ in names or shapes".into(),
            ))
        }
    }

    pub fn into_inner(self) -> BTreeMap<String, Array2<f64>> {
        self.tensors
    }

    pub fn from_map(tensors: BTreeMap<String, Array2<f64>>) -> Self {
        Self { tensors }
    }

    /// Splits off every tensor whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .map(|(n, t)| (n.clone(), t.clone()))
                .collect(),
        }
    }
}

/// `U(±sqrt(6 / (fan_in + fan_out)))` for an `out × in` weight.
pub fn xavier_uniform(out_dim: usize, in_dim: usize, rng: &mut impl Rng) -> Array2<f64> {
    let a = (6.0 / (in_dim + out_dim) as f64).sqrt();
    Array2::from_shape_fn((out_dim, in_dim), |_| rng.random_range(-a..a))
}

/// Normal(0, std) truncated to ±2·std by resampling.
pub fn trunc_normal(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Array2<f64> {
    let n = Normal::new(0.0, std).expect("std must be positive");
    Array2::from_shape_fn((rows, cols), |_| loop {
        let v: f64 = n.sample(rng);
        if v.abs() <= 2.0 * std {
            break v;
        }
    })
}

fn ones(d: usize) -> Array2<f64> {
    Array2::ones((1, d))
}

pub const ENCODER: &str = "encoder";
pub const PREDICTOR: &str = "predictor";
pub const HEAD: &str = "head";

/// Encoder parameters: patch embedding, registers, pre-norm blocks, final norm.
pub fn init_encoder(cfg: &NetworkConfig, rng: &mut impl Rng) -> ParamSet {
    let d = cfg.enc_dim;
    let hidden = cfg.enc_hidden();
    let mut p = ParamSet::new();
    p.insert(
        format!("{ENCODER}.patch_embed.weight"),
        xavier_uniform(d, cfg.patch_dim(), rng),
    );
    if cfg.n_reg > 0 {
        p.insert(
            format!("{ENCODER}.registers"),
            trunc_normal(cfg.n_reg, d, 0.02, rng),
        );
    }
    for i in 0..cfg.enc_depth {
        let b = format!("{ENCODER}.blocks.{i}");
        p.insert(format!("{b}.norm1.weight"), ones(d));
        for proj in ["q", "k", "v", "proj"] {
            p.insert(format!("{b}.attn.{proj}.weight"), xavier_uniform(d, d, rng));
        }
        p.insert(format!("{b}.norm2.weight"), ones(d));
        p.insert(
            format!("{b}.mlp.fc1.weight"),
            xavier_uniform(hidden, d, rng),
        );
        p.insert(
            format!("{b}.mlp.fc2.weight"),
            xavier_uniform(d, hidden, rng),
        );
    }
    p.insert(format!("{ENCODER}.norm.weight"), ones(d));
    p
}

/// Cross-attention predictor: a learned mask query and blocks whose keys and
/// values are projected from the encoder output.
pub fn init_predictor(cfg: &NetworkConfig, rng: &mut impl Rng) -> ParamSet {
    let (d, e) = (cfg.pred_dim, cfg.enc_dim);
    let hidden = cfg.pred_hidden();
    let mut p = ParamSet::new();
    p.insert(
        format!("{PREDICTOR}.mask_token"),
        trunc_normal(1, d, 0.02, rng),
    );
    for i in 0..cfg.pred_depth {
        let b = format!("{PREDICTOR}.blocks.{i}");
        p.insert(format!("{b}.norm1.weight"), ones(d));
        p.insert(format!("{b}.attn.q.weight"), xavier_uniform(d, d, rng));
        p.insert(format!("{b}.attn.k.weight"), xavier_uniform(d, e, rng));
        p.insert(format!("{b}.attn.v.weight"), xavier_uniform(d, e, rng));
        p.insert(format!("{b}.attn.proj.weight"), xavier_uniform(d, d, rng));
        p.insert(format!("{b}.norm2.weight"), ones(d));
        p.insert(
            format!("{b}.mlp.fc1.weight"),
            xavier_uniform(hidden, d, rng),
        );
        p.insert(
            format!("{b}.mlp.fc2.weight"),
            xavier_uniform(d, hidden, rng),
        );
    }
    p.insert(format!("{PREDICTOR}.norm.weight"), ones(d));
    p
}

/// Linear student head mapping predictions to prototype logits.
pub fn init_head(cfg: &NetworkConfig, prototypes: usize, rng: &mut impl Rng) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert(
        format!("{HEAD}.weight"),
        xavier_uniform(prototypes, cfg.pred_dim, rng),
    );
    p
}

pub fn is_norm(name: &str) -> bool {
    name.contains("norm")
}

pub fn is_patch_embed(name: &str) -> bool {
    name.contains("patch_embed")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn inventory_has_no_biases_or_layerscale() {
        let cfg = NetworkConfig::toy();
        let mut rng = seeded(0);
        for set in [
            init_encoder(&cfg, &mut rng),
            init_predictor(&cfg, &mut rng),
            init_head(&cfg, 64, &mut rng),
        ] {
            for name in set.names() {
                assert!(!name.contains("bias"), "{name}");
                assert!(
                    !name.contains("ls") && !name.contains("gamma") && !name.contains("scale"),
                    "{name}"
                );
            }
        }
    }

    #[test]
    fn xavier_bounds() {
        let w = xavier_uniform(30, 10, &mut seeded(1));
        let a = (6.0f64 / 40.0).sqrt();
        assert!(w.iter().all(|v| v.abs() < a));
        let t = trunc_normal(50, 50, 0.02, &mut seeded(2));
        assert!(t.iter().all(|v| v.abs() <= 0.04));
    }

    #[test]
    fn toy_encoder_size() {
        // 64·192 embedding + 4·64 registers + 4 blocks · (2·64 + 4·64² + 2·64·256) + 64
        let p = init_encoder(&NetworkConfig::toy(), &mut seeded(3));
        assert_eq!(p.numel(), 209_728);
    }
}
