//! Attentive pooling classifier: one learned query cross-attends to an
//! image's tokens, followed by a linear map to classes.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::bank::{FeatureBank, Split};
use super::report::{accuracy, GridPoint, ProbeMetric, ProbeReport};
use crate::autograd::{AttnGroup, Tape, Var};
use crate::error::{CapiError, Result};
use crate::network::params::{trunc_normal, xavier_uniform};
use crate::network::ParamSet;
use crate::optim::{AdamW, GroupScale};
use crate::rng::substream;
use crate::schedule::Schedule;

const QUERY: &str = "probe.query";
const KEY_W: &str = "probe.key.weight";
const KEY_B: &str = "probe.key.bias";
const VALUE_W: &str = "probe.value.weight";
const VALUE_B: &str = "probe.value.bias";
const CLASSIFIER: &str = "probe.classifier.weight";

/// `2d² + (3 + c)d`: key and value weights, the query, key and value biases,
/// and a bias-free `c × d` classifier.
pub fn attentive_param_count(dim: usize, n_classes: usize) -> usize {
    2 * dim * dim + (3 + n_classes) * dim
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentiveConfig {
    /// Width of each attention head. When the feature dim is not a multiple,
    /// the largest divisor of the dim below this width is used instead.
    pub head_width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub lr_grid: Vec<f64>,
    pub wd_grid: Vec<f64>,
    pub betas: (f64, f64),
    /// Fraction of training images held out for selection when the bank has
    /// no validation split.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for AttentiveConfig {
    fn default() -> Self {
        Self {
            head_width: 64,
            epochs: 10,
            batch_size: 64,
            warmup_fraction: 0.1,
            lr_grid: vec![1e-5, 2e-5, 5e-5, 1e-4, 2e-4, 5e-4, 1e-3, 2e-3, 5e-3, 1e-2],
            wd_grid: vec![5e-4, 1e-3, 5e-2],
            betas: (0.9, 0.999),
            holdout: 0.1,
            seed: 0,
        }
    }
}

impl AttentiveConfig {
    pub fn heads_for(&self, dim: usize) -> Result<usize> {
        if self.head_width == 0 || dim == 0 {
            return Err(CapiError::Config(
                "head width and feature dim must be positive".into(),
            ));
        }
        let width = (1..=self.head_width.min(dim))
            .rev()
            .find(|w| dim.is_multiple_of(*w))
            .unwrap_or(1);
        if width != self.head_width {
            log::warn!(
                "feature dim {dim} is not a multiple of {}; using head width {width}",
                self.head_width
            );
        }
        Ok(dim / width)
    }
}

/// Per-image token matrices with one label each.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTokens {
    pub tokens: Vec<Array2<f64>>,
    pub labels: Vec<usize>,
}

impl ImageTokens {
    /// Groups the bank's rows of one split by image, ordered by image id
    /// and, within an image, by position. An image takes its first row's label.
    pub fn from_bank(bank: &FeatureBank, split: Split) -> Self {
        let mut by_image: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for i in bank.indices(split) {
            by_image
                .entry(bank.provenance[i].image)
                .or_default()
                .push(i);
        }
        let mut tokens = Vec::with_capacity(by_image.len());
        let mut labels = Vec::with_capacity(by_image.len());
        for mut rows in by_image.into_values() {
            rows.sort_by_key(|&i| bank.provenance[i].position);
            labels.push(bank.labels[rows[0]]);
            tokens.push(bank.features.select(Axis(0), &rows));
        }
        Self { tokens, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn select(&self, idx: &[usize]) -> Self {
        Self {
            tokens: idx.iter().map(|&i| self.tokens[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentiveProbe {
    pub params: ParamSet,
    pub heads: usize,
    pub n_classes: usize,
}

impl AttentiveProbe {
    pub fn init(dim: usize, n_classes: usize, heads: usize, seed: u64) -> Self {
        let mut rng = substream(seed, "probe.init", 0);
        let mut params = ParamSet::new();
        params.insert(QUERY, trunc_normal(1, dim, 0.02, &mut rng));
        params.insert(KEY_W, xavier_uniform(dim, dim, &mut rng));
        params.insert(KEY_B, Array2::zeros((1, dim)));
        params.insert(VALUE_W, xavier_uniform(dim, dim, &mut rng));
        params.insert(VALUE_B, Array2::zeros((1, dim)));
        params.insert(CLASSIFIER, trunc_normal(n_classes, dim, 0.02, &mut rng));
        Self {
            params,
            heads,
            n_classes,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    fn forward(&self, tape: &mut Tape, images: &[Array2<f64>]) -> Var {
        let b = images.len();
        let x = tape.input(
            ndarray::concatenate(
                Axis(0),
                &images.iter().map(|m| m.view()).collect::<Vec<_>>(),
            )
            .expect("equal dims"),
        );
        let n = tape.value(x).nrows();
        let p = |tape: &mut Tape, name: &str| tape.param(name, self.params.get(name));
        let (wk, bk, wv, bv) = (
            p(tape, KEY_W),
            p(tape, KEY_B),
            p(tape, VALUE_W),
            p(tape, VALUE_B),
        );
        let (query, wc) = (p(tape, QUERY), p(tape, CLASSIFIER));
        let k = tape.linear(x, wk);
        let bk = tape.gather_rows(bk, vec![0; n]);
        let k = tape.add(k, bk);
        let v = tape.linear(x, wv);
        let bv = tape.gather_rows(bv, vec![0; n]);
        let v = tape.add(v, bv);
        let q = tape.gather_rows(query, vec![0; b]);
        let mut groups = Vec::with_capacity(b);
        let mut start = 0;
        for (i, m) in images.iter().enumerate() {
            groups.push(AttnGroup {
                queries: i..i + 1,
                keys: start..start + m.nrows(),
            });
            start += m.nrows();
        }
        let pooled = tape.attention(q, k, v, self.heads, groups);
        tape.linear(pooled, wc)
    }

    pub fn logits(&self, images: &[Array2<f64>]) -> Array2<f64> {
        let mut out = Array2::zeros((images.len(), self.n_classes));
        for (c, chunk) in images.chunks(256).enumerate() {
            let mut tape = Tape::no_grad();
            let l = self.forward(&mut tape, chunk);
            out.slice_mut(ndarray::s![c * 256..c * 256 + chunk.len(), ..])
                .assign(tape.value(l));
        }
        out
    }

    pub fn predict(&self, images: &[Array2<f64>]) -> Vec<usize> {
        self.logits(images)
            .axis_iter(Axis(0))
            .map(|r| crate::objective::argmax(r.iter().copied()))
            .collect()
    }
}

fn one_hot(labels: &[usize], c: usize) -> Array2<f64> {
    Array2::from_shape_fn((labels.len(), c), |(i, j)| {
        f64::from(u8::from(labels[i] == j))
    })
}

/// Trains one probe with a fixed lr and weight decay.
pub fn train_attentive(
    data: &ImageTokens,
    n_classes: usize,
    lr: f64,
    weight_decay: f64,
    cfg: &AttentiveConfig,
) -> Result<AttentiveProbe> {
    let dim = data.tokens.first().map(Array2::ncols).unwrap_or(0);
    let mut probe = AttentiveProbe::init(dim, n_classes, cfg.heads_for(dim)?, cfg.seed);
    let batch = cfg.batch_size.max(1).min(data.len());
    let per_epoch = data.len().div_ceil(batch);
    let schedule = Schedule {
        warmup_fraction: cfg.warmup_fraction,
        cosine_truncation: 0.0,
        ..Schedule::new(per_epoch * cfg.epochs.max(1), lr)
    };
    schedule.validate()?;
    let mut opt = AdamW::new(cfg.betas.0, cfg.betas.1, weight_decay);
    let mut step = 0;
    for epoch in 0..cfg.epochs.max(1) {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut substream(cfg.seed, "probe.shuffle", epoch as u64));
        for idx in order.chunks(batch) {
            let mini = data.select(idx);
            let mut tape = Tape::new();
            let logits = probe.forward(&mut tape, &mini.tokens);
            let loss = tape.soft_cross_entropy(logits, one_hot(&mini.labels, n_classes), 1.0);
            let value = tape.value(loss)[[0, 0]];
            if !value.is_finite() {
                return Err(CapiError::NonFinite(format!(
                    "attentive probe loss at step {step}"
                )));
            }
            let grads = tape.backward(loss);
            let rate = schedule.lr_at(step)?;
            opt.begin_step();
            let names: Vec<String> = probe.params.names().cloned().collect();
            for name in names {
                let Some(g) = grads.param(&name) else {
                    continue;
                };
                let decayed = name == KEY_W || name == VALUE_W || name == CLASSIFIER;
                let group = GroupScale {
                    lr: 1.0,
                    weight_decay: if decayed { 1.0 } else { 0.0 },
                };
                let param = probe.params.get_mut(&name).expect("own parameter");
                opt.update(&name, param, g, rate, group)?;
            }
            step += 1;
        }
    }
    Ok(probe)
}

/// Grid search over lr × weight decay. The bank's rows are patch tokens
/// grouped into images by provenance; images take their rows' label.
/// Selection uses the validation split, or a seeded holdout of the train
/// images when there is none.
pub fn attentive_probe_train(
    bank: &FeatureBank,
    n_classes: usize,
    cfg: &AttentiveConfig,
) -> Result<(AttentiveProbe, ProbeReport)> {
    if n_classes < 2 {
        return Err(CapiError::Config(format!(
            "attentive probe needs at least 2 classes, got {n_classes}"
        )));
    }
    let mut bank = bank.clone();
    if bank.indices(Split::Val).is_empty() {
        bank.hold_out(cfg.holdout, cfg.seed);
    }
    let train = ImageTokens::from_bank(&bank, Split::Train);
    let val = ImageTokens::from_bank(&bank, Split::Val);
    if let Some(l) = train.labels.iter().find(|&&l| l >= n_classes) {
        return Err(CapiError::InvalidShape(format!(
            "label {l} outside {n_classes} classes"
        )));
    }
    if let Some(empty) = (0..n_classes).find(|c| !train.labels.contains(c)) {
        return Err(CapiError::DegenerateInput(format!(
            "class {empty} has no training images"
        )));
    }
    if val.is_empty() {
        return Err(CapiError::DegenerateInput("no validation images".into()));
    }
    let mut probes = Vec::new();
    let mut points = Vec::new();
    for &lr in &cfg.lr_grid {
        for &wd in &cfg.wd_grid {
            let probe = train_attentive(&train, n_classes, lr, wd, cfg)?;
            points.push(GridPoint::new(
                &[("lr", lr), ("weight_decay", wd)],
                accuracy(&probe.predict(&val.tokens), &val.labels),
            ));
            probes.push(probe);
        }
    }
    let mut report = ProbeReport::select("attentive", ProbeMetric::Accuracy, points)?;
    let probe = probes.swap_remove(report.selected);
    let test = ImageTokens::from_bank(&bank, Split::Test);
    if !test.is_empty() {
        report.test_metric = Some(accuracy(&probe.predict(&test.tokens), &test.labels));
    }
    Ok((probe, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probes::bank::Provenance;
    use crate::rng::seeded;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn parameter_count_formula() {
        for (d, c, want) in [(64, 4, 8_640), (256, 10, 134_400), (1024, 1000, 3_124_224)] {
            assert_eq!(attentive_param_count(d, c), want);
            assert_eq!(AttentiveProbe::init(d, c, d / 64, 0).param_count(), want);
        }
    }

    #[test]
    fn head_width_fallback() {
        let cfg = AttentiveConfig::default();
        assert_eq!(cfg.heads_for(1024).unwrap(), 16);
        assert_eq!(cfg.heads_for(64).unwrap(), 1);
        // 96 = 2 × 48
        assert_eq!(cfg.heads_for(96).unwrap(), 2);
    }

    /// Images of four patch tokens; each class owns two Gaussian blobs.
    fn blob_bank(images: usize, dim: usize, seed: u64) -> FeatureBank {
        let mut rng = seeded(seed);
        let centers = Array2::from_shape_fn((8, dim), |_| rng.random_range(-3.0..3.0));
        let noise = Normal::new(0.0, 0.3).unwrap();
        let mut rows = Vec::new();
        let (mut labels, mut prov) = (Vec::new(), Vec::new());
        for img in 0..images {
            let class = img % 4;
            for pos in 0..4 {
                let center = centers.row(class * 2 + rng.random_range(0..2));
                rows.extend(center.iter().map(|&c| c + noise.sample(&mut rng)));
                labels.push(class);
                prov.push(Provenance {
                    image: img,
                    position: Some(pos),
                });
            }
        }
        let n = labels.len();
        FeatureBank::new(
            Array2::from_shape_vec((n, dim), rows).unwrap(),
            labels,
            vec![Split::Train; n],
            prov,
        )
        .unwrap()
    }

    #[test]
    fn separable_blobs_are_learned() {
        let bank = blob_bank(200, 64, 1);
        let cfg = AttentiveConfig {
            lr_grid: vec![1e-3, 1e-2],
            wd_grid: vec![5e-4],
            batch_size: 32,
            ..AttentiveConfig::default()
        };
        let (probe, report) = attentive_probe_train(&bank, 4, &cfg).unwrap();
        assert_eq!(report.grid.len(), 2);
        assert!(report.selected_point().val_metric >= 0.99, "{report:?}");
        assert_eq!(probe.param_count(), 8_640);
        // same inputs, same selection
        let (_, again) = attentive_probe_train(&bank, 4, &cfg).unwrap();
        assert_eq!(again, report);
    }

    #[test]
    fn missing_class_is_rejected() {
        let bank = blob_bank(40, 8, 2);
        let cfg = AttentiveConfig {
            head_width: 8,
            lr_grid: vec![1e-3],
            wd_grid: vec![5e-4],
            ..AttentiveConfig::default()
        };
        assert!(matches!(
            attentive_probe_train(&bank, 5, &cfg),
            Err(CapiError::DegenerateInput(_))
        ));
        assert!(attentive_probe_train(&bank, 1, &cfg).is_err());
    }
}
