//! One pretraining step and the state it updates.
//!
//! A step runs the EMA teacher on the full images, turns its patch features
//! into balanced soft assignments, and trains the student encoder, predictor
//! and head to predict those assignments at masked positions. The centroids
//! are fitted separately to the teacher features with their own optimizer.

pub mod checkpoint;
pub mod run;

use std::collections::{BTreeMap, VecDeque};

use ndarray::{Array2, Array3, Axis};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{CapiError, Result};
use crate::masking::{
    generate_mask, sample_prediction_targets, Coord, LatticeShape, MaskSpec, MaskStrategy,
};
use crate::network::params::{xavier_uniform, ENCODER};
use crate::network::tokens::raster_coords;
use crate::network::{
    ema_update, embed_patches, encoder_forward, extract_patches, head_forward, init_encoder,
    init_head, init_predictor, predictor_forward, Mode, NetworkConfig, ParamSet, PredictorDepth,
};
use crate::objective::{
    clustering_loss_and_grad, compute_logits, hard_joint, mutual_information,
    mutual_information_shuffle_corrected, sinkhorn_positionwise, sinkhorn_standard, soft_joint,
    Assignments, ClusterHead,
};
use crate::optim::{AdamW, BackboneGroups, GroupScale};
use crate::rng::substream;
use crate::schedule::Schedule;

pub use run::{
    pretrain, pretrain_until, sample_batch, Dataset, DirectorySink, MemorySink, TrainSink,
};

/// Parameter name of the centroid matrix in optimizer state and archives.
pub const CENTROIDS: &str = "centroids";

/// Permuted tables averaged for the MI null baseline.
pub const MI_SHUFFLES: usize = 8;

/// How teacher assignments are balanced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SinkhornVariant {
    /// Balanced separately at every lattice position.
    Positionwise,
    /// Balanced over all tokens of the batch at once.
    Standard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub adam_betas: (f64, f64),
    pub clustering_lr_ratio: f64,
    pub patch_embed_lr_ratio: f64,
    pub norm_wd_ratio: f64,
    pub mask: MaskSpec,
    pub n_pred: usize,
    pub image_size: usize,
    pub crop_scale: (f64, f64),
    pub hflip: bool,
    pub prototypes: usize,
    pub tau_student: f64,
    pub tau_teacher: f64,
    pub sk_iters: usize,
    pub sinkhorn: SinkhornVariant,
    /// Steps of hard assignment counts pooled for the position MI estimate.
    pub mi_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 0.1,
            adam_betas: (0.9, 0.95),
            clustering_lr_ratio: 0.5,
            patch_embed_lr_ratio: 0.2,
            norm_wd_ratio: 0.1,
            mask: MaskSpec::with_default_ratio(MaskStrategy::InverseBlockRoll),
            n_pred: 7,
            image_size: 224,
            crop_scale: (0.6, 1.0),
            hflip: true,
            prototypes: 16384,
            tau_student: ClusterHead::STUDENT_TEMPERATURE,
            tau_teacher: ClusterHead::TEACHER_TEMPERATURE,
            sk_iters: ClusterHead::SK_ITERS,
            sinkhorn: SinkhornVariant::Positionwise,
            mi_window: 16,
        }
    }
}

impl TrainConfig {
    /// 32×32 images and 64 prototypes, matching [`NetworkConfig::toy`].
    pub fn toy() -> Self {
        Self {
            image_size: 32,
            prototypes: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self, net: &NetworkConfig) -> Result<()> {
        let bad = |m: String| Err(CapiError::Config(m));
        self.mask.validate()?;
        net.validate()?;
        if self.batch_size == 0 || self.n_pred == 0 || self.prototypes == 0 || self.mi_window == 0 {
            return bad("batch_size, n_pred, prototypes and mi_window must be positive".into());
        }
        for (name, v) in [
            ("lr", self.lr),
            ("clustering_lr_ratio", self.clustering_lr_ratio),
            ("patch_embed_lr_ratio", self.patch_embed_lr_ratio),
            ("norm_wd_ratio", self.norm_wd_ratio),
            ("tau_student", self.tau_student),
            ("tau_teacher", self.tau_teacher),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.weight_decay < 0.0 {
            return bad(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad(format!("adam betas {:?} outside [0, 1)", self.adam_betas));
        }
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!(
                "crop_scale {:?} must satisfy 0 < min <= max <= 1",
                self.crop_scale
            ));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(net.patch_size) {
            return bad(format!(
                "image_size {} not a multiple of patch size {}",
                self.image_size, net.patch_size
            ));
        }
        let side = self.image_size / net.patch_size;
        let lattice = LatticeShape::new(side, side)?;
        let masked = self.mask.masked_count(lattice);
        if self.n_pred > masked {
            return Err(CapiError::InsufficientTargets {
                requested: self.n_pred,
                available: masked,
            });
        }
        if masked == lattice.len() {
            return bad("mask ratio leaves no visible patch".into());
        }
        Ok(())
    }

    /// Warmup plus truncated cosine peaking at `lr`.
    pub fn schedule(&self, total_steps: usize) -> Schedule {
        Schedule::new(total_steps, self.lr)
    }

    pub fn backbone_groups(&self) -> BackboneGroups {
        BackboneGroups {
            patch_embed_lr_ratio: self.patch_embed_lr_ratio,
            norm_wd_ratio: self.norm_wd_ratio,
        }
    }

    pub fn cluster_head(&self, centroids: Array2<f64>) -> Result<ClusterHead> {
        ClusterHead::new(centroids, self.tau_student, self.tau_teacher, self.sk_iters)
    }
}

/// Everything a step reads and writes.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Student encoder, predictor and head (`encoder.*`, `predictor.*`, `head.*`).
    pub network: ParamSet,
    /// EMA copy of the student encoder.
    pub teacher: ParamSet,
    pub centroids: Array2<f64>,
    pub opt_network: AdamW,
    pub opt_centroids: AdamW,
    pub step: u64,
    pub seed: u64,
    /// Recent per-step (position × cluster) counts of hard teacher targets.
    pub mi_window: VecDeque<Array2<f64>>,
}

impl TrainState {
    pub fn new(net: &NetworkConfig, cfg: &TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate(net)?;
        let mut tensors = BTreeMap::new();
        tensors.extend(init_encoder(net, &mut substream(seed, "init.encoder", 0)).into_inner());
        tensors.extend(init_predictor(net, &mut substream(seed, "init.predictor", 0)).into_inner());
        tensors.extend(
            init_head(net, cfg.prototypes, &mut substream(seed, "init.head", 0)).into_inner(),
        );
        let network = ParamSet::from_map(tensors);
        let teacher = student_encoder(&network);
        let centroids = xavier_uniform(
            cfg.prototypes,
            net.enc_dim,
            &mut substream(seed, "init.centroids", 0),
        );
        let (b1, b2) = cfg.adam_betas;
        Ok(Self {
            network,
            teacher,
            centroids,
            opt_network: AdamW::new(b1, b2, cfg.weight_decay),
            opt_centroids: AdamW::new(b1, b2, cfg.weight_decay),
            step: 0,
            seed,
            mi_window: VecDeque::new(),
        })
    }

    pub fn cluster_head(&self, cfg: &TrainConfig) -> Result<ClusterHead> {
        cfg.cluster_head(self.centroids.clone())
    }
}

fn student_encoder(network: &ParamSet) -> ParamSet {
    network.with_prefix(&format!("{ENCODER}."))
}

/// Per-step record written to the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub mim_loss: f64,
    pub cluster_loss: f64,
    pub lr: f64,
    pub momentum: f64,
    /// Mean entropy (nats) of the balanced teacher targets.
    pub target_entropy: f64,
    /// MI (nats) between position and hard target, pooled over the recent
    /// window of steps, minus its shuffled-label baseline.
    pub position_mi: f64,
    /// MI of this step's soft (position, cluster) mass.
    pub position_mi_soft: f64,
}

/// Raw patches of a batch of equally sized images.
pub struct RawBatch {
    pub lattice: LatticeShape,
    /// One `n × patch_dim` matrix per image, raster order.
    pub patches: Vec<Array2<f64>>,
}

impl RawBatch {
    pub fn new(images: &[Array3<f64>], patch_size: usize) -> Result<Self> {
        if images.is_empty() {
            return Err(CapiError::DegenerateInput("empty batch".into()));
        }
        let mut patches = Vec::with_capacity(images.len());
        let mut lattice = None;
        for img in images {
            let (p, shape) = extract_patches(img, patch_size)?;
            if lattice.is_some_and(|l| l != shape) {
                return Err(CapiError::InvalidShape(
                    "images in a batch must share one size".into(),
                ));
            }
            lattice = Some(shape);
            patches.push(p);
        }
        Ok(Self {
            lattice: lattice.expect("non-empty batch"),
            patches,
        })
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    fn stacked(&self, select: impl Fn(usize) -> Vec<usize>) -> Array2<f64> {
        let dim = self.patches[0].ncols();
        let rows: Vec<_> = self
            .patches
            .iter()
            .enumerate()
            .flat_map(|(b, p)| select(b).into_iter().map(move |i| p.row(i)))
            .collect();
        let mut out = Array2::zeros((rows.len(), dim));
        for (mut dst, src) in out.axis_iter_mut(Axis(0)).zip(rows) {
            dst.assign(&src);
        }
        out
    }
}

/// Masks and prediction targets for every image of a step.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentPlan {
    pub kept: Vec<Vec<Coord>>,
    pub targets: Vec<Vec<Coord>>,
}

/// Draws the step's masks (`mask` substream) and prediction targets
/// (`targets` substream).
pub fn plan_student(
    lattice: LatticeShape,
    cfg: &TrainConfig,
    seed: u64,
    step: u64,
    batch: usize,
) -> Result<StudentPlan> {
    let mut mask_rng = substream(seed, "mask", step);
    let mut target_rng = substream(seed, "targets", step);
    let mut plan = StudentPlan {
        kept: Vec::with_capacity(batch),
        targets: Vec::with_capacity(batch),
    };
    for _ in 0..batch {
        let mask = generate_mask(lattice, cfg.mask, &mut mask_rng)?;
        let kept = mask.kept_coords();
        if kept.is_empty() {
            return Err(CapiError::InvalidSpec(
                "mask leaves no visible patch".into(),
            ));
        }
        plan.targets.push(sample_prediction_targets(
            &mask,
            cfg.n_pred,
            &mut target_rng,
        )?);
        plan.kept.push(kept);
    }
    Ok(plan)
}

/// Teacher patch features (`B·n × d`, batch-major, raster order) on `tape`.
pub fn teacher_features(
    tape: &mut Tape,
    teacher: &ParamSet,
    net: &NetworkConfig,
    raw: &RawBatch,
) -> Result<Var> {
    let n = raw.lattice.len();
    let tokens = embed_patches(tape, teacher, raw.stacked(|_| (0..n).collect()));
    let coords = vec![raster_coords(raw.lattice); raw.len()];
    let (out, rows) = encoder_forward(
        tape,
        teacher,
        net,
        raw.lattice,
        tokens,
        &coords,
        Mode::Eval,
        None,
    )?;
    let idx = rows.iter().flat_map(|r| r.patch_rows()).collect();
    Ok(tape.gather_rows(out, idx))
}

/// Student prototype logits at the planned target positions
/// (`Σ n_pred × p`, image after image).
pub fn student_logits(
    tape: &mut Tape,
    network: &ParamSet,
    net: &NetworkConfig,
    raw: &RawBatch,
    plan: &StudentPlan,
    drop_rng: &mut dyn RngCore,
) -> Result<Var> {
    let lattice = raw.lattice;
    let pixels = raw.stacked(|b| plan.kept[b].iter().map(|&c| lattice.index(c)).collect());
    let tokens = embed_patches(tape, network, pixels);
    let (ctx, rows) = encoder_forward(
        tape,
        network,
        net,
        lattice,
        tokens,
        &plan.kept,
        Mode::Train,
        Some(drop_rng),
    )?;
    let preds = predictor_forward(
        tape,
        network,
        net,
        lattice,
        ctx,
        &rows,
        &plan.targets,
        PredictorDepth::Full,
    )?;
    Ok(head_forward(tape, network, preds))
}

/// Balances teacher logits (`B·n × p`, batch-major) into targets tagged with
/// their positions.
pub fn balance(
    logits: &Array2<f64>,
    cfg: &TrainConfig,
    batch: usize,
    n: usize,
) -> Result<Assignments> {
    match cfg.sinkhorn {
        SinkhornVariant::Positionwise => {
            let p = logits.ncols();
            let cube = logits
                .clone()
                .into_shape_with_order((batch, n, p))
                .map_err(|e| CapiError::InvalidShape(e.to_string()))?;
            sinkhorn_positionwise(&cube, cfg.tau_teacher, cfg.sk_iters)
        }
        SinkhornVariant::Standard => {
            let mut a = sinkhorn_standard(logits, cfg.tau_teacher, cfg.sk_iters)?;
            a.positions = Some((0..batch * n).map(|i| i % n).collect());
            Ok(a)
        }
    }
}

/// Target rows for the planned positions, in the order of [`student_logits`].
pub fn gather_targets(
    targets: &Array2<f64>,
    plan: &StudentPlan,
    lattice: LatticeShape,
) -> Array2<f64> {
    let n = lattice.len();
    let idx: Vec<usize> = plan
        .targets
        .iter()
        .enumerate()
        .flat_map(|(b, cs)| cs.iter().map(move |&c| b * n + lattice.index(c)))
        .collect();
    targets.select(Axis(0), &idx)
}

fn max_abs(a: &Array2<f64>) -> f64 {
    a.iter().fold(
        0.0,
        |m: f64, v| if v.is_nan() { f64::NAN } else { m.max(v.abs()) },
    )
}

/// One training step on a preprocessed batch. The state is only modified
/// when the step succeeds.
pub fn train_step(
    state: &mut TrainState,
    batch: &[Array3<f64>],
    net: &NetworkConfig,
    cfg: &TrainConfig,
    schedule: &Schedule,
) -> Result<StepMetrics> {
    let step = state.step;
    let lr = schedule.lr_at(step as usize)?;
    let raw = RawBatch::new(batch, net.patch_size)?;
    let (b, n) = (raw.len(), raw.lattice.len());

    // Teacher: full images, no gradient.
    let mut teacher_tape = Tape::no_grad();
    let tf = teacher_features(&mut teacher_tape, &state.teacher, net, &raw)?;
    let features = teacher_tape.value(tf).clone();
    drop(teacher_tape);
    let head = state.cluster_head(cfg)?;
    let teacher_logits = compute_logits(&features, &head.centroids)?;
    let diverged = |mim: f64, cluster: f64, logit: f64| CapiError::Diverged {
        step: step as usize,
        mim_loss: mim,
        cluster_loss: cluster,
        max_abs_logit: logit,
    };
    let teacher_max = max_abs(&teacher_logits);
    if !teacher_max.is_finite() {
        return Err(diverged(f64::NAN, f64::NAN, teacher_max));
    }
    let targets = balance(&teacher_logits, cfg, b, n)?;

    // Student: masked view, predictor, head.
    let plan = plan_student(raw.lattice, cfg, state.seed, step, b)?;
    let mut tape = Tape::new();
    let mut drop_rng = substream(state.seed, "drop_path", step);
    let logits = student_logits(&mut tape, &state.network, net, &raw, &plan, &mut drop_rng)?;
    let tgt = gather_targets(&targets.probs, &plan, raw.lattice);
    let loss = tape.soft_cross_entropy(logits, tgt, cfg.tau_student);
    let mim_loss = tape.value(loss)[[0, 0]];
    let (cluster_loss, grad_centroids) = clustering_loss_and_grad(&features, &head, &targets)?;
    let max_logit = teacher_max.max(max_abs(tape.value(logits)));
    if !mim_loss.is_finite() || !cluster_loss.is_finite() || !max_logit.is_finite() {
        return Err(diverged(mim_loss, cluster_loss, max_logit));
    }
    let grads = tape.backward(loss).into_param_map(&tape);
    if grads.values().any(|g| !g.iter().all(|v| v.is_finite()))
        || !grad_centroids.iter().all(|v| v.is_finite())
    {
        return Err(diverged(mim_loss, cluster_loss, max_logit));
    }

    // Diagnostics.
    let target_entropy = targets.mean_entropy();
    let position_mi_soft = mutual_information(&soft_joint(&targets, n)?);
    let mut window = state.mi_window.clone();
    window.push_back(hard_joint(&targets, n)?);
    while window.len() > cfg.mi_window {
        window.pop_front();
    }
    let mut pooled = Array2::zeros(window[0].raw_dim());
    for counts in &window {
        pooled += counts;
    }
    let mut null_rng = substream(state.seed, "mi_null", step);
    let position_mi = mutual_information_shuffle_corrected(&pooled, MI_SHUFFLES, &mut null_rng);

    // Updates.
    let groups = cfg.backbone_groups();
    state
        .opt_network
        .step(&mut state.network, &grads, lr, |name| {
            groups.scale_for(name)
        })?;
    state.opt_centroids.begin_step();
    state.opt_centroids.update(
        CENTROIDS,
        &mut state.centroids,
        &grad_centroids,
        lr * cfg.clustering_lr_ratio,
        GroupScale {
            lr: 1.0,
            weight_decay: 1.0,
        },
    )?;
    let momentum = 1.0 - lr;
    ema_update(
        &mut state.teacher,
        &student_encoder(&state.network),
        momentum,
    )?;
    state.mi_window = window;
    state.step += 1;

    Ok(StepMetrics {
        step,
        mim_loss,
        cluster_loss,
        lr,
        momentum,
        target_entropy,
        position_mi,
        position_mi_soft,
    })
}

/// Largest absolute cross-gradient between the two losses and the parameter
/// groups they must not touch, measured on one joint tape.
#[derive(Clone, Debug)]
pub struct GradientAudit {
    pub mim_wrt_centroids: f64,
    pub mim_wrt_teacher: f64,
    pub cluster_wrt_network: f64,
    pub cluster_wrt_teacher: f64,
    /// Largest absolute gradient of the mim loss over network parameters.
    pub mim_wrt_network: f64,
    /// Clustering-loss gradient for the centroids, from the tape.
    pub centroid_grad: Array2<f64>,
    /// Mim-loss gradients for the network, from the tape.
    pub network_grads: BTreeMap<String, Array2<f64>>,
}

const TEACHER_NS: &str = "teacher.";

/// Builds the whole step on one differentiable tape (teacher, centroids and
/// student all as parameters) and differentiates both losses with respect to
/// everything. Uses the same random draws as [`train_step`] at `state.step`.
pub fn gradient_audit(
    state: &TrainState,
    batch: &[Array3<f64>],
    net: &NetworkConfig,
    cfg: &TrainConfig,
) -> Result<GradientAudit> {
    let raw = RawBatch::new(batch, net.patch_size)?;
    let (b, n) = (raw.len(), raw.lattice.len());
    let mut tape = Tape::new();

    tape.set_namespace(TEACHER_NS);
    let tf = teacher_features(&mut tape, &state.teacher, net, &raw)?;
    tape.set_namespace("");
    let c = tape.param(CENTROIDS, &state.centroids);
    let normed = tape.l2_normalize_rows(tf);
    let teacher_logits = tape.linear(normed, c);
    let targets = balance(&tape.value(teacher_logits).clone(), cfg, b, n)?;

    let frozen = tape.detach(normed);
    let cluster_logits = tape.linear(frozen, c);
    let cluster_loss =
        tape.soft_cross_entropy(cluster_logits, targets.probs.clone(), cfg.tau_student);

    let plan = plan_student(raw.lattice, cfg, state.seed, state.step, b)?;
    let mut drop_rng = substream(state.seed, "drop_path", state.step);
    let logits = student_logits(&mut tape, &state.network, net, &raw, &plan, &mut drop_rng)?;
    let tgt = gather_targets(&targets.probs, &plan, raw.lattice);
    let mim_loss = tape.soft_cross_entropy(logits, tgt, cfg.tau_student);

    let g_mim = tape.backward(mim_loss).into_param_map(&tape);
    let g_cluster = tape.backward(cluster_loss).into_param_map(&tape);
    let largest = |grads: &BTreeMap<String, Array2<f64>>, pick: &dyn Fn(&str) -> bool| {
        grads
            .iter()
            .filter(|(name, _)| pick(name))
            .map(|(_, g)| max_abs(g))
            .fold(0.0, f64::max)
    };
    let is_teacher = |name: &str| name.starts_with(TEACHER_NS);
    let is_centroids = |name: &str| name == CENTROIDS;
    let is_network = |name: &str| !is_teacher(name) && !is_centroids(name);
    Ok(GradientAudit {
        mim_wrt_centroids: largest(&g_mim, &is_centroids),
        mim_wrt_teacher: largest(&g_mim, &is_teacher),
        cluster_wrt_network: largest(&g_cluster, &is_network),
        cluster_wrt_teacher: largest(&g_cluster, &is_teacher),
        mim_wrt_network: largest(&g_mim, &is_network),
        centroid_grad: g_cluster[CENTROIDS].clone(),
        network_grads: g_mim
            .into_iter()
            .filter(|(name, _)| is_network(name))
            .collect(),
    })
}
