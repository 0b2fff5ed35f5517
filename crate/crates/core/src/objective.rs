//! Online-clustering targets and the two training losses.
//!
//! Teacher patch features are L2-normalised and projected onto the centroid
//! matrix `C` (`p × d`) to get assignment logits. Targets are Sinkhorn-Knopp
//! balanced assignments computed without gradient; the position-wise variant
//! balances every lattice position separately so that the joint distribution
//! of (position, cluster) is near uniform and targets carry no positional
//! information. `C` is trained by cross-entropy between the balanced targets
//! and its own softmax assignments; the student is trained by cross-entropy
//! between the same targets and its head's softmax.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::autograd::{log_softmax_rows, softmax_rows_inplace};
use crate::error::{CapiError, Result};

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Centroids and temperatures of the clustering head.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterHead {
    pub centroids: Array2<f64>,
    /// Softmax temperature of the clustering assignments and of the student.
    pub tau_student: f64,
    /// Temperature of the Sinkhorn-Knopp targets.
    pub tau_teacher: f64,
    pub sk_iters: usize,
}

impl ClusterHead {
    pub const STUDENT_TEMPERATURE: f64 = 0.12;
    pub const TEACHER_TEMPERATURE: f64 = 0.06;
    pub const SK_ITERS: usize = 3;

    pub fn new(
        centroids: Array2<f64>,
        tau_student: f64,
        tau_teacher: f64,
        sk_iters: usize,
    ) -> Result<Self> {
        if centroids.nrows() < 2 {
            return Err(CapiError::Config(format!(
                "need at least 2 prototypes, got {}",
                centroids.nrows()
            )));
        }
        if !(tau_student > 0.0 && tau_teacher > 0.0) {
            return Err(CapiError::Config("temperatures must be positive".into()));
        }
        if sk_iters == 0 {
            return Err(CapiError::Config("sk_iters must be positive".into()));
        }
        Ok(Self {
            centroids,
            tau_student,
            tau_teacher,
            sk_iters,
        })
    }

    pub fn prototypes(&self) -> usize {
        self.centroids.nrows()
    }
}

/// Row-stochastic assignment matrix, optionally tagged with each row's
/// lattice position.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignments {
    pub probs: Array2<f64>,
    pub positions: Option<Vec<usize>>,
}

impl Assignments {
    pub fn hard(&self) -> Vec<usize> {
        self.probs
            .axis_iter(Axis(0))
            .map(|r| argmax(r.iter().copied()))
            .collect()
    }

    /// Mean per-row entropy in nats.
    pub fn mean_entropy(&self) -> f64 {
        let t = self.probs.nrows().max(1) as f64;
        self.probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum::<f64>()
            / t
    }
}

pub(crate) fn argmax(it: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Rows divided by their L2 norm; zero rows are an error.
pub fn l2_normalize_rows(x: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = x.clone();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let n = row.dot(&row).sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(CapiError::DegenerateInput(format!("row {i} has norm {n}")));
        }
        row /= n;
    }
    Ok(out)
}

/// `l_i = C · x_i / ‖x_i‖`.
pub fn compute_logits(x: &Array2<f64>, centroids: &Array2<f64>) -> Result<Array2<f64>> {
    if x.ncols() != centroids.ncols() {
        return Err(CapiError::InvalidShape(format!(
            "features have dim {}, centroids {}",
            x.ncols(),
            centroids.ncols()
        )));
    }
    Ok(l2_normalize_rows(x)?.dot(&centroids.t()))
}

/// `softmax(l / τ)` per row.
pub fn soft_assign(logits: &Array2<f64>, tau: f64) -> Assignments {
    let mut probs = logits / tau;
    softmax_rows_inplace(&mut probs);
    Assignments {
        probs,
        positions: None,
    }
}

fn check_finite(logits: ArrayView2<f64>) -> Result<()> {
    if logits.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(CapiError::NonFinite("sinkhorn logits".into()))
    }
}

/// Balancing core shared by both variants; `m` holds `exp((L − max) / τ′)`.
fn sinkhorn_in_place(m: &mut Array2<f64>, iters: usize) {
    let p = m.ncols() as f64;
    let normalize_rows = |m: &mut Array2<f64>| {
        for mut row in m.axis_iter_mut(Axis(0)) {
            let s = row.sum();
            row /= s;
        }
    };
    for _ in 0..iters {
        let col = m.sum_axis(Axis(0));
        for mut row in m.axis_iter_mut(Axis(0)) {
            Zip::from(&mut row).and(&col).for_each(|v, &c| *v /= c * p);
        }
        normalize_rows(m);
    }
    normalize_rows(m);
}

/// Sinkhorn-Knopp over all rows jointly: columns are balanced to `T / p`
/// tokens, rows are returned summing to one. Gradient-free.
pub fn sinkhorn_standard(
    logits: &Array2<f64>,
    tau_teacher: f64,
    iters: usize,
) -> Result<Assignments> {
    if logits.nrows() == 0 {
        return Err(CapiError::DegenerateInput(
            "sinkhorn needs at least one token".into(),
        ));
    }
    check_finite(logits.view())?;
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut m = logits.mapv(|l| ((l - max) / tau_teacher).exp());
    sinkhorn_in_place(&mut m, iters);
    Ok(Assignments {
        probs: m,
        positions: None,
    })
}

/// Sinkhorn-Knopp run separately at every lattice position.
///
/// `logits` is `B × n × p` (batch, position, prototype). The result has
/// `B·n` rows in batch-major order, tagged with their positions.
pub fn sinkhorn_positionwise(
    logits: &Array3<f64>,
    tau_teacher: f64,
    iters: usize,
) -> Result<Assignments> {
    let (b, n, p) = logits.dim();
    if b == 0 || n == 0 {
        return Err(CapiError::DegenerateInput(
            "sinkhorn needs at least one token per position".into(),
        ));
    }
    let mut probs = Array2::zeros((b * n, p));
    for j in 0..n {
        let slice = logits.slice(s![.., j, ..]).to_owned();
        let a = sinkhorn_standard(&slice, tau_teacher, iters)?;
        for (bi, row) in a.probs.axis_iter(Axis(0)).enumerate() {
            probs.row_mut(bi * n + j).assign(&row);
        }
    }
    let positions = (0..b * n).map(|i| i % n).collect();
    Ok(Assignments {
        probs,
        positions: Some(positions),
    })
}

/// `−(1/T) Σ_i Σ_k a′_i(k) log a_i(k)`.
pub fn clustering_loss(targets: &Assignments, soft: &Assignments) -> Result<f64> {
    cross_entropy(&targets.probs, &soft.probs)
}

fn cross_entropy(targets: &Array2<f64>, probs: &Array2<f64>) -> Result<f64> {
    if targets.dim() != probs.dim() {
        return Err(CapiError::InvalidShape(format!(
            "targets {:?} vs predictions {:?}",
            targets.dim(),
            probs.dim()
        )));
    }
    let t = targets.nrows().max(1) as f64;
    Ok(Zip::from(targets)
        .and(probs)
        .fold(0.0, |acc, &tv, &pv| acc - tv * pv.max(PROB_FLOOR).ln())
        / t)
}

/// Cross-entropy against `softmax(logits)`, from log-probabilities so that
/// saturated rows keep their exact value.
fn cross_entropy_logits(targets: &Array2<f64>, logits: &Array2<f64>) -> Result<f64> {
    if targets.dim() != logits.dim() {
        return Err(CapiError::InvalidShape(format!(
            "targets {:?} vs predictions {:?}",
            targets.dim(),
            logits.dim()
        )));
    }
    let t = targets.nrows().max(1) as f64;
    Ok(Zip::from(targets)
        .and(&log_softmax_rows(logits))
        .fold(0.0, |acc, &tv, &lp| acc - tv * lp)
        / t)
}

/// Clustering loss and its gradient with respect to the centroids.
///
/// Features are treated as constants (they come from the teacher) and so are
/// the targets, so the only gradient is `∂L/∂C = Σ_i (a_i − a′_i) x̂_iᵀ / (T·τ)`.
pub fn clustering_loss_and_grad(
    features: &Array2<f64>,
    head: &ClusterHead,
    targets: &Assignments,
) -> Result<(f64, Array2<f64>)> {
    let normed = l2_normalize_rows(features)?;
    let logits = normed.dot(&head.centroids.t());
    let loss = cross_entropy_logits(&targets.probs, &(&logits / head.tau_student))?;
    let soft = soft_assign(&logits, head.tau_student);
    let t = features.nrows() as f64;
    let mut dl = soft.probs;
    let row_mass = targets.probs.sum_axis(Axis(1));
    for ((mut d, tr), &mass) in dl
        .axis_iter_mut(Axis(0))
        .zip(targets.probs.axis_iter(Axis(0)))
        .zip(row_mass.iter())
    {
        Zip::from(&mut d)
            .and(&tr)
            .for_each(|a, &tv| *a = (*a * mass - tv) / (t * head.tau_student));
    }
    Ok((loss, dl.t().dot(&normed)))
}

/// Output of [`mim_loss`].
#[derive(Clone, Debug)]
pub struct MimLoss {
    pub loss: f64,
    pub grad_predictions: Array2<f64>,
    pub grad_head: Array2<f64>,
}

/// Student loss: mean over predicted tokens of the cross-entropy between the
/// balanced targets and `softmax(W · prediction / τ_student)`.
///
/// The targets are constants; gradients are returned for the predictions and
/// the head weight `W` (`p × d`).
pub fn mim_loss(
    predictions: &Array2<f64>,
    targets: &Array2<f64>,
    student_head: &Array2<f64>,
    tau_student: f64,
) -> Result<MimLoss> {
    if predictions.nrows() == 0 {
        return Err(CapiError::DegenerateInput(
            "mim_loss needs at least one prediction".into(),
        ));
    }
    let logits = predictions.dot(&student_head.t());
    let scaled = &logits / tau_student;
    let loss = cross_entropy_logits(targets, &scaled)?;
    let mut probs = scaled;
    softmax_rows_inplace(&mut probs);
    let m = predictions.nrows() as f64;
    let mass = targets.sum_axis(Axis(1));
    let mut dlogits = probs;
    for ((mut d, tr), &s) in dlogits
        .axis_iter_mut(Axis(0))
        .zip(targets.axis_iter(Axis(0)))
        .zip(mass.iter())
    {
        Zip::from(&mut d)
            .and(&tr)
            .for_each(|a, &tv| *a = (*a * s - tv) / (m * tau_student));
    }
    Ok(MimLoss {
        loss,
        grad_predictions: dlogits.dot(student_head),
        grad_head: dlogits.t().dot(predictions),
    })
}

/// Mutual information (nats) of a joint count or mass table
/// `positions × clusters`.
pub fn mutual_information(joint: &Array2<f64>) -> f64 {
    let total = joint.sum();
    if total <= 0.0 {
        return 0.0;
    }
    let pj = joint / total;
    let px: Array1<f64> = pj.sum_axis(Axis(1));
    let py: Array1<f64> = pj.sum_axis(Axis(0));
    let mut mi = 0.0;
    for ((i, j), &v) in pj.indexed_iter() {
        if v > 0.0 {
            mi += v * (v / (px[i] * py[j])).ln();
        }
    }
    mi.max(0.0)
}

/// Mutual information of a count table minus its expected value under
/// independence, clamped at zero.
///
/// The plug-in estimate is biased upward (by roughly `(R − 1)(C − 1) / 2N`
/// when cells are well populated, differently when they are sparse). The
/// baseline is the mean plug-in MI of `shuffles` tables with the same
/// margins, drawn by permuting the column labels among the samples.
pub fn mutual_information_shuffle_corrected(
    counts: &Array2<f64>,
    shuffles: usize,
    rng: &mut impl Rng,
) -> f64 {
    let observed = mutual_information(counts);
    if shuffles == 0 || counts.sum() <= 0.0 {
        return observed;
    }
    let (rows, cols) = counts.dim();
    let mut row_of = Vec::new();
    let mut col_of = Vec::new();
    for ((r, c), &v) in counts.indexed_iter() {
        for _ in 0..v.round() as usize {
            row_of.push(r);
            col_of.push(c);
        }
    }
    let mut null = 0.0;
    let mut table = Array2::zeros((rows, cols));
    for _ in 0..shuffles {
        col_of.shuffle(rng);
        table.fill(0.0);
        for (&r, &c) in row_of.iter().zip(&col_of) {
            table[[r, c]] += 1.0;
        }
        null += mutual_information(&table);
    }
    (observed - null / shuffles as f64).max(0.0)
}

/// Joint (position, cluster) mass of soft assignments.
pub fn soft_joint(assign: &Assignments, n_positions: usize) -> Result<Array2<f64>> {
    let positions = assign
        .positions
        .as_ref()
        .ok_or_else(|| CapiError::DegenerateInput("assignments carry no positions".into()))?;
    let mut joint = Array2::zeros((n_positions, assign.probs.ncols()));
    for (row, &pos) in assign.probs.axis_iter(Axis(0)).zip(positions) {
        let mut j = joint.row_mut(pos);
        j += &row;
    }
    Ok(joint)
}

/// Joint (position, cluster) counts of hard (argmax) assignments.
pub fn hard_joint(assign: &Assignments, n_positions: usize) -> Result<Array2<f64>> {
    let positions = assign
        .positions
        .as_ref()
        .ok_or_else(|| CapiError::DegenerateInput("assignments carry no positions".into()))?;
    let mut joint = Array2::zeros((n_positions, assign.probs.ncols()));
    for (k, &pos) in assign.hard().iter().zip(positions) {
        joint[[pos, *k]] += 1.0;
    }
    Ok(joint)
}
