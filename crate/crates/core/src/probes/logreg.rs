//! L2-regularized multinomial logistic regression fitted with L-BFGS.

use std::collections::VecDeque;

use ndarray::{s, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::bank::{FeatureBank, Split};
use super::report::{GridPoint, ProbeMetric, ProbeReport};
use crate::autograd::softmax_rows_inplace;
use crate::error::{CapiError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LbfgsConfig {
    pub max_iter: usize,
    /// Stop when the gradient's Euclidean norm falls below this.
    pub tol: f64,
    pub memory: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol: 1e-6,
            memory: 10,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LbfgsResult {
    pub x: Array1<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimizes a smooth function given as `x ↦ (f(x), ∇f(x))`, using the
/// two-loop recursion and a backtracking Armijo line search.
pub fn lbfgs(
    mut f: impl FnMut(&Array1<f64>) -> (f64, Array1<f64>),
    x0: Array1<f64>,
    cfg: LbfgsConfig,
) -> LbfgsResult {
    let mut x = x0;
    let (mut fx, mut g) = f(&x);
    let mut history: VecDeque<(Array1<f64>, Array1<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;
    let norm = |v: &Array1<f64>| v.dot(v).sqrt();
    while iterations < cfg.max_iter && norm(&g) > cfg.tol {
        // two-loop recursion for d = −H g
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (sk, yk, rho) in history.iter().rev() {
            let a = rho * sk.dot(&q);
            q.scaled_add(-a, yk);
            alphas.push(a);
        }
        let gamma = history
            .back()
            .map_or(1.0 / norm(&g).max(1.0), |(sk, yk, _)| {
                sk.dot(yk) / yk.dot(yk)
            });
        q *= gamma;
        for ((sk, yk, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * yk.dot(&q);
            q.scaled_add(a - b, sk);
        }
        let mut d = -q;
        let mut slope = g.dot(&d);
        if slope >= 0.0 {
            history.clear();
            d = -&g;
            slope = -g.dot(&g);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xn = &x + &(&d * step);
            let (fn_, gn) = f(&xn);
            if fn_.is_finite() && fn_ <= fx + 1e-4 * step * slope {
                accepted = Some((xn, fn_, gn));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else { break };
        let sk = &xn - &x;
        let yk = &gn - &g;
        let sy = sk.dot(&yk);
        if sy > 1e-12 * norm(&sk) * norm(&yk) {
            history.push_back((sk, yk, 1.0 / sy));
            if history.len() > cfg.memory {
                history.pop_front();
            }
        }
        x = xn;
        fx = fn_;
        g = gn;
        iterations += 1;
    }
    let grad_norm = norm(&g);
    LbfgsResult {
        x,
        value: fx,
        grad_norm,
        iterations,
        converged: grad_norm <= cfg.tol,
    }
}

/// A fitted multinomial model `softmax(W x + b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticRegression {
    /// `classes × dim`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl LogisticRegression {
    pub fn predict_proba(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weights.t()) + &self.bias;
        softmax_rows_inplace(&mut z);
        z
    }

    pub fn predict(&self, x: &Array2<f64>) -> Vec<usize> {
        self.predict_proba(x)
            .axis_iter(Axis(0))
            .map(|r| crate::objective::argmax(r.iter().copied()))
            .collect()
    }
}

/// Mean cross-entropy plus `‖W‖² / (2·C·n)` (the bias is not penalized), so
/// `C` is an inverse regularization strength as in the usual
/// `C·Σ loss + ½‖W‖²` form.
pub fn fit_logreg(
    x: &Array2<f64>,
    y: &[usize],
    n_classes: usize,
    inverse_reg: f64,
    cfg: LbfgsConfig,
) -> Result<LogisticRegression> {
    let (n, d) = x.dim();
    if n == 0 || y.len() != n {
        return Err(CapiError::InvalidShape(format!(
            "{n} rows, {} labels",
            y.len()
        )));
    }
    if y.iter().any(|&l| l >= n_classes) {
        return Err(CapiError::InvalidShape(
            "label outside the class range".into(),
        ));
    }
    let first = y[0];
    if y.iter().all(|&l| l == first) {
        return Err(CapiError::DegenerateInput(
            "logistic regression needs at least two classes".into(),
        ));
    }
    if !(inverse_reg > 0.0) {
        return Err(CapiError::Config(format!(
            "C must be positive, got {inverse_reg}"
        )));
    }
    let lambda = 1.0 / (inverse_reg * n as f64);
    let c = n_classes;
    let unpack = |theta: &Array1<f64>| {
        let w = theta
            .slice(s![..c * d])
            .to_owned()
            .into_shape_with_order((c, d))
            .expect("sized");
        let b = theta.slice(s![c * d..]).to_owned();
        (w, b)
    };
    let objective = |theta: &Array1<f64>| {
        let (w, b) = unpack(theta);
        let mut p = x.dot(&w.t()) + &b;
        softmax_rows_inplace(&mut p);
        let mut loss = 0.0;
        for (i, &label) in y.iter().enumerate() {
            loss -= p[[i, label]].max(1e-300).ln();
            p[[i, label]] -= 1.0;
        }
        p /= n as f64;
        let gw = p.t().dot(x) + &(&w * lambda);
        let gb = p.sum_axis(Axis(0));
        let value = loss / n as f64 + 0.5 * lambda * w.iter().map(|v| v * v).sum::<f64>();
        let mut grad = Array1::zeros(c * d + c);
        grad.slice_mut(s![..c * d])
            .assign(&Array1::from_iter(gw.iter().copied()));
        grad.slice_mut(s![c * d..]).assign(&gb);
        (value, grad)
    };
    let r = lbfgs(objective, Array1::zeros(c * d + c), cfg);
    let (weights, bias) = unpack(&r.x);
    if !r.converged {
        log::warn!(
            "logistic regression stopped after {} iterations with gradient norm {:.3e}",
            r.iterations,
            r.grad_norm
        );
    }
    Ok(LogisticRegression {
        weights,
        bias,
        converged: r.converged,
        iterations: r.iterations,
    })
}

/// Eight log-spaced inverse regularization strengths from 1e-6 to 1e5.
pub fn default_c_grid() -> Vec<f64> {
    (0..8)
        .map(|i| 10f64.powf(-6.0 + 11.0 * i as f64 / 7.0))
        .collect()
}

/// Fits one model per grid value on the train split and selects on the
/// validation split (which must be non-empty). The test metric is filled
/// when the bank has test rows.
pub fn logreg_probe(
    bank: &FeatureBank,
    grid: &[f64],
    cfg: LbfgsConfig,
    metric: ProbeMetric,
) -> Result<(LogisticRegression, ProbeReport)> {
    let (xt, yt) = bank.subset(Split::Train);
    let (xv, yv) = bank.subset(Split::Val);
    if xv.nrows() == 0 {
        return Err(CapiError::Config(
            "logistic-regression probe needs a validation split".into(),
        ));
    }
    let k = bank.n_classes();
    let mut models = Vec::with_capacity(grid.len());
    let mut points = Vec::with_capacity(grid.len());
    for &c in grid {
        let model = fit_logreg(&xt, &yt, k, c, cfg)?;
        let mut point = GridPoint::new(&[("C", c)], metric.score(&model.predict(&xv), &yv, k));
        point.converged = Some(model.converged);
        points.push(point);
        models.push(model);
    }
    let mut report = ProbeReport::select("logreg", metric, points)?;
    let model = models.swap_remove(report.selected);
    let (xs, ys) = bank.subset(Split::Test);
    if !ys.is_empty() {
        report.test_metric = Some(metric.score(&model.predict(&xs), &ys, k));
    }
    Ok((model, report))
}
