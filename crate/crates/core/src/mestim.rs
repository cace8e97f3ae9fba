//! M-estimation on a Bernoulli sketch: minimize the subsample average loss.
//!
//! The covariance of `sqrt(C) * (theta_hat - theta0)` is `H^-1 Sigma H^-1`
//! with `H = -mean(hessian)` and `Sigma = Sigma_1 + lambda * Sigma_2` built
//! from the per-cell scores at `theta_hat`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, checked_inverse, max_abs, sandwich, MAX_CONDITION};
use crate::moments::{
    self, combine_variance, gamma_a_hat, gamma_b_hat, SelectedValues, VarianceComponents, VarianceMode,
};
use crate::panel::TwoWayPanel;
use crate::sketch::{lambda_hat, SketchMask};

pub const MAX_ITERATIONS: usize = 200;
const GRADIENT_TOL: f64 = 1e-10;
const MAX_HALVINGS: usize = 40;
const RIDGE: f64 = 1e-8;
const SEPARATION_BOUND: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    LeastSquares,
    Logistic,
    Custom,
}

/// A twice-differentiable per-cell loss `q(W, theta)`.
pub trait LossModel: Sync {
    fn param_dim(&self) -> usize;

    fn kind(&self) -> LossKind {
        LossKind::Custom
    }

    fn loss(&self, record: &[f64], theta: &[f64]) -> f64;

    fn gradient(&self, record: &[f64], theta: &[f64], out: &mut [f64]);

    /// Hessian written column-major, `k x k`.
    fn hessian(&self, record: &[f64], theta: &[f64], out: &mut [f64]);

    /// Probability residual `p - y` for binary-outcome models; used to
    /// detect perfect separation.
    fn probability_residual(&self, _record: &[f64], _theta: &[f64]) -> Option<f64> {
        None
    }
}

#[inline]
fn linear_index(record: &[f64], x: &[usize], theta: &[f64]) -> f64 {
    x.iter().zip(theta).map(|(&f, t)| record[f] * t).sum()
}

fn field_indices(panel: &TwoWayPanel, y: &str, x: &[&str]) -> Result<(usize, Vec<usize>)> {
    let xs = x.iter().map(|n| panel.field_index(n)).collect::<Result<Vec<_>>>()?;
    if xs.is_empty() {
        return Err(Error::InvalidArgument("at least one regressor is required".into()));
    }
    Ok((panel.field_index(y)?, xs))
}

/// `q = (y - x' theta)^2 / 2`.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    pub y: usize,
    pub x: Vec<usize>,
}

impl LeastSquares {
    pub fn from_names(panel: &TwoWayPanel, y: &str, x: &[&str]) -> Result<Self> {
        let (y, x) = field_indices(panel, y, x)?;
        Ok(Self { y, x })
    }
}

impl LossModel for LeastSquares {
    fn param_dim(&self) -> usize {
        self.x.len()
    }

    fn kind(&self) -> LossKind {
        LossKind::LeastSquares
    }

    fn loss(&self, record: &[f64], theta: &[f64]) -> f64 {
        let r = record[self.y] - linear_index(record, &self.x, theta);
        0.5 * r * r
    }

    fn gradient(&self, record: &[f64], theta: &[f64], out: &mut [f64]) {
        let r = record[self.y] - linear_index(record, &self.x, theta);
        for (o, &f) in out.iter_mut().zip(&self.x) {
            *o = -record[f] * r;
        }
    }

    fn hessian(&self, record: &[f64], _theta: &[f64], out: &mut [f64]) {
        let k = self.x.len();
        for (a, &fa) in self.x.iter().enumerate() {
            for (b, &fb) in self.x.iter().enumerate() {
                out[b * k + a] = record[fa] * record[fb];
            }
        }
    }
}

/// Logistic log-loss `q = log(1 + exp(x' theta)) - y x' theta`, `y` in {0, 1}.
#[derive(Debug, Clone)]
pub struct Logistic {
    pub y: usize,
    pub x: Vec<usize>,
}

impl Logistic {
    pub fn from_names(panel: &TwoWayPanel, y: &str, x: &[&str]) -> Result<Self> {
        let (y, x) = field_indices(panel, y, x)?;
        if let Some((key, _)) = panel.cells().find(|(_, r)| r[y] != 0.0 && r[y] != 1.0) {
            return Err(Error::InvalidArgument(format!(
                "logistic outcome must be 0 or 1 (cell i={}, j={})",
                key.i, key.j
            )));
        }
        Ok(Self { y, x })
    }
}

fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

impl LossModel for Logistic {
    fn param_dim(&self) -> usize {
        self.x.len()
    }

    fn kind(&self) -> LossKind {
        LossKind::Logistic
    }

    fn loss(&self, record: &[f64], theta: &[f64]) -> f64 {
        let eta = linear_index(record, &self.x, theta);
        softplus(eta) - record[self.y] * eta
    }

    fn gradient(&self, record: &[f64], theta: &[f64], out: &mut [f64]) {
        let r = sigmoid(linear_index(record, &self.x, theta)) - record[self.y];
        for (o, &f) in out.iter_mut().zip(&self.x) {
            *o = record[f] * r;
        }
    }

    fn hessian(&self, record: &[f64], theta: &[f64], out: &mut [f64]) {
        let p = sigmoid(linear_index(record, &self.x, theta));
        let w = p * (1.0 - p);
        let k = self.x.len();
        for (a, &fa) in self.x.iter().enumerate() {
            for (b, &fb) in self.x.iter().enumerate() {
                out[b * k + a] = w * record[fa] * record[fb];
            }
        }
    }

    fn probability_residual(&self, record: &[f64], theta: &[f64]) -> Option<f64> {
        Some(sigmoid(linear_index(record, &self.x, theta)) - record[self.y])
    }
}

#[derive(Debug, Clone)]
pub struct MOptions {
    pub theta0: Option<DVector<f64>>,
    pub max_iterations: usize,
    pub variance_mode: VarianceMode,
}

impl Default for MOptions {
    fn default() -> Self {
        Self { theta0: None, max_iterations: MAX_ITERATIONS, variance_mode: VarianceMode::Subsample }
    }
}

#[derive(Debug, Clone)]
pub struct MVariance {
    pub h_tilde: DMatrix<f64>,
    pub sigma: VarianceComponents,
    pub sandwich: DMatrix<f64>,
    pub std_error: DVector<f64>,
    pub degenerate_flag: bool,
}

#[derive(Debug, Clone)]
pub struct MFit {
    pub theta_hat: DVector<f64>,
    pub objective: f64,
    pub h_tilde: DMatrix<f64>,
    pub sigma: VarianceComponents,
    pub sandwich: DMatrix<f64>,
    pub std_error: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub degenerate_flag: bool,
    pub l_hat: usize,
    pub p: f64,
    pub c_bar: usize,
}

struct Averages {
    loss: f64,
    gradient: DVector<f64>,
    hessian: DMatrix<f64>,
}

fn averages(panel: &TwoWayPanel, cells: &[usize], model: &dyn LossModel, theta: &[f64]) -> Result<Averages> {
    let k = model.param_dim();
    // one record per cell: [loss, gradient (k), hessian (k*k)]
    let avg = SelectedValues::evaluate_with(panel, cells, 1 + k + k * k, |rec, out| {
        out[0] = model.loss(rec, theta);
        let (g, h) = out[1..].split_at_mut(k);
        model.gradient(rec, theta, g);
        model.hessian(rec, theta, h);
    })?
    .mean();
    let mut hessian = DMatrix::from_column_slice(k, k, &avg.as_slice()[1 + k..]);
    linalg::symmetrize(&mut hessian);
    Ok(Averages { loss: avg[0], gradient: DVector::from_column_slice(&avg.as_slice()[1..1 + k]), hessian })
}

fn average_loss(panel: &TwoWayPanel, cells: &[usize], model: &dyn LossModel, theta: &[f64]) -> Result<f64> {
    Ok(SelectedValues::evaluate_with(panel, cells, 1, |rec, out| out[0] = model.loss(rec, theta))?.mean()[0])
}

fn separation_error(iterations: usize) -> Error {
    Error::NonConvergence { iterations, separation: true }
}

/// Whether every selected outcome is fitted to within `1e-6`.
fn perfectly_separated(panel: &TwoWayPanel, cells: &[usize], model: &dyn LossModel, theta: &[f64]) -> bool {
    cells.iter().all(|&c| model.probability_residual(panel.record(c), theta).is_some_and(|r| r.abs() < 1e-6))
}

fn newton(
    panel: &TwoWayPanel,
    cells: &[usize],
    model: &dyn LossModel,
    theta0: DVector<f64>,
    max_iterations: usize,
) -> Result<(DVector<f64>, f64, usize)> {
    let k = model.param_dim();
    let mut theta = theta0;
    let mut avg = averages(panel, cells, model, theta.as_slice())?;
    let scale = max_abs(&avg.gradient).max(1.0);
    for iter in 0..=max_iterations {
        let gnorm = max_abs(&avg.gradient);
        if gnorm < GRADIENT_TOL * scale {
            if perfectly_separated(panel, cells, model, theta.as_slice()) {
                return Err(separation_error(iter));
            }
            return Ok((theta, avg.loss, iter));
        }
        if iter == max_iterations {
            break;
        }
        let cond = linalg::condition_number(&avg.hessian);
        if cond > MAX_CONDITION && model.kind() != LossKind::Logistic {
            return Err(Error::SingularHessian { condition: cond });
        }
        let mut step = linalg::checked_solve(&avg.hessian, &(-&avg.gradient)).ok();
        if step.as_ref().is_none_or(|s| s.dot(&avg.gradient) >= 0.0) {
            let ridge = RIDGE * avg.hessian.trace().abs().max(1.0);
            let h = &avg.hessian + DMatrix::identity(k, k) * ridge;
            step = linalg::checked_solve(&h, &(-&avg.gradient)).ok();
        }
        let step = match step {
            Some(s) if s.dot(&avg.gradient) < 0.0 => s,
            _ => -&avg.gradient,
        };

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let cand = &theta + &step * t;
            let q = average_loss(panel, cells, model, cand.as_slice())?;
            if q <= avg.loss {
                accepted = Some(cand);
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some(cand) => {
                theta = cand;
                avg = averages(panel, cells, model, theta.as_slice())?;
            }
            None if gnorm < 1e-6 * scale => return Ok((theta, avg.loss, iter)),
            None => return Err(Error::NonConvergence { iterations: iter, separation: false }),
        }
        if max_abs(&theta) > SEPARATION_BOUND {
            return Err(separation_error(iter + 1));
        }
    }
    let separated = model.kind() == LossKind::Logistic && max_abs(&theta) > 20.0;
    Err(Error::NonConvergence { iterations: max_iterations, separation: separated })
}

/// Hessian, score variance and sandwich at `theta_hat`.
pub fn m_variance(
    panel: &TwoWayPanel,
    mask: &SketchMask,
    model: &dyn LossModel,
    theta_hat: &DVector<f64>,
    mode: VarianceMode,
) -> Result<MVariance> {
    let k = model.param_dim();
    if theta_hat.len() != k || theta_hat.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidArgument(format!("theta_hat must be a finite {k}-vector")));
    }
    let dims = panel.dims();
    let all: Vec<usize>;
    let cells = match mode {
        VarianceMode::Subsample => mask.selected(),
        VarianceMode::FullSample => {
            all = (0..panel.n_obs()).collect();
            &all
        }
    };
    let theta = theta_hat.as_slice();
    let scores = SelectedValues::evaluate_with(panel, cells, k, |rec, out| model.gradient(rec, theta, out))?;
    let curvature = SelectedValues::evaluate_with(panel, cells, k, |rec, out| {
        let mut h = vec![0.0; k * k];
        model.hessian(rec, theta, &mut h);
        for (a, o) in out.iter_mut().enumerate() {
            *o = (0..k).map(|b| h[b * k + a] * theta[b]).sum();
        }
    })?;
    let scale_sq = scores.mean_square() + curvature.mean_square();
    let mut h_tilde = -averages(panel, cells, model, theta)?.hessian;
    linalg::symmetrize(&mut h_tilde);

    let sigma_1 = gamma_a_hat(&scores, dims.c_bar as f64)?;
    let sigma_2 = gamma_b_hat(&scores)?;
    let sigma = combine_variance(sigma_1, sigma_2, lambda_hat(&dims, panel.n_obs(), mask.p())?)?;
    let h_inv = checked_inverse(&h_tilde).map_err(|condition| Error::SingularHessian { condition })?;
    let sandwich = sandwich(&h_inv, &sigma.gamma);
    let std_error = moments::standard_errors(&sandwich, dims.c_bar);
    let degenerate_flag = moments::is_degenerate(&sigma.gamma, &scale_sq);
    Ok(MVariance { h_tilde, sigma, sandwich, std_error, degenerate_flag })
}

/// Newton fit of the sketched M-estimator, with its sandwich covariance.
pub fn m_fit(panel: &TwoWayPanel, mask: &SketchMask, model: &dyn LossModel, options: &MOptions) -> Result<MFit> {
    let k = model.param_dim();
    if mask.l_hat() == 0 {
        return Err(Error::EmptySketch);
    }
    if mask.l_hat() < k {
        return Err(Error::InvalidArgument(format!("sketch of {} cells cannot fit {k} parameters", mask.l_hat())));
    }
    let theta0 = match &options.theta0 {
        Some(t) if t.len() == k && t.iter().all(|v| v.is_finite()) => t.clone(),
        Some(_) => return Err(Error::InvalidArgument(format!("theta0 must be a finite {k}-vector"))),
        None => DVector::zeros(k),
    };
    let (theta_hat, objective, iterations) = newton(panel, mask.selected(), model, theta0, options.max_iterations)?;
    let var = m_variance(panel, mask, model, &theta_hat, options.variance_mode)?;
    Ok(MFit {
        theta_hat,
        objective,
        h_tilde: var.h_tilde,
        sigma: var.sigma,
        sandwich: var.sandwich,
        std_error: var.std_error,
        iterations,
        converged: true,
        degenerate_flag: var.degenerate_flag,
        l_hat: mask.l_hat(),
        p: mask.p(),
        c_bar: panel.dims().c_bar,
    })
}
