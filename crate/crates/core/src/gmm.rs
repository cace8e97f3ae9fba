//! GMM on a Bernoulli sketch.
//!
//! The estimator minimizes `g_bar(theta)' V g_bar(theta)` where `g_bar` is the
//! subsample average of the moment function. Its covariance (of
//! `sqrt(C) * (theta_hat - theta0)`) is the usual sandwich
//! `(G'VG)^-1 G'V Omega V G (G'VG)^-1` with `Omega = Gamma_1 + lambda * Gamma_2`
//! built from the moment values at `theta_hat`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, checked_inverse, max_abs, sandwich};
use crate::moments::{
    self, combine_variance, gamma_a_hat, gamma_b_hat, SelectedValues, VarianceComponents, VarianceMode,
};
use crate::panel::TwoWayPanel;
use crate::sketch::{lambda_hat, SketchMask};

pub const MAX_ITERATIONS: usize = 200;
const GRADIENT_TOL: f64 = 1e-10;
const MAX_HALVINGS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Moments affine in the parameter; fitted in closed form.
    LinearIv,
    Custom,
}

/// A moment function `g(W, theta)` with `m` moments and `k <= m` parameters.
pub trait MomentModel: Sync {
    fn moment_dim(&self) -> usize;

    fn param_dim(&self) -> usize;

    fn kind(&self) -> ModelKind {
        ModelKind::Custom
    }

    fn evaluate(&self, record: &[f64], theta: &[f64], out: &mut [f64]);

    /// `d g / d theta'` written column-major (`m` rows, `k` columns).
    ///
    /// Defaults to central differences with step `1e-6 * max(1, |theta_l|)`.
    fn jacobian(&self, record: &[f64], theta: &[f64], out: &mut [f64]) {
        finite_difference_jacobian(self, record, theta, out)
    }
}

pub fn finite_difference_jacobian<M: MomentModel + ?Sized>(model: &M, record: &[f64], theta: &[f64], out: &mut [f64]) {
    let m = model.moment_dim();
    let mut t = theta.to_vec();
    let mut plus = vec![0.0; m];
    let mut minus = vec![0.0; m];
    for l in 0..theta.len() {
        let h = 1e-6 * theta[l].abs().max(1.0);
        t[l] = theta[l] + h;
        model.evaluate(record, &t, &mut plus);
        t[l] = theta[l] - h;
        model.evaluate(record, &t, &mut minus);
        t[l] = theta[l];
        for r in 0..m {
            out[l * m + r] = (plus[r] - minus[r]) / (2.0 * h);
        }
    }
}

/// `g(W, theta) = z * (y - x' theta)` with instruments `z` and regressors `x`.
#[derive(Debug, Clone)]
pub struct LinearIv {
    y: usize,
    x: Vec<usize>,
    z: Vec<usize>,
}

impl LinearIv {
    /// Field indices for the outcome, regressors and instruments.
    pub fn new(y: usize, x: Vec<usize>, z: Vec<usize>) -> Result<Self> {
        if x.is_empty() || z.len() < x.len() {
            return Err(Error::InvalidArgument(format!(
                "linear IV needs at least as many instruments as regressors (got {} and {})",
                z.len(),
                x.len()
            )));
        }
        Ok(Self { y, x, z })
    }

    pub fn from_names(panel: &TwoWayPanel, y: &str, x: &[&str], z: &[&str]) -> Result<Self> {
        let idx = |names: &[&str]| names.iter().map(|n| panel.field_index(n)).collect::<Result<Vec<_>>>();
        Self::new(panel.field_index(y)?, idx(x)?, idx(z)?)
    }
}

impl MomentModel for LinearIv {
    fn moment_dim(&self) -> usize {
        self.z.len()
    }

    fn param_dim(&self) -> usize {
        self.x.len()
    }

    fn kind(&self) -> ModelKind {
        ModelKind::LinearIv
    }

    fn evaluate(&self, record: &[f64], theta: &[f64], out: &mut [f64]) {
        let resid = record[self.y] - self.x.iter().zip(theta).map(|(&f, t)| record[f] * t).sum::<f64>();
        for (o, &f) in out.iter_mut().zip(&self.z) {
            *o = record[f] * resid;
        }
    }

    fn jacobian(&self, record: &[f64], _theta: &[f64], out: &mut [f64]) {
        let m = self.z.len();
        for (l, &xf) in self.x.iter().enumerate() {
            for (r, &zf) in self.z.iter().enumerate() {
                out[l * m + r] = -record[zf] * record[xf];
            }
        }
    }
}

/// Scalar location moment `g(W, theta) = W_field - theta`.
#[derive(Debug, Clone)]
pub struct MeanModel {
    pub field: usize,
}

impl MomentModel for MeanModel {
    fn moment_dim(&self) -> usize {
        1
    }

    fn param_dim(&self) -> usize {
        1
    }

    fn evaluate(&self, record: &[f64], theta: &[f64], out: &mut [f64]) {
        out[0] = record[self.field] - theta[0];
    }

    fn jacobian(&self, _record: &[f64], _theta: &[f64], out: &mut [f64]) {
        out[0] = -1.0;
    }
}

#[derive(Debug, Clone)]
pub struct GmmOptions {
    /// Weight matrix; identity when absent.
    pub weight: Option<DMatrix<f64>>,
    /// Refit with `V = Gamma_2(theta_first)^-1`.
    pub two_step: bool,
    /// Center moment values at their mean before the variance sums.
    pub center_moments: bool,
    pub variance_mode: VarianceMode,
    /// Starting point for iterative fits; zeros when absent.
    pub theta0: Option<DVector<f64>>,
    pub max_iterations: usize,
}

impl Default for GmmOptions {
    fn default() -> Self {
        Self {
            weight: None,
            two_step: false,
            center_moments: false,
            variance_mode: VarianceMode::Subsample,
            theta0: None,
            max_iterations: MAX_ITERATIONS,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GmmVariance {
    pub g_tilde: DMatrix<f64>,
    pub omega: VarianceComponents,
    pub sandwich: DMatrix<f64>,
    pub std_error: DVector<f64>,
    pub degenerate_flag: bool,
}

#[derive(Debug, Clone)]
pub struct GmmFit {
    pub theta_hat: DVector<f64>,
    pub g_bar: DVector<f64>,
    pub g_tilde: DMatrix<f64>,
    pub v_hat: DMatrix<f64>,
    pub omega: VarianceComponents,
    pub sandwich: DMatrix<f64>,
    pub std_error: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub degenerate_flag: bool,
    pub l_hat: usize,
    pub p: f64,
    pub c_bar: usize,
}

fn moment_values(
    panel: &TwoWayPanel,
    cells: &[usize],
    model: &dyn MomentModel,
    theta: &[f64],
) -> Result<SelectedValues> {
    SelectedValues::evaluate_with(panel, cells, model.moment_dim(), |rec, out| model.evaluate(rec, theta, out))
}

fn average_jacobian(
    panel: &TwoWayPanel,
    cells: &[usize],
    model: &dyn MomentModel,
    theta: &[f64],
) -> Result<DMatrix<f64>> {
    let (m, k) = (model.moment_dim(), model.param_dim());
    let avg = SelectedValues::evaluate_with(panel, cells, m * k, |rec, out| model.jacobian(rec, theta, out))?.mean();
    Ok(DMatrix::from_column_slice(m, k, avg.as_slice()))
}

/// Subsample average of the moments at `theta`.
pub fn g_bar(
    panel: &TwoWayPanel,
    mask: &SketchMask,
    model: &dyn MomentModel,
    theta: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_theta(model, theta)?;
    Ok(moment_values(panel, mask.selected(), model, theta.as_slice())?.mean())
}

fn check_theta(model: &dyn MomentModel, theta: &DVector<f64>) -> Result<()> {
    if theta.len() != model.param_dim() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} parameters", model.param_dim()),
            found: format!("{}", theta.len()),
        });
    }
    if theta.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidArgument("parameter vector is not finite".into()));
    }
    Ok(())
}

fn check_weight(v: &DMatrix<f64>, m: usize) -> Result<()> {
    if v.shape() != (m, m) {
        return Err(Error::DimensionMismatch {
            expected: format!("{m}x{m} weight"),
            found: format!("{:?}", v.shape()),
        });
    }
    let scale = v.amax().max(f64::MIN_POSITIVE);
    if (v - v.transpose()).amax() > 1e-10 * scale {
        return Err(Error::InvalidArgument("weight matrix is not symmetric".into()));
    }
    if linalg::min_eigenvalue(v) < -1e-10 * v.trace().abs().max(scale) {
        return Err(Error::InvalidArgument("weight matrix is not positive semidefinite".into()));
    }
    Ok(())
}

struct Solution {
    theta: DVector<f64>,
    iterations: usize,
}

fn solve_linear(panel: &TwoWayPanel, cells: &[usize], model: &dyn MomentModel, v: &DMatrix<f64>) -> Result<Solution> {
    let k = model.param_dim();
    // g_bar(theta) = g_y - G theta with G = -J_bar and g_y = g_bar(0)
    let g = -average_jacobian(panel, cells, model, &vec![0.0; k])?;
    let g_y = moment_values(panel, cells, model, &vec![0.0; k])?.mean();
    let gtv = g.transpose() * v;
    let a = &gtv * &g;
    let theta = linalg::checked_solve(&a, &(&gtv * g_y)).map_err(|condition| Error::SingularDesign { condition })?;
    Ok(Solution { theta, iterations: 1 })
}

fn solve_gauss_newton(
    panel: &TwoWayPanel,
    cells: &[usize],
    model: &dyn MomentModel,
    v: &DMatrix<f64>,
    theta0: DVector<f64>,
    max_iterations: usize,
) -> Result<Solution> {
    let objective = |theta: &DVector<f64>| -> Result<(DVector<f64>, f64)> {
        let gb = moment_values(panel, cells, model, theta.as_slice())?.mean();
        let q = (gb.transpose() * v * &gb)[(0, 0)];
        Ok((gb, q))
    };
    let mut theta = theta0;
    let (mut gb, mut q) = objective(&theta)?;
    let mut scale = None;
    for iter in 0..=max_iterations {
        let jac = average_jacobian(panel, cells, model, theta.as_slice())?;
        let jtv = jac.transpose() * v;
        let grad = &jtv * &gb;
        let gnorm = max_abs(&grad);
        let scale = *scale.get_or_insert(gnorm.max(1.0));
        if gnorm < GRADIENT_TOL * scale {
            return Ok(Solution { theta, iterations: iter });
        }
        if iter == max_iterations {
            break;
        }
        let a = &jtv * &jac;
        let step = linalg::checked_solve(&a, &(-&grad)).map_err(|condition| Error::SingularDesign { condition })?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let cand = &theta + &step * t;
            let (cand_gb, cand_q) = objective(&cand)?;
            if cand_q < q {
                theta = cand;
                gb = cand_gb;
                q = cand_q;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // no descent possible: rounding floor
            if gnorm < 1e-6 * scale {
                return Ok(Solution { theta, iterations: iter });
            }
            return Err(Error::NonConvergence { iterations: iter, separation: false });
        }
    }
    Err(Error::NonConvergence { iterations: max_iterations, separation: false })
}

/// Variance pieces of the sketched GMM estimator at `theta_hat`.
pub fn gmm_variance(
    panel: &TwoWayPanel,
    mask: &SketchMask,
    model: &dyn MomentModel,
    theta_hat: &DVector<f64>,
    v_hat: &DMatrix<f64>,
    mode: VarianceMode,
    center_moments: bool,
) -> Result<GmmVariance> {
    check_theta(model, theta_hat)?;
    check_weight(v_hat, model.moment_dim())?;
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
    let mut values = moment_values(panel, cells, model, theta)?;
    let g_tilde = average_jacobian(panel, cells, model, theta)?;

    // magnitude of each moment's pieces: the residual part and the fitted part
    let fitted = SelectedValues::evaluate_with(panel, cells, model.moment_dim(), |rec, out| {
        let m = out.len();
        let mut jac = vec![0.0; m * theta.len()];
        model.jacobian(rec, theta, &mut jac);
        for (r, o) in out.iter_mut().enumerate() {
            *o = (0..theta.len()).map(|l| jac[l * m + r] * theta[l]).sum();
        }
    })?;
    let scale_sq = values.mean_square() + fitted.mean_square();

    if center_moments {
        let mean = values.mean();
        values = values.centered(&mean);
    }
    let gamma_1 = gamma_a_hat(&values, dims.c_bar as f64)?;
    let gamma_2 = gamma_b_hat(&values)?;
    let omega = combine_variance(gamma_1, gamma_2, lambda_hat(&dims, panel.n_obs(), mask.p())?)?;

    let gtv = g_tilde.transpose() * v_hat;
    let bread_inv = checked_inverse(&(&gtv * &g_tilde)).map_err(|condition| Error::SingularDesign { condition })?;
    let meat = &gtv * &omega.gamma * gtv.transpose();
    let sandwich = sandwich(&bread_inv, &meat);
    let std_error = moments::standard_errors(&sandwich, dims.c_bar);
    let degenerate_flag = moments::is_degenerate(&omega.gamma, &scale_sq);
    Ok(GmmVariance { g_tilde, omega, sandwich, std_error, degenerate_flag })
}

/// Fits the sketched GMM estimator and its sandwich covariance.
pub fn gmm_fit(
    panel: &TwoWayPanel,
    mask: &SketchMask,
    model: &dyn MomentModel,
    options: &GmmOptions,
) -> Result<GmmFit> {
    let (m, k) = (model.moment_dim(), model.param_dim());
    if m < k {
        return Err(Error::InvalidArgument(format!("{m} moments cannot identify {k} parameters")));
    }
    if mask.l_hat() == 0 {
        return Err(Error::EmptySketch);
    }
    if mask.l_hat() < k {
        return Err(Error::InvalidArgument(format!("sketch of {} cells cannot fit {k} parameters", mask.l_hat())));
    }
    let mut v = options.weight.clone().unwrap_or_else(|| DMatrix::identity(m, m));
    check_weight(&v, m)?;
    let theta0 = match &options.theta0 {
        Some(t) => {
            check_theta(model, t)?;
            t.clone()
        }
        None => DVector::zeros(k),
    };
    let cells = mask.selected();
    let solve = |v: &DMatrix<f64>, start: DVector<f64>| match model.kind() {
        ModelKind::LinearIv => solve_linear(panel, cells, model, v),
        ModelKind::Custom => solve_gauss_newton(panel, cells, model, v, start, options.max_iterations),
    };

    let mut sol = solve(&v, theta0)?;
    if options.two_step {
        let values = moment_values(panel, cells, model, sol.theta.as_slice())?;
        let gamma_2 = gamma_b_hat(&values)?;
        v = checked_inverse(&gamma_2).map_err(|condition| Error::SingularDesign { condition })?;
        linalg::symmetrize(&mut v);
        let first = sol.iterations;
        sol = solve(&v, sol.theta)?;
        sol.iterations += first;
    }

    let g_bar = moment_values(panel, cells, model, sol.theta.as_slice())?.mean();
    let var = gmm_variance(panel, mask, model, &sol.theta, &v, options.variance_mode, options.center_moments)?;
    Ok(GmmFit {
        theta_hat: sol.theta,
        g_bar,
        g_tilde: var.g_tilde,
        v_hat: v,
        omega: var.omega,
        sandwich: var.sandwich,
        std_error: var.std_error,
        iterations: sol.iterations,
        converged: true,
        degenerate_flag: var.degenerate_flag,
        l_hat: mask.l_hat(),
        p: mask.p(),
        c_bar: panel.dims().c_bar,
    })
}
