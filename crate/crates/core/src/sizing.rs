//! Data-driven choice of the selection rate `p = c / C`.
//!
//! A preliminary sketch at `p_pre = c_pre / C` yields estimates of the two
//! variance components; `c` is then set so that the approximate variance of
//! the sketched mean, `(gamma_a + (C / n) * ((C - c) / c) * gamma_b) / C`,
//! equals a target `V_max`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::moments::{gamma_a_hat, gamma_b_hat, CellMap, SelectedValues, DEGENERACY_TOL};
use crate::panel::TwoWayPanel;
use crate::sketch::{generate_mask, SketchConfig};

/// Expected subsample sizes below this trigger a warning.
pub const MIN_EXPECTED_SUBSAMPLE: f64 = 30.0;

#[derive(Debug, Clone, Serialize)]
pub struct SizingResult {
    pub c_star: f64,
    pub p_star: f64,
    pub gamma_a_pre: f64,
    pub gamma_b_pre: f64,
    pub v_max: f64,
    pub c_pre: f64,
    pub l_pre: usize,
    pub c_bar: usize,
    pub n_obs: usize,
    pub feasible: bool,
    pub small_subsample_warning: bool,
}

/// Right-hand side of the sizing equation, `gamma_a + (C / n) * ((C - c) / c) * gamma_b`.
pub fn approximate_scaled_variance(gamma_a: f64, gamma_b: f64, c_bar: usize, n_obs: usize, c: f64) -> f64 {
    let cb = c_bar as f64;
    gamma_a + cb / n_obs as f64 * ((cb - c) / c) * gamma_b
}

/// Solves the sizing equation for `c` given preliminary component estimates.
pub fn solve_c_star(gamma_a: f64, gamma_b: f64, c_bar: usize, n_obs: usize, v_max: f64) -> Result<f64> {
    if !(v_max > 0.0 && v_max.is_finite()) {
        return Err(Error::InvalidArgument(format!("v_max must be positive, got {v_max}")));
    }
    let cb = c_bar as f64;
    let target = cb * v_max;
    if target <= gamma_a {
        return Err(Error::TargetBelowIrreducible { target, gamma_a });
    }
    if gamma_b.is_nan() || gamma_b <= 0.0 {
        return Err(Error::DegeneratePreliminary { gamma_b });
    }
    let ratio = n_obs as f64 / cb * (target - gamma_a) / gamma_b;
    Ok(cb / (1.0 + ratio))
}

/// Preliminary sketch plus closed-form solve for `c*`; `f` must be scalar.
pub fn choose_c_star(panel: &TwoWayPanel, f: &dyn CellMap, c_pre: f64, v_max: f64, seed: u64) -> Result<SizingResult> {
    if f.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: "scalar functional".into(),
            found: format!("dimension {}", f.dim()),
        });
    }
    if !(c_pre > 0.0 && c_pre.is_finite()) {
        return Err(Error::InvalidArgument(format!("c_pre must be positive, got {c_pre}")));
    }
    let dims = panel.dims();
    let n_obs = panel.n_obs();
    let p_pre = (c_pre / dims.c_bar as f64).min(1.0);
    let mask = generate_mask(panel, SketchConfig { p: p_pre, seed })?;
    let raw = SelectedValues::evaluate(panel, &mask, f)?;
    let scale_sq = raw.mean_square()[0];
    let mean = raw.mean();
    let values = raw.centered(&mean);
    let gamma_a_pre = gamma_a_hat(&values, dims.c_bar as f64)?[(0, 0)];
    let gamma_b_pre = gamma_b_hat(&values)?[(0, 0)];
    if gamma_b_pre <= DEGENERACY_TOL * scale_sq {
        return Err(Error::DegeneratePreliminary { gamma_b: gamma_b_pre });
    }
    let c_star = solve_c_star(gamma_a_pre, gamma_b_pre, dims.c_bar, n_obs, v_max)?;
    let p_star = c_star / dims.c_bar as f64;
    let small = n_obs as f64 * p_star < MIN_EXPECTED_SUBSAMPLE;
    if small {
        log::warn!("chosen rate p = {p_star:.4e} keeps only {:.1} cells in expectation", n_obs as f64 * p_star);
    }
    Ok(SizingResult {
        c_star,
        p_star,
        gamma_a_pre,
        gamma_b_pre,
        v_max,
        c_pre,
        l_pre: mask.l_hat(),
        c_bar: dims.c_bar,
        n_obs,
        feasible: true,
        small_subsample_warning: small,
    })
}
