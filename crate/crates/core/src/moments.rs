//! Subsample means and their two-component variance.
//!
//! For a k-vector functional `f` evaluated on the selected cells, the
//! variance of `sqrt(C) * mean` is estimated by `gamma = gamma_a + lambda * gamma_b`:
//!
//! * `gamma_a = C / L^2 * (sum_i S_i S_i' + sum_j T_j T_j')`, where `S_i` and
//!   `T_j` are row and column sums over selected cells. This is the
//!   cluster-covariance part and equals the pairwise double sums over cells
//!   sharing a row or a column, both diagonals included.
//! * `gamma_b = 1 / L * sum v v'`, the own-variance part.
//! * `lambda = (C / n_obs) * (1 - p) / p`, zero without subsampling.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::linalg::symmetrize;
use crate::panel::TwoWayPanel;
use crate::par;
use crate::sketch::{lambda_hat, SketchMask};

/// Relative tolerance below which a variance diagonal counts as degenerate.
pub const DEGENERACY_TOL: f64 = 1e-12;

/// A vector-valued function of one cell's record.
pub trait CellMap: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, record: &[f64], out: &mut [f64]);
}

/// Selects fields of the record by index.
#[derive(Debug, Clone)]
pub struct Fields(pub Vec<usize>);

impl CellMap for Fields {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn eval(&self, record: &[f64], out: &mut [f64]) {
        for (o, &f) in out.iter_mut().zip(&self.0) {
            *o = record[f];
        }
    }
}

/// Wraps a closure as a [`CellMap`].
pub struct FnMap<F> {
    dim: usize,
    f: F,
}

pub fn cell_fn<F>(dim: usize, f: F) -> FnMap<F>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    FnMap { dim, f }
}

impl<F> CellMap for FnMap<F>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, record: &[f64], out: &mut [f64]) {
        (self.f)(record, out)
    }
}

/// k-vector values attached to the selected cells, ordered by (row, column).
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedValues {
    k: usize,
    rows: Vec<u32>,
    cols: Vec<u32>,
    n_cols: usize,
    data: Vec<f64>,
}

const EVAL_CHUNK: usize = 1024;

impl SelectedValues {
    /// Evaluates `f` on every cell kept by `mask`.
    pub fn evaluate(panel: &TwoWayPanel, mask: &SketchMask, f: &dyn CellMap) -> Result<Self> {
        Self::evaluate_with(panel, mask.selected(), f.dim(), |rec, out| f.eval(rec, out))
    }

    pub(crate) fn evaluate_with<F>(panel: &TwoWayPanel, cells: &[usize], k: usize, f: F) -> Result<Self>
    where
        F: Fn(&[f64], &mut [f64]) + Sync,
    {
        if cells.is_empty() {
            return Err(Error::EmptySketch);
        }
        let n_chunks = cells.len().div_ceil(EVAL_CHUNK);
        let chunks = par::map_sized(cells.len(), n_chunks, |ci| {
            let part = &cells[ci * EVAL_CHUNK..((ci + 1) * EVAL_CHUNK).min(cells.len())];
            let mut out = vec![0.0; part.len() * k];
            for (slot, &c) in out.chunks_exact_mut(k.max(1)).zip(part) {
                f(panel.record(c), slot);
            }
            out
        });
        let data = chunks.concat();
        Ok(Self {
            k,
            rows: cells.iter().map(|&c| panel.row(c) as u32).collect(),
            cols: cells.iter().map(|&c| panel.col(c) as u32).collect(),
            n_cols: panel.n_cols(),
            data,
        })
    }

    /// Builds values from `(row, col, value)` triples with dense indices.
    pub fn from_entries(k: usize, n_cols: usize, mut entries: Vec<(usize, usize, Vec<f64>)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptySketch);
        }
        entries.sort_by_key(|e| (e.0, e.1));
        if entries.windows(2).any(|w| (w[0].0, w[0].1) == (w[1].0, w[1].1)) {
            let e = &entries[0];
            return Err(Error::DuplicateCell { i: e.0 as i64, j: e.1 as i64 });
        }
        let mut data = Vec::with_capacity(entries.len() * k);
        for (r, c, v) in &entries {
            if v.len() != k || *c >= n_cols {
                return Err(Error::DimensionMismatch {
                    expected: format!("{k}-vector in column < {n_cols}"),
                    found: format!("{}-vector at ({r}, {c})", v.len()),
                });
            }
            data.extend_from_slice(v);
        }
        Ok(Self {
            k,
            rows: entries.iter().map(|e| e.0 as u32).collect(),
            cols: entries.iter().map(|e| e.1 as u32).collect(),
            n_cols,
            data,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Number of selected cells, `L`.
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn value(&self, e: usize) -> &[f64] {
        &self.data[e * self.k..(e + 1) * self.k]
    }

    pub fn row(&self, e: usize) -> usize {
        self.rows[e] as usize
    }

    pub fn col(&self, e: usize) -> usize {
        self.cols[e] as usize
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut acc = DVector::zeros(self.k);
        for v in self.data.chunks_exact(self.k.max(1)) {
            for (a, x) in acc.iter_mut().zip(v) {
                *a += x;
            }
        }
        acc / self.len() as f64
    }

    /// Per-coordinate mean of squared values.
    pub fn mean_square(&self) -> DVector<f64> {
        let mut acc = DVector::zeros(self.k);
        for v in self.data.chunks_exact(self.k.max(1)) {
            for (a, x) in acc.iter_mut().zip(v) {
                *a += x * x;
            }
        }
        acc / self.len() as f64
    }

    pub fn centered(mut self, center: &DVector<f64>) -> Self {
        for v in self.data.chunks_exact_mut(self.k.max(1)) {
            for (x, c) in v.iter_mut().zip(center.iter()) {
                *x -= c;
            }
        }
        self
    }

    /// Sum of `u u'` over per-group sums `u`, groups given as index runs.
    fn grouped_gram(&self, order: &[usize], bounds: &[usize]) -> DMatrix<f64> {
        let k = self.k;
        let n_groups = bounds.len() - 1;
        let sums = par::map_sized(self.len(), n_groups, |g| {
            let mut s = vec![0.0; k];
            for &e in &order[bounds[g]..bounds[g + 1]] {
                for (a, x) in s.iter_mut().zip(self.value(e)) {
                    *a += x;
                }
            }
            s
        });
        let mut gram = DMatrix::zeros(k, k);
        for s in &sums {
            for a in 0..k {
                for b in a..k {
                    gram[(a, b)] += s[a] * s[b];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                gram[(a, b)] = gram[(b, a)];
            }
        }
        gram
    }

    fn row_groups(&self) -> (Vec<usize>, Vec<usize>) {
        let order: Vec<usize> = (0..self.len()).collect();
        let mut bounds = vec![0];
        for e in 1..self.len() {
            if self.rows[e] != self.rows[e - 1] {
                bounds.push(e);
            }
        }
        bounds.push(self.len());
        (order, bounds)
    }

    /// Stable counting sort by column.
    fn col_groups(&self) -> (Vec<usize>, Vec<usize>) {
        let mut start = vec![0usize; self.n_cols + 1];
        for &c in &self.cols {
            start[c as usize + 1] += 1;
        }
        for c in 0..self.n_cols {
            start[c + 1] += start[c];
        }
        let mut next = start.clone();
        let mut order = vec![0usize; self.len()];
        for (e, &c) in self.cols.iter().enumerate() {
            order[next[c as usize]] = e;
            next[c as usize] += 1;
        }
        let mut bounds: Vec<usize> = vec![0];
        for c in 0..self.n_cols {
            if start[c + 1] > start[c] {
                bounds.push(start[c + 1]);
            }
        }
        (order, bounds)
    }
}

/// `(1 / L) * sum f(W)` over the selected cells.
pub fn subsample_mean(panel: &TwoWayPanel, mask: &SketchMask, f: &dyn CellMap) -> Result<DVector<f64>> {
    Ok(SelectedValues::evaluate(panel, mask, f)?.mean())
}

/// Own-variance component `(1 / L) * sum v v'`.
pub fn gamma_b_hat(values: &SelectedValues) -> Result<DMatrix<f64>> {
    if values.is_empty() {
        return Err(Error::EmptySketch);
    }
    let k = values.k();
    let mut m = DMatrix::zeros(k, k);
    for e in 0..values.len() {
        let v = values.value(e);
        for a in 0..k {
            for b in a..k {
                m[(a, b)] += v[a] * v[b];
            }
        }
    }
    m /= values.len() as f64;
    for a in 0..k {
        for b in 0..a {
            m[(a, b)] = m[(b, a)];
        }
    }
    Ok(m)
}

/// Cluster component `C / L^2 * (sum_i S_i S_i' + sum_j T_j T_j')`.
pub fn gamma_a_hat(values: &SelectedValues, c_bar: f64) -> Result<DMatrix<f64>> {
    if values.is_empty() {
        return Err(Error::EmptySketch);
    }
    let (order, bounds) = values.row_groups();
    let rows = values.grouped_gram(&order, &bounds);
    let (order, bounds) = values.col_groups();
    let cols = values.grouped_gram(&order, &bounds);
    let l = values.len() as f64;
    let mut m = (rows + cols) * (c_bar / (l * l));
    symmetrize(&mut m);
    Ok(m)
}

/// `gamma = gamma_a + lambda * gamma_b` together with its parts.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceComponents {
    pub gamma_a: DMatrix<f64>,
    pub gamma_b: DMatrix<f64>,
    pub lambda_hat: f64,
    pub gamma: DMatrix<f64>,
}

pub fn combine_variance(gamma_a: DMatrix<f64>, gamma_b: DMatrix<f64>, lambda_hat: f64) -> Result<VarianceComponents> {
    if gamma_a.shape() != gamma_b.shape() || gamma_a.nrows() != gamma_a.ncols() {
        return Err(Error::DimensionMismatch {
            expected: format!("square {:?}", gamma_a.shape()),
            found: format!("{:?}", gamma_b.shape()),
        });
    }
    if lambda_hat.is_nan() || lambda_hat < 0.0 {
        return Err(Error::InvalidArgument(format!("lambda_hat must be non-negative, got {lambda_hat}")));
    }
    let gamma = if lambda_hat == 0.0 { gamma_a.clone() } else { &gamma_a + &gamma_b * lambda_hat };
    Ok(VarianceComponents { gamma_a, gamma_b, lambda_hat, gamma })
}

/// Which cells feed the variance estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    /// The selected cells only.
    #[default]
    Subsample,
    /// Every cell of the panel; the point estimate still uses the sketch.
    FullSample,
}

impl std::str::FromStr for VarianceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "subsample" => Ok(VarianceMode::Subsample),
            "full" | "full_sample" => Ok(VarianceMode::FullSample),
            _ => Err(Error::InvalidArgument(format!("unknown variance mode `{s}`"))),
        }
    }
}

impl std::fmt::Display for VarianceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            VarianceMode::Subsample => "subsample",
            VarianceMode::FullSample => "full",
        })
    }
}

/// Two-sided normal critical value `z_{1 - alpha/2}`.
pub fn z_critical(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(normal.inverse_cdf(1.0 - alpha / 2.0))
}

#[derive(Debug, Clone)]
pub struct InferenceReport {
    pub estimate: DVector<f64>,
    pub variance: VarianceComponents,
    pub c_bar: usize,
    pub std_error: DVector<f64>,
    pub ci_lower: DVector<f64>,
    pub ci_upper: DVector<f64>,
    pub alpha: f64,
    pub l_hat: usize,
    pub p: f64,
    pub n_obs: usize,
    pub variance_mode: VarianceMode,
    pub degenerate_flag: bool,
}

impl InferenceReport {
    pub fn covers(&self, coord: usize, value: f64) -> bool {
        self.ci_lower[coord] <= value && value <= self.ci_upper[coord]
    }
}

/// Whether any diagonal entry of `gamma` is negligible against the data scale.
pub(crate) fn is_degenerate(gamma: &DMatrix<f64>, scale_sq: &DVector<f64>) -> bool {
    (0..gamma.nrows()).any(|l| gamma[(l, l)] <= DEGENERACY_TOL * scale_sq[l])
}

pub(crate) fn standard_errors(cov: &DMatrix<f64>, c_bar: usize) -> DVector<f64> {
    DVector::from_iterator(cov.nrows(), (0..cov.nrows()).map(|l| (cov[(l, l)].max(0.0) / c_bar as f64).sqrt()))
}

/// Estimates `E[f(W)]` from the sketch with a normal confidence interval.
pub fn mean_inference(
    panel: &TwoWayPanel,
    mask: &SketchMask,
    f: &dyn CellMap,
    alpha: f64,
    mode: VarianceMode,
) -> Result<InferenceReport> {
    let z = z_critical(alpha)?;
    let dims = panel.dims();
    let sketch_values = SelectedValues::evaluate(panel, mask, f)?;
    let estimate = sketch_values.mean();

    let raw = match mode {
        VarianceMode::Subsample => sketch_values,
        VarianceMode::FullSample => SelectedValues::evaluate(panel, &SketchMask::full(panel), f)?,
    };
    let scale_sq = raw.mean_square();
    let centered = raw.centered(&estimate);
    let gamma_a = gamma_a_hat(&centered, dims.c_bar as f64)?;
    let gamma_b = gamma_b_hat(&centered)?;
    let lambda = lambda_hat(&dims, panel.n_obs(), mask.p())?;
    let variance = combine_variance(gamma_a, gamma_b, lambda)?;

    let std_error = standard_errors(&variance.gamma, dims.c_bar);
    let ci_lower = &estimate - &std_error * z;
    let ci_upper = &estimate + &std_error * z;
    let degenerate_flag = is_degenerate(&variance.gamma, &scale_sq);
    Ok(InferenceReport {
        estimate,
        variance,
        c_bar: dims.c_bar,
        std_error,
        ci_lower,
        ci_upper,
        alpha,
        l_hat: mask.l_hat(),
        p: mask.p(),
        n_obs: panel.n_obs(),
        variance_mode: mode,
        degenerate_flag,
    })
}
