//! Monte Carlo designs for two-way panels and the coverage-experiment runner.

use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::moments::{mean_inference, Fields, VarianceMode};
use crate::panel::TwoWayPanel;
use crate::par::Execution;
use crate::rng::{derive_seed, stream_rng};
use crate::sketch::{generate_mask, resolve_p_rule, PRule, SketchConfig};

/// Extra mask draws allowed when a sketch comes back empty.
pub const MAX_EMPTY_RETRIES: u32 = 10;

const COVERAGE_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    /// `Y = sa * alpha_i + sb * beta_j + se * eps_ij`, alpha a standardized log-normal.
    Separable { sigma_a2: f64, sigma_b2: f64, sigma_e2: f64 },
    /// `Y = (alpha_i - mu_a)(beta_j - mu_b) - mu_a * mu_b + eps_ij`, all shocks standard normal.
    Nonseparable { mu_a: f64, mu_b: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DesignSpec {
    /// 1 to 4 for the built-in designs, 0 for anything else.
    pub id: u8,
    #[serde(flatten)]
    pub family: Family,
    pub n: usize,
    pub m: usize,
    /// Population mean of `Y`.
    pub truth: f64,
}

impl DesignSpec {
    pub fn new(id: u8, family: Family, n: usize, m: usize) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::EmptyPanel);
        }
        if let Family::Separable { sigma_a2, sigma_b2, sigma_e2 } = family {
            if [sigma_a2, sigma_b2, sigma_e2].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(Error::InvalidArgument("design variances must be non-negative".into()));
            }
        }
        Ok(DesignSpec { id, family, n, m, truth: 0.0 })
    }

    /// One of the four built-in designs on an `n x m` panel.
    pub fn builtin(id: u8, n: usize, m: usize) -> Result<Self> {
        let family = match id {
            1 => Family::Separable { sigma_a2: 0.5, sigma_b2: 0.1, sigma_e2: 0.2 },
            2 => Family::Separable { sigma_a2: 0.0, sigma_b2: 0.0, sigma_e2: 0.2 },
            3 => Family::Nonseparable { mu_a: 1.0, mu_b: 1.0 },
            4 => Family::Nonseparable { mu_a: 0.0, mu_b: 0.0 },
            _ => return Err(Error::InvalidArgument(format!("unknown design {id}, expected 1-4"))),
        };
        DesignSpec::new(id, family, n, m)
    }

    pub fn draw(&self, seed: u64) -> Result<TwoWayPanel> {
        match self.family {
            Family::Separable { sigma_a2, sigma_b2, sigma_e2 } => {
                dgp_separable(self.n, self.m, sigma_a2, sigma_b2, sigma_e2, seed)
            }
            Family::Nonseparable { mu_a, mu_b } => dgp_nonseparable(self.n, self.m, mu_a, mu_b, seed),
        }
    }
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// `(exp(z) - e^{1/2}) / sqrt((e - 1) e)`: mean zero, unit variance.
pub fn standardized_lognormal(z: f64) -> f64 {
    let e = std::f64::consts::E;
    (z.exp() - e.sqrt()) / ((e - 1.0) * e).sqrt()
}

fn y_panel(n: usize, m: usize, data: Vec<f64>) -> Result<TwoWayPanel> {
    TwoWayPanel::balanced(vec!["y".into()], n, m, data)
}

fn check_shocks(n: usize, m: usize, alpha: &[f64], beta: &[f64], eps: &[f64]) -> Result<()> {
    if n == 0 || m == 0 {
        return Err(Error::EmptyPanel);
    }
    if alpha.len() != n || beta.len() != m || eps.len() != n * m {
        return Err(Error::DimensionMismatch {
            expected: format!("{n} row, {m} column and {} cell shocks", n * m),
            found: format!("{}, {} and {}", alpha.len(), beta.len(), eps.len()),
        });
    }
    Ok(())
}

/// Builds a separable panel from given shocks (`alpha` already standardized).
pub fn separable_from_shocks(
    alpha: &[f64],
    beta: &[f64],
    eps: &[f64],
    sigma_a2: f64,
    sigma_b2: f64,
    sigma_e2: f64,
) -> Result<TwoWayPanel> {
    let (n, m) = (alpha.len(), beta.len());
    check_shocks(n, m, alpha, beta, eps)?;
    let (sa, sb, se) = (sigma_a2.sqrt(), sigma_b2.sqrt(), sigma_e2.sqrt());
    let data = (0..n * m).map(|c| sa * alpha[c / m] + sb * beta[c % m] + se * eps[c]).collect();
    y_panel(n, m, data)
}

/// Builds a nonseparable panel from given standard-normal shocks.
pub fn nonseparable_from_shocks(alpha: &[f64], beta: &[f64], eps: &[f64], mu_a: f64, mu_b: f64) -> Result<TwoWayPanel> {
    let (n, m) = (alpha.len(), beta.len());
    check_shocks(n, m, alpha, beta, eps)?;
    let data = (0..n * m).map(|c| (alpha[c / m] - mu_a) * (beta[c % m] - mu_b) - mu_a * mu_b + eps[c]).collect();
    y_panel(n, m, data)
}

pub fn dgp_separable(
    n: usize,
    m: usize,
    sigma_a2: f64,
    sigma_b2: f64,
    sigma_e2: f64,
    seed: u64,
) -> Result<TwoWayPanel> {
    DesignSpec::new(0, Family::Separable { sigma_a2, sigma_b2, sigma_e2 }, n, m)?;
    let alpha: Vec<f64> =
        normals(&mut stream_rng(seed, 0, "alpha"), n).into_iter().map(standardized_lognormal).collect();
    let beta = normals(&mut stream_rng(seed, 0, "beta"), m);
    let eps = normals(&mut stream_rng(seed, 0, "eps"), n * m);
    separable_from_shocks(&alpha, &beta, &eps, sigma_a2, sigma_b2, sigma_e2)
}

pub fn dgp_nonseparable(n: usize, m: usize, mu_a: f64, mu_b: f64, seed: u64) -> Result<TwoWayPanel> {
    DesignSpec::new(0, Family::Nonseparable { mu_a, mu_b }, n, m)?;
    let alpha = normals(&mut stream_rng(seed, 0, "alpha"), n);
    let beta = normals(&mut stream_rng(seed, 0, "beta"), m);
    let eps = normals(&mut stream_rng(seed, 0, "eps"), n * m);
    nonseparable_from_shocks(&alpha, &beta, &eps, mu_a, mu_b)
}

/// Field names of [`dgp_demand`] panels.
pub const DEMAND_FIELDS: [&str; 4] = ["lnshare", "lnprice", "trend", "cost"];

/// Synthetic log-share demand panel (rows are markets, columns products).
///
/// `lnshare = theta[0] * lnprice + theta[1] * trend + a_i + b_j + e_ij`, where
/// `lnprice` loads on the demand shocks and `cost` is a valid instrument.
/// `trend` varies by column only and serves as its own instrument.
pub fn dgp_demand(n: usize, m: usize, theta: [f64; 2], seed: u64) -> Result<TwoWayPanel> {
    if n == 0 || m == 0 {
        return Err(Error::EmptyPanel);
    }
    let a: Vec<f64> = normals(&mut stream_rng(seed, 0, "demand_row"), n).iter().map(|v| 0.3 * v).collect();
    let b: Vec<f64> = normals(&mut stream_rng(seed, 0, "demand_col"), m).iter().map(|v| 0.3 * v).collect();
    let cost_row: Vec<f64> = normals(&mut stream_rng(seed, 0, "cost_row"), n).iter().map(|v| 0.5 * v).collect();
    let cost_col: Vec<f64> = normals(&mut stream_rng(seed, 0, "cost_col"), m).iter().map(|v| 0.5 * v).collect();
    let cost_cell = normals(&mut stream_rng(seed, 0, "cost_cell"), n * m);
    let u = normals(&mut stream_rng(seed, 0, "price_shock"), n * m);
    let v = normals(&mut stream_rng(seed, 0, "share_shock"), n * m);

    let mut data = Vec::with_capacity(n * m * 4);
    for c in 0..n * m {
        let (i, j) = (c / m, c % m);
        let trend = (j as f64 + 0.5) / m as f64 - 0.5;
        let cost = cost_row[i] + cost_col[j] + cost_cell[c];
        let lnprice = cost + (a[i] + b[j]) + u[c];
        let error = a[i] + b[j] + 0.3 * u[c] + 0.3 * v[c];
        let lnshare = theta[0] * lnprice + theta[1] * trend + error;
        data.extend_from_slice(&[lnshare, lnprice, trend, cost]);
    }
    TwoWayPanel::balanced(DEMAND_FIELDS.iter().map(|s| s.to_string()).collect(), n, m, data)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub design: u8,
    pub n: usize,
    pub m: usize,
    pub rule: PRule,
    pub p: f64,
    pub reps: usize,
    pub bias: f64,
    pub sd: f64,
    pub rmse: f64,
    pub coverage95: f64,
    /// Replications whose variance estimate was flagged degenerate.
    pub degenerate: usize,
    /// Mask redraws caused by empty sketches.
    pub empty_retries: usize,
}

#[derive(Debug, Clone, Copy)]
struct Draw {
    estimate: f64,
    covers: bool,
    degenerate: bool,
    retries: u32,
}

fn mask_seed(base: u64, rep: u64, attempt: u32) -> u64 {
    let seed = derive_seed(base, rep, "mask");
    if attempt == 0 {
        seed
    } else {
        derive_seed(seed, attempt as u64, "retry")
    }
}

fn one_replication(
    design: &DesignSpec,
    probs: &[f64],
    rep: u64,
    mode: VarianceMode,
    base_seed: u64,
) -> Result<Vec<Draw>> {
    let panel = design.draw(derive_seed(base_seed, rep, "panel"))?;
    let field = Fields(vec![0]);
    probs
        .iter()
        .map(|&p| {
            let mut attempt = 0;
            let mask = loop {
                match generate_mask(&panel, SketchConfig::new(p, mask_seed(base_seed, rep, attempt))?) {
                    Err(Error::EmptySketch) if attempt < MAX_EMPTY_RETRIES => {
                        attempt += 1;
                        log::warn!("replication {rep}: empty sketch at p = {p}, redrawing (attempt {attempt})");
                    }
                    other => break other?,
                }
            };
            let report = mean_inference(&panel, &mask, &field, COVERAGE_ALPHA, mode)?;
            Ok(Draw {
                estimate: report.estimate[0],
                covers: report.covers(0, design.truth),
                degenerate: report.degenerate_flag,
                retries: attempt,
            })
        })
        .collect()
}

/// Runs `reps` replications, drawing one panel per replication and one
/// nested family of masks shared by all `rules`.
pub fn run_experiments(
    design: &DesignSpec,
    rules: &[PRule],
    reps: usize,
    mode: VarianceMode,
    base_seed: u64,
    execution: Execution,
) -> Result<Vec<MetricsRow>> {
    if reps < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 replications, got {reps}")));
    }
    if rules.is_empty() {
        return Err(Error::InvalidArgument("no subsampling rules given".into()));
    }
    let dims = crate::panel::PanelDims::new(design.n, design.m)?;
    let probs = rules.iter().map(|&r| resolve_p_rule(r, &dims)).collect::<Result<Vec<_>>>()?;

    let draws = execution
        .map(reps, |r| one_replication(design, &probs, r as u64, mode, base_seed))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    Ok(rules
        .iter()
        .zip(&probs)
        .enumerate()
        .map(|(k, (&rule, &p))| {
            let column: Vec<Draw> = draws.iter().map(|d| d[k]).collect();
            aggregate(design, rule, p, &column)
        })
        .collect())
}

pub fn run_experiment(
    design: &DesignSpec,
    rule: PRule,
    reps: usize,
    mode: VarianceMode,
    base_seed: u64,
) -> Result<MetricsRow> {
    let mut rows = run_experiments(design, &[rule], reps, mode, base_seed, Execution::default())?;
    Ok(rows.remove(0))
}

fn aggregate(design: &DesignSpec, rule: PRule, p: f64, draws: &[Draw]) -> MetricsRow {
    let reps = draws.len();
    let mean = draws.iter().map(|d| d.estimate).sum::<f64>() / reps as f64;
    let ss = draws.iter().map(|d| (d.estimate - mean).powi(2)).sum::<f64>();
    let sd = (ss / (reps - 1) as f64).sqrt();
    let bias = mean - design.truth;
    MetricsRow {
        design: design.id,
        n: design.n,
        m: design.m,
        rule,
        p,
        reps,
        bias,
        sd,
        rmse: bias.hypot(sd),
        coverage95: draws.iter().filter(|d| d.covers).count() as f64 / reps as f64,
        degenerate: draws.iter().filter(|d| d.degenerate).count(),
        empty_retries: draws.iter().map(|d| d.retries as usize).sum(),
    }
}

#[derive(Debug, Clone)]
pub struct TableReport {
    pub text: String,
    pub csv: String,
    pub json: String,
}

/// Aligned text table plus CSV and JSON renderings of `rows`.
pub fn table_report(rows: &[MetricsRow]) -> Result<TableReport> {
    if rows.is_empty() {
        return Err(Error::EmptyReport);
    }
    let mut text = format!(
        "{:>6} {:>5} {:>5} {:>6} {:>6} {:>9} {:>8} {:>8} {:>6}\n",
        "design", "N", "M", "rule", "reps", "bias", "sd", "rmse", "95%"
    );
    for r in rows {
        let _ = writeln!(
            text,
            "{:>6} {:>5} {:>5} {:>6} {:>6} {:>9.4} {:>8.4} {:>8.4} {:>6.3}",
            r.design,
            r.n,
            r.m,
            r.rule.to_string(),
            r.reps,
            r.bias,
            r.sd,
            r.rmse,
            r.coverage95
        );
    }

    let mut writer = csv::Writer::from_writer(Vec::new());
    for r in rows {
        writer.serialize(r)?;
    }
    let csv =
        String::from_utf8(writer.into_inner().map_err(|e| Error::Io(e.into_error()))?).expect("csv output is utf-8");
    let json = serde_json::to_string_pretty(rows).expect("metrics rows serialize");
    Ok(TableReport { text, csv, json })
}
