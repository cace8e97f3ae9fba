//! Bernoulli selection of panel cells.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{CellKey, PanelDims, TwoWayPanel};
use crate::par;
use crate::rng::cell_uniform;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SketchConfig {
    pub p: f64,
    pub seed: u64,
}

impl SketchConfig {
    pub fn new(p: f64, seed: u64) -> Result<Self> {
        check_rate(p)?;
        Ok(Self { p, seed })
    }
}

pub(crate) fn check_rate(p: f64) -> Result<()> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidRate(p))
    }
}

/// A realized selection: the indices (into the panel's cell storage) of the
/// kept cells, in storage order.
#[derive(Debug, Clone, PartialEq)]
pub struct SketchMask {
    selected: Vec<usize>,
    p: f64,
    seed: u64,
    l_expected: f64,
}

impl SketchMask {
    /// Selects every cell, as `p = 1` would.
    pub fn full(panel: &TwoWayPanel) -> Self {
        Self { selected: (0..panel.n_obs()).collect(), p: 1.0, seed: 0, l_expected: panel.n_obs() as f64 }
    }

    /// A mask with a prescribed selection, recorded as drawn at rate `p`.
    pub fn from_keys(panel: &TwoWayPanel, keys: &[CellKey], p: f64) -> Result<Self> {
        check_rate(p)?;
        let mut selected = keys
            .iter()
            .map(|&k| {
                panel.find(k).ok_or_else(|| Error::InvalidArgument(format!("cell (i={}, j={}) not in panel", k.i, k.j)))
            })
            .collect::<Result<Vec<_>>>()?;
        selected.sort_unstable();
        selected.dedup();
        if selected.is_empty() {
            return Err(Error::EmptySketch);
        }
        Ok(Self { selected, p, seed: 0, l_expected: panel.n_obs() as f64 * p })
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn l_hat(&self) -> usize {
        self.selected.len()
    }

    pub fn l_expected(&self) -> f64 {
        self.l_expected
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn keys<'a>(&'a self, panel: &'a TwoWayPanel) -> impl Iterator<Item = CellKey> + 'a {
        self.selected.iter().map(move |&c| panel.key(c))
    }
}

/// Keeps each cell independently with probability `config.p`.
///
/// The draw for a cell depends only on `(seed, i, j)`, so a given panel and
/// configuration always yield the same mask.
pub fn generate_mask(panel: &TwoWayPanel, config: SketchConfig) -> Result<SketchMask> {
    check_rate(config.p)?;
    let selected = if config.p >= 1.0 {
        (0..panel.n_obs()).collect()
    } else {
        par::filter_indices(panel.n_obs(), |c| {
            let key = panel.key(c);
            cell_uniform(config.seed, key.i, key.j) < config.p
        })
    };
    if selected.is_empty() {
        return Err(Error::EmptySketch);
    }
    Ok(SketchMask { selected, p: config.p, seed: config.seed, l_expected: panel.n_obs() as f64 * config.p })
}

/// Finite-sample plug-in `(C / n_obs) * (1 - p) / p` for the sketching weight.
pub fn lambda_hat(dims: &PanelDims, n_obs: usize, p: f64) -> Result<f64> {
    check_rate(p)?;
    Ok(dims.c_bar as f64 / n_obs as f64 * ((1.0 - p) / p))
}

/// How the selection rate is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PRule {
    /// No subsampling, `p = 1`.
    Full,
    /// `p = min(c / C, 1)`.
    COverCbar(f64),
    /// A fixed rate.
    Rate(f64),
}

pub fn resolve_p_rule(rule: PRule, dims: &PanelDims) -> Result<f64> {
    match rule {
        PRule::Full => Ok(1.0),
        PRule::COverCbar(c) => {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::InvalidRate(c / dims.c_bar as f64));
            }
            Ok((c / dims.c_bar as f64).min(1.0))
        }
        PRule::Rate(p) => {
            check_rate(p)?;
            Ok(p)
        }
    }
}

impl fmt::Display for PRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PRule::Full => write!(f, "full"),
            PRule::COverCbar(c) => write!(f, "c{c}"),
            PRule::Rate(p) => write!(f, "p{p}"),
        }
    }
}

impl FromStr for PRule {
    type Err = Error;

    /// Accepts `full`, `c<number>` and `p<number>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::InvalidArgument(format!("unknown rate rule `{s}` (expected full, c<num> or p<num>)"));
        if s == "full" {
            return Ok(PRule::Full);
        }
        let (tag, num) = s.split_at(s.char_indices().nth(1).map_or(s.len(), |(i, _)| i));
        let value: f64 = num.parse().map_err(|_| bad())?;
        match tag {
            "c" if value > 0.0 && value.is_finite() => Ok(PRule::COverCbar(value)),
            "c" => Err(Error::InvalidArgument(format!("rule `{s}`: c must be positive"))),
            "p" => {
                check_rate(value)?;
                Ok(PRule::Rate(value))
            }
            _ => Err(bad()),
        }
    }
}

impl Serialize for PRule {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PRule {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
