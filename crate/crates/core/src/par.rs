//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) these run on the rayon pool;
//! without it they run sequentially. Every helper returns results in index
//! order and leaves floating-point reductions to the caller, so output is
//! bit-identical either way.

use serde::{Deserialize, Serialize};

/// Below this many items the helpers stay on the calling thread.
const MIN_PARALLEL_LEN: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Serial,
    #[default]
    Parallel,
}

impl Execution {
    /// `f(0), f(1), ..., f(n-1)` collected in order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            Execution::Serial => (0..n).map(f).collect(),
            Execution::Parallel => parallel_map(n, f),
        }
    }
}

#[cfg(feature = "parallel")]
fn parallel_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn parallel_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Maps over `0..n`, going parallel when the total `work` is large.
pub(crate) fn map_sized<T, F>(work: usize, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if work >= MIN_PARALLEL_LEN {
        Execution::Parallel.map(n, f)
    } else {
        Execution::Serial.map(n, f)
    }
}

/// Indices in `0..n` satisfying `pred`, ascending.
pub(crate) fn filter_indices<F>(n: usize, pred: F) -> Vec<usize>
where
    F: Fn(usize) -> bool + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if n >= MIN_PARALLEL_LEN {
        use rayon::prelude::*;
        return (0..n).into_par_iter().filter(|&c| pred(c)).collect();
    }
    (0..n).filter(|&c| pred(c)).collect()
}

/// Whether this build was compiled with rayon support.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel")
}
