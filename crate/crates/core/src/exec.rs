//! Execution mode for data-parallel loops.
//!
//! The compute-heavy loops in this crate (per-sample batch gradients,
//! finite-difference probes, dataset building, search trials) map an index
//! range through an independent function and combine the results in index
//! order. [`indexed_map`] runs that map either sequentially or on the rayon
//! pool; because results are always combined in index order afterwards, the
//! two modes produce bit-identical output.

use serde::{Deserialize, Serialize};

/// How to run an independent-iteration loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    /// Parallel when the `parallel` feature is compiled in, else sequential.
    #[default]
    Auto,
    Sequential,
    Parallel,
}

impl ExecMode {
    /// Resolves `Auto` against the compiled feature set.
    pub fn is_parallel(self) -> bool {
        match self {
            ExecMode::Sequential => false,
            ExecMode::Parallel | ExecMode::Auto => cfg!(feature = "parallel"),
        }
    }
}

/// Maps `0..n` through `f`, returning results in index order.
pub fn indexed_map<U, F>(mode: ExecMode, n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = mode;
    (0..n).map(f).collect()
}
