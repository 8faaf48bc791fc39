//! Data-parallel map over independent work items.
//!
//! With the `parallel` feature the work is spread over the current rayon
//! pool; without it [`Execution::Parallel`] runs sequentially. Either way the
//! output order matches the input order, so reductions stay deterministic.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Sequential,
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

impl Execution {
    pub fn map<I, O, F>(self, items: &[I], f: F) -> Vec<O>
    where
        I: Sync,
        O: Send,
        F: Fn(usize, &I) -> O + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
            }
            _ => items.iter().enumerate().map(|(i, x)| f(i, x)).collect(),
        }
    }
}
