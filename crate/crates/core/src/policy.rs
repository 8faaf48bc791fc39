//! Per-layer activation budgets and survivor selection.
//!
//! Each layer keeps `min(n_prev, max(⌈α·n_prev⌉, τ))` of the positions that
//! entered it, choosing the ones whose value rows carried the most attention
//! mass. Pinned positions always survive.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowest preservation rate the fine-tuning distribution reaches.
pub const ALPHA_FLOOR: f64 = 0.02;
pub const DEFAULT_TAU: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruneMode {
    /// Pruned positions are dropped and never return.
    #[default]
    Monotonic,
    /// Pruned positions stay resident (frozen, masked as keys) and may be
    /// selected again by a later layer.
    Rescoring,
}

/// Positions that must survive every layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pins {
    pub first: bool,
    pub last: bool,
}

impl Default for Pins {
    fn default() -> Self {
        Pins {
            first: false,
            last: true,
        }
    }
}

impl Pins {
    pub fn union(self, other: Pins) -> Pins {
        Pins {
            first: self.first || other.first,
            last: self.last || other.last,
        }
    }

    /// Whether `pos` is pinned in a sequence of `len` positions.
    pub fn covers(self, pos: usize, len: usize) -> bool {
        (self.first && pos == 0) || (self.last && pos + 1 == len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreservationPolicy {
    alpha: f64,
    tau: usize,
    pub mode: PruneMode,
    pub pins: Pins,
}

impl PreservationPolicy {
    pub fn new(alpha: f64, tau: usize) -> Result<Self> {
        validate_rate(alpha)?;
        if tau == 0 {
            return Err(Error::Policy("tau must be at least 1".into()));
        }
        Ok(PreservationPolicy {
            alpha,
            tau,
            mode: PruneMode::Monotonic,
            pins: Pins::default(),
        })
    }

    /// α = 1: nothing is ever pruned.
    pub fn identity() -> Self {
        PreservationPolicy {
            alpha: 1.0,
            tau: DEFAULT_TAU,
            mode: PruneMode::Monotonic,
            pins: Pins::default(),
        }
    }

    pub fn with_mode(mut self, mode: PruneMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_pins(mut self, pins: Pins) -> Self {
        self.pins = pins;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Result<Self> {
        validate_rate(alpha)?;
        self.alpha = alpha;
        Ok(self)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn tau(&self) -> usize {
        self.tau
    }

    pub fn budget(&self, n_prev: usize) -> usize {
        budget(n_prev, self.alpha, self.tau)
    }
}

fn validate_rate(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Policy(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    Ok(())
}

/// Relative slack under which `alpha · n` counts as an integer, so decimal
/// rates like `0.3 · 100` or `0.1 · 10` are not pushed up by binary rounding.
const INTEGER_SNAP: f64 = 1e-9;

/// `⌈alpha · n⌉`, reading products within [`INTEGER_SNAP`] of an integer as
/// that integer.
pub fn ceil_scaled(alpha: f64, n: usize) -> usize {
    let x = alpha * n as f64;
    let r = x.round();
    if (x - r).abs() <= INTEGER_SNAP * x.max(1.0) {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// Number of positions kept by a layer that received `n_prev`.
pub fn budget(n_prev: usize, alpha: f64, tau: usize) -> usize {
    debug_assert!(n_prev >= 1);
    ceil_scaled(alpha, n_prev).max(tau).min(n_prev)
}

/// One uniform draw from `[lo, hi]`.
pub fn sample_alpha<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> Result<f64> {
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(Error::RateBounds { lo, hi });
    }
    if lo == hi {
        return Ok(lo);
    }
    Ok(rng.random_range(lo..=hi))
}

/// Positions alive at some layer, sorted ascending, with their pin flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveSet {
    positions: Vec<usize>,
    pinned: Vec<bool>,
}

impl ActiveSet {
    pub fn new(positions: Vec<usize>, pinned: Vec<bool>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::EmptyActiveSet);
        }
        if positions.len() != pinned.len() || positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Policy("active positions must be strictly increasing".into()));
        }
        Ok(ActiveSet { positions, pinned })
    }

    /// Every position of a `len`-long sequence, pinned according to `pins`.
    pub fn full(len: usize, pins: Pins) -> Result<Self> {
        let positions: Vec<usize> = (0..len).collect();
        let pinned = positions.iter().map(|&p| pins.covers(p, len)).collect();
        Self::new(positions, pinned)
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn pinned(&self) -> &[bool] {
        &self.pinned
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn pinned_count(&self) -> usize {
        self.pinned.iter().filter(|&&p| p).count()
    }

    pub fn contains(&self, pos: usize) -> bool {
        self.positions.binary_search(&pos).is_ok()
    }

    /// Indices (into this set) of the members that are also in `other`.
    pub fn indices_of(&self, other: &ActiveSet) -> Vec<usize> {
        other
            .positions
            .iter()
            .filter_map(|p| self.positions.binary_search(p).ok())
            .collect()
    }
}

/// Keeps the `n_keep` highest-contribution members of `active`.
///
/// Pinned members are taken first and consume budget; the rest are ranked by
/// contribution, ties going to the lower position. The result is sorted by
/// position.
pub fn select(contributions: &[f64], active: &ActiveSet, n_keep: usize) -> Result<ActiveSet> {
    if contributions.len() != active.len() {
        return Err(Error::Shape {
            op: "select",
            lhs: vec![contributions.len()],
            rhs: vec![active.len()],
        });
    }
    let pinned = active.pinned_count();
    if n_keep < pinned {
        return Err(Error::BudgetTooSmall { n_keep, pinned });
    }
    if n_keep > active.len() {
        return Err(Error::BudgetTooLarge {
            n_keep,
            active: active.len(),
        });
    }
    if n_keep == 0 {
        return Err(Error::EmptyActiveSet);
    }
    let mut keep: Vec<usize> = (0..active.len()).filter(|&i| active.pinned[i]).collect();
    let mut rest: Vec<usize> = (0..active.len()).filter(|&i| !active.pinned[i]).collect();
    rest.sort_by(|&a, &b| {
        contributions[b]
            .partial_cmp(&contributions[a])
            .unwrap_or(Ordering::Equal)
            .then(active.positions[a].cmp(&active.positions[b]))
    });
    keep.extend_from_slice(&rest[..n_keep - pinned]);
    keep.sort_unstable();
    ActiveSet::new(
        keep.iter().map(|&i| active.positions[i]).collect(),
        keep.iter().map(|&i| active.pinned[i]).collect(),
    )
}

/// `N_{l-1} → N_l` for one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerBudget {
    pub layer_index: usize,
    pub n_prev: usize,
    pub n_kept: usize,
}

/// Budgets for layers `1..=n_layers` starting from `N_0 = seq_len`.
pub fn plan_sequence(seq_len: usize, n_layers: usize, policy: &PreservationPolicy) -> Vec<LayerBudget> {
    let mut n_prev = seq_len;
    (1..=n_layers)
        .map(|layer_index| {
            let n_kept = policy.budget(n_prev);
            let b = LayerBudget {
                layer_index,
                n_prev,
                n_kept,
            };
            n_prev = n_kept;
            b
        })
        .collect()
}

/// `[N_0, N_1, …, N_L]`.
pub fn planned_counts(seq_len: usize, n_layers: usize, policy: &PreservationPolicy) -> Vec<usize> {
    std::iter::once(seq_len)
        .chain(plan_sequence(seq_len, n_layers, policy).iter().map(|b| b.n_kept))
        .collect()
}
