//! MAC and activation-memory accounting, presets, and speedup calibration.

use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model};
use crate::policy::{planned_counts, PreservationPolicy, PruneMode, ALPHA_FLOOR};
use crate::tensor::Element;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Mha,
    Mqa,
    Gqa { kv_heads: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadCost {
    /// Not modelled (external presets).
    None,
    LanguageModel { vocab: usize },
    Classifier { n_classes: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchPreset {
    pub name: String,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub attention: AttentionKind,
    pub head: HeadCost,
}

fn external(name: &str, n_layers: usize, n_heads: usize, d_model: usize, d_mlp: usize, attention: AttentionKind) -> ArchPreset {
    ArchPreset {
        name: name.into(),
        n_layers,
        n_heads,
        d_model,
        d_mlp,
        attention,
        head: HeadCost::None,
    }
}

/// Every named preset: four published shapes plus the executable toy model.
pub fn presets() -> Vec<ArchPreset> {
    let mut nano = crate::model::ModelConfig::gpt2_nano().arch();
    nano.name = "gpt2-nano".into();
    vec![
        external("gpt2-355m", 24, 16, 1024, 4096, AttentionKind::Mha),
        external("gemma2-2b", 26, 8, 2304, 9216, AttentionKind::Mqa),
        external("mistral-7b", 32, 32, 4096, 14336, AttentionKind::Gqa { kv_heads: 8 }),
        external("llama3-8b", 32, 32, 4096, 14336, AttentionKind::Gqa { kv_heads: 8 }),
        nano,
    ]
}

pub fn preset(name: &str) -> Result<ArchPreset> {
    presets().into_iter().find(|p| p.name == name).ok_or_else(|| {
        let names: Vec<String> = presets().into_iter().map(|p| p.name).collect();
        Error::config("preset", format!("unknown preset {name:?}; expected one of {}", names.join(", ")))
    })
}

/// MACs of one block on `n` rows: projections `4·n·d²`, causal score and
/// value products `n(n+1)·d`, MLP `2·n·d·d_mlp`.
pub fn layer_macs(n: usize, d_model: usize, d_mlp: usize) -> u64 {
    let (n, d, f) = (n as u64, d_model as u64, d_mlp as u64);
    4 * n * d * d + n * (n + 1) * d + 2 * n * d * f
}

pub fn head_macs(preset: &ArchPreset, rows: usize) -> u64 {
    let d = preset.d_model as u64;
    match preset.head {
        HeadCost::None => 0,
        HeadCost::LanguageModel { vocab } => rows as u64 * d * vocab as u64,
        HeadCost::Classifier { n_classes } => d * n_classes as u64,
    }
}

/// Total MACs given the rows entering each layer and the rows reaching the head.
pub fn macs_for_rows(preset: &ArchPreset, entering: &[usize], head_rows: usize) -> u64 {
    entering.iter().map(|&n| layer_macs(n, preset.d_model, preset.d_mlp)).sum::<u64>() + head_macs(preset, head_rows)
}

pub fn activation_cells(entering: &[usize], d_model: usize) -> u64 {
    entering.iter().map(|&n| (n * d_model) as u64).sum()
}

/// Closed-form MACs for `seq_len` tokens under the policy's planned budgets.
pub fn analytic_macs(preset: &ArchPreset, seq_len: usize, policy: &PreservationPolicy) -> u64 {
    let counts = planned_counts(seq_len, preset.n_layers, policy);
    macs_for_rows(preset, &counts[..preset.n_layers], counts[preset.n_layers])
}

pub fn analytic_speedup(preset: &ArchPreset, seq_len: usize, policy: &PreservationPolicy) -> f64 {
    let full = analytic_macs(preset, seq_len, &policy.with_alpha(1.0).expect("1.0 is a valid rate"));
    full as f64 / analytic_macs(preset, seq_len, policy) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub macs_counted: u64,
    pub macs_analytic: u64,
    pub activation_cells: u64,
    pub baseline_macs: u64,
    pub baseline_cells: u64,
    pub speedup_macs: f64,
    pub memory_ratio: f64,
}

impl CostReport {
    /// `entering[l]` rows went into layer `l + 1`; `head_rows` reached the
    /// head. The baseline is the same input with nothing pruned.
    pub fn new(preset: &ArchPreset, entering: &[usize], head_rows: usize, macs_counted: u64) -> Self {
        let seq_len = entering.first().copied().unwrap_or(0);
        let full = vec![seq_len; entering.len()];
        let baseline_head = match preset.head {
            HeadCost::LanguageModel { .. } => seq_len,
            _ => head_rows,
        };
        let mut r = CostReport {
            macs_counted,
            macs_analytic: macs_for_rows(preset, entering, head_rows),
            activation_cells: activation_cells(entering, preset.d_model),
            baseline_macs: macs_for_rows(preset, &full, baseline_head),
            baseline_cells: activation_cells(&full, preset.d_model),
            speedup_macs: 0.0,
            memory_ratio: 0.0,
        };
        r.refresh();
        r
    }

    /// A pass whose prompt rows `entering` are pruned while `tail` decode
    /// rows run every layer alongside the `final_rows` prompt rows left at
    /// the end.
    pub fn with_decode_tail(
        preset: &ArchPreset,
        entering: &[usize],
        final_rows: usize,
        tail: usize,
        macs_counted: u64,
    ) -> Self {
        if tail == 0 {
            return Self::new(preset, entering, final_rows, macs_counted);
        }
        let l = entering.len();
        let prompt = entering.first().copied().unwrap_or(0);
        let macs = |entering: &[usize], f: usize| {
            macs_for_rows(preset, entering, f + tail) + l as u64 * layer_macs(f + tail, preset.d_model, preset.d_mlp)
        };
        let cells = |entering: &[usize]| {
            let with_tail: Vec<usize> = entering.iter().map(|&e| e + tail).collect();
            activation_cells(&with_tail, preset.d_model)
        };
        let full = vec![prompt; l];
        let mut r = CostReport {
            macs_counted,
            macs_analytic: macs(entering, final_rows),
            activation_cells: cells(entering),
            baseline_macs: macs(&full, prompt),
            baseline_cells: cells(&full),
            speedup_macs: 0.0,
            memory_ratio: 0.0,
        };
        r.refresh();
        r
    }

    fn refresh(&mut self) {
        self.speedup_macs = self.baseline_macs as f64 / self.macs_analytic.max(1) as f64;
        self.memory_ratio = self.baseline_cells as f64 / self.activation_cells.max(1) as f64;
    }

    /// Sums the integer fields and recomputes the ratios.
    pub fn accumulate(&mut self, other: &CostReport) {
        self.macs_counted += other.macs_counted;
        self.macs_analytic += other.macs_analytic;
        self.activation_cells += other.activation_cells;
        self.baseline_macs += other.baseline_macs;
        self.baseline_cells += other.baseline_cells;
        self.refresh();
    }

    pub const CSV_HEADER: &'static str =
        "macs_counted,macs_analytic,activation_cells,baseline_macs,baseline_cells,speedup_macs,memory_ratio";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6},{:.6}",
            self.macs_counted,
            self.macs_analytic,
            self.activation_cells,
            self.baseline_macs,
            self.baseline_cells,
            self.speedup_macs,
            self.memory_ratio
        )
    }
}

impl Default for CostReport {
    fn default() -> Self {
        CostReport {
            macs_counted: 0,
            macs_analytic: 0,
            activation_cells: 0,
            baseline_macs: 0,
            baseline_cells: 0,
            speedup_macs: 1.0,
            memory_ratio: 1.0,
        }
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows = [
            ("macs counted", self.macs_counted.to_string()),
            ("macs analytic", self.macs_analytic.to_string()),
            ("baseline macs", self.baseline_macs.to_string()),
            ("activation cells", self.activation_cells.to_string()),
            ("baseline cells", self.baseline_cells.to_string()),
            ("speedup (macs)", format!("{:.3}x", self.speedup_macs)),
            ("memory ratio", format!("{:.3}x", self.memory_ratio)),
        ];
        for (k, v) in rows {
            writeln!(f, "{k:<18}{v:>20}")?;
        }
        Ok(())
    }
}

/// Largest α whose analytic speedup is within 1% of `target`.
pub fn calibrate_alpha(preset: &ArchPreset, seq_len: usize, target: f64, tau: usize) -> Result<f64> {
    calibrate_with(target, |alpha| {
        Ok(analytic_speedup(preset, seq_len, &PreservationPolicy::new(alpha, tau)?))
    })
}

/// Largest α in `[0.02, 1]` whose `speedup(α)` is within 1% of `target`.
///
/// `speedup` must be non-increasing in α. The search bisects for the point
/// where it first drops below `0.99·target`. Because budgets are integers,
/// speedup moves in steps; if one step jumps across the whole window the
/// target cannot be hit and the two neighbouring speedups are reported.
pub fn calibrate_with(target: f64, speedup: impl Fn(f64) -> Result<f64>) -> Result<f64> {
    if !(target >= 1.0) {
        return Err(Error::config("target_speedup", format!("{target} is below 1")));
    }
    let max_speedup = speedup(ALPHA_FLOOR)?;
    if target > max_speedup {
        return Err(Error::SpeedupOutOfRange { target, max_speedup });
    }
    let want = 0.99 * target;
    if speedup(1.0)? >= want {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (ALPHA_FLOOR, 1.0);
    for _ in 0..64 {
        let mid = 0.5 * (lo + hi);
        if speedup(mid)? >= want {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (above, below) = (speedup(lo)?, speedup(hi)?);
    if (above - target).abs() / target < 0.01 {
        Ok(lo)
    } else {
        Err(Error::SpeedupGranularity { target, below, above })
    }
}

/// Planned cost of one sequence: `prompt_len` pruned prompt positions and
/// `tail` decode positions, as [`Model::forward`] would report it.
pub fn planned_cost(preset: &ArchPreset, prompt_len: usize, tail: usize, policy: &PreservationPolicy) -> CostReport {
    let l = preset.n_layers;
    let counts = planned_counts(prompt_len, l, policy);
    let entering = match policy.mode {
        PruneMode::Monotonic => counts[..l].to_vec(),
        PruneMode::Rescoring => vec![prompt_len; l],
    };
    match preset.head {
        HeadCost::Classifier { .. } => CostReport::new(preset, &entering, 1, 0),
        _ => CostReport::with_decode_tail(preset, &entering, counts[l], tail, 0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TtftStats {
    pub median_secs: f64,
    pub min_secs: f64,
    pub max_secs: f64,
    pub speedup_macs: f64,
}

/// Wall time of the prefill forward, repeated `repetitions` times.
pub fn measure_ttft<T: Element>(
    model: &Model<T>,
    prompt: &[u32],
    policy: &PreservationPolicy,
    repetitions: usize,
) -> Result<TtftStats> {
    if repetitions < 3 {
        return Err(Error::config("repetitions", "need at least 3"));
    }
    let mut times = Vec::with_capacity(repetitions);
    let mut speedup = 1.0;
    for _ in 0..repetitions {
        let t0 = Instant::now();
        let r = model.forward(prompt, policy, &ForwardOptions::eval())?;
        times.push(t0.elapsed().as_secs_f64());
        speedup = r.cost.speedup_macs;
    }
    times.sort_by(f64::total_cmp);
    Ok(TtftStats {
        median_secs: times[times.len() / 2],
        min_secs: times[0],
        max_secs: times[times.len() - 1],
        speedup_macs: speedup,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_formula_pieces() {
        assert_eq!(layer_macs(2, 4, 16), 4 * 2 * 16 + 2 * 3 * 4 + 2 * 2 * 4 * 16);
        assert_eq!(layer_macs(0, 8, 32), 0);
    }

    #[test]
    fn mlp_term_linear_in_rows() {
        let mlp = |n: usize| 2 * n as u64 * 64 * 256;
        assert_eq!(mlp(40), 2 * mlp(20));
    }

    #[test]
    fn unknown_preset_lists_names() {
        let err = preset("gpt5").unwrap_err().to_string();
        for p in presets() {
            assert!(err.contains(&p.name), "{err}");
        }
    }

    #[test]
    fn calibrate_identity_and_range() {
        let p = preset("gpt2-355m").unwrap();
        assert_eq!(calibrate_alpha(&p, 512, 1.0, 5).unwrap(), 1.0);
        assert!(matches!(
            calibrate_alpha(&p, 512, 1e6, 5),
            Err(Error::SpeedupOutOfRange { .. })
        ));
        assert!(calibrate_alpha(&p, 512, 0.5, 5).is_err());
    }

    #[test]
    fn report_identity_at_full_rate() {
        let p = preset("gpt2-nano").unwrap();
        let r = CostReport::new(&p, &[10; 6], 10, 0);
        assert_eq!(r.speedup_macs, 1.0);
        assert_eq!(r.memory_ratio, 1.0);
        assert_eq!(r.activation_cells, 6 * 10 * 128);
    }

    #[test]
    fn accumulate_recomputes_ratios() {
        let p = preset("gpt2-nano").unwrap();
        let mut a = CostReport::new(&p, &[10, 5, 5, 5, 5, 5], 5, 0);
        let b = CostReport::new(&p, &[10; 6], 10, 0);
        let expect = (a.baseline_macs + b.baseline_macs) as f64 / (a.macs_analytic + b.macs_analytic) as f64;
        a.accumulate(&b);
        assert!((a.speedup_macs - expect).abs() < 1e-12);
    }
}
