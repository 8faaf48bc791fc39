//! Causal multi-head attention over an active set, and the per-position
//! contribution scores read off its soft-score matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{kernels, Element, Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
}

impl AttentionConfig {
    pub fn new(d_model: usize, n_heads: usize) -> Result<Self> {
        if n_heads == 0 || d_model == 0 || d_model % n_heads != 0 {
            return Err(Error::config(
                "n_heads",
                format!("d_model {d_model} is not divisible by n_heads {n_heads}"),
            ));
        }
        Ok(AttentionConfig { d_model, n_heads })
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Graph handles of one layer's attention parameters.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    /// `[d_model × 3·d_model]`, columns ordered query | key | value.
    pub w_qkv: Var,
    pub b_qkv: Var,
    pub w_out: Var,
    pub b_out: Var,
}

/// Per-head soft-score matrices over the active rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub n_heads: usize,
    pub n: usize,
    /// `n_heads × n × n`, row-major; row `i` is the distribution of query `i`.
    pub scores: Vec<f64>,
}

impl AttentionWeights {
    pub fn head(&self, h: usize) -> &[f64] {
        &self.scores[h * self.n * self.n..(h + 1) * self.n * self.n]
    }

    pub fn get(&self, h: usize, i: usize, j: usize) -> f64 {
        self.scores[(h * self.n + i) * self.n + j]
    }
}

/// Attention mass each active value row delivered to the layer output,
/// averaged over heads.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ContributionVector(pub Vec<f64>);

impl ContributionVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// Knobs for the non-default attention paths.
#[derive(Debug, Clone, Copy, Default)]
pub struct AttentionOptions<'a> {
    /// Keys to mask out (a query always sees itself).
    pub key_visible: Option<&'a [bool]>,
    /// Query rows whose attention counts toward contributions. `None` = all.
    pub scoring_queries: Option<&'a [bool]>,
    /// Score from the causal-only soft-score instead of the key-masked one.
    pub score_unmasked: bool,
}

pub struct AttentionOutput {
    pub out: Var,
    /// The fused attention node, for soft-score inspection.
    pub node: Var,
    pub contributions: ContributionVector,
}

/// `softmax(QKᵀ/√d_head + M)·V` followed by the output projection, where
/// rows of `x` are the active positions in ascending order and `M` masks
/// every later position.
///
/// Causality is judged by original sequence position. Because the active
/// rows are sorted, that is the same as comparing compacted row indices.
pub fn causal_attention<'p, T: Element>(
    g: &mut Graph<'p, T>,
    x: Var,
    cfg: &AttentionConfig,
    params: &AttentionParams,
    opts: AttentionOptions<'_>,
) -> Result<AttentionOutput> {
    let n = match g.shape(x) {
        [n, d] if *d == cfg.d_model => *n,
        other => {
            return Err(Error::Shape {
                op: "causal_attention",
                lhs: other.to_vec(),
                rhs: vec![cfg.d_model],
            })
        }
    };
    if n == 0 {
        return Err(Error::EmptyActiveSet);
    }
    let qkv = g.matmul(x, params.w_qkv)?;
    let qkv = g.add_row(qkv, params.b_qkv)?;
    let node = g.causal_attention(qkv, cfg.n_heads, opts.key_visible)?;

    let contributions = if opts.score_unmasked && opts.key_visible.is_some() {
        let unmasked = causal_soft_scores(g.value(qkv), n, cfg);
        contributions_from(&unmasked, cfg.n_heads, n, opts.scoring_queries)
    } else {
        let probs = g.attention_probs(node).expect("attention node");
        contributions_from(probs, cfg.n_heads, n, opts.scoring_queries)
    };

    let out = g.matmul(node, params.w_out)?;
    let out = g.add_row(out, params.b_out)?;
    Ok(AttentionOutput {
        out,
        node,
        contributions,
    })
}

/// `contrib(j) = (1/H) Σ_h Σ_i softscore_h(i, j)` over the scoring queries.
pub fn contributions_from<T: Element>(
    probs: &[T],
    n_heads: usize,
    n: usize,
    scoring_queries: Option<&[bool]>,
) -> ContributionVector {
    let mut c = vec![0.0f64; n];
    for h in 0..n_heads {
        for i in 0..n {
            if scoring_queries.is_some_and(|q| !q[i]) {
                continue;
            }
            let row = &probs[(h * n + i) * n..(h * n + i + 1) * n];
            for (cj, &p) in c.iter_mut().zip(row) {
                *cj += p.to_f64_lossy();
            }
        }
    }
    let inv = 1.0 / n_heads as f64;
    c.iter_mut().for_each(|v| *v *= inv);
    ContributionVector(c)
}

/// Copies the soft-score matrices out of a fused attention node.
pub fn soft_scores<T: Element>(g: &Graph<'_, T>, node: Var, n_heads: usize) -> Option<AttentionWeights> {
    let probs = g.attention_probs(node)?;
    let n = g.shape(node)[0];
    Some(AttentionWeights {
        n_heads,
        n,
        scores: probs.iter().map(|p| p.to_f64_lossy()).collect(),
    })
}

fn causal_soft_scores<T: Element>(qkv: &[T], n: usize, cfg: &AttentionConfig) -> Vec<T> {
    let d = cfg.d_model;
    let dh = cfg.d_head();
    let w = 3 * d;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut probs = vec![T::zero(); cfg.n_heads * n * n];
    for h in 0..cfg.n_heads {
        for i in 0..n {
            let q = &qkv[i * w + h * dh..i * w + h * dh + dh];
            let row = &mut probs[(h * n + i) * n..(h * n + i) * n + i + 1];
            for (j, p) in row.iter_mut().enumerate() {
                let k = &qkv[j * w + d + h * dh..j * w + d + h * dh + dh];
                *p = kernels::dot(q, k) * scale;
            }
            kernels::softmax_row(row);
        }
    }
    probs
}

/// Adds rows `positions` of the learned position table to `x`. Positions are
/// original sequence indices, so pruning never shifts positional identity.
pub fn add_positions<'p, T: Element>(
    g: &mut Graph<'p, T>,
    x: Var,
    table: Var,
    positions: &[usize],
) -> Result<Var> {
    let max = g.shape(table)[0];
    if let Some(&p) = positions.iter().find(|&&p| p >= max) {
        return Err(Error::SequenceTooLong { len: p + 1, max });
    }
    let pe = g.embedding(table, positions)?;
    g.add(x, pe)
}
