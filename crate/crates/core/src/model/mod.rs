//! Pre-norm GPT-style decoder whose blocks prune their hidden activations.

mod checkpoint;

use std::hash::{DefaultHasher, Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};

use crate::attention::{self, AttentionConfig, AttentionOptions, AttentionParams, ContributionVector};
use crate::cost::{ArchPreset, AttentionKind, CostReport, HeadCost};
use crate::error::{Error, Result};
use crate::policy::{select, ActiveSet, Pins, PreservationPolicy, PruneMode};
use crate::tensor::{Element, Graph, Mode, Var};
use crate::trace::PreservationTrace;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Next-token logits through the tied input embedding.
    LanguageModel,
    /// Class logits read from the last position.
    Classifier { n_classes: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub head: Head,
    pub seed: u64,
}

impl ModelConfig {
    /// Byte-level toy GPT: 6 layers, 4 heads, width 128, context 256.
    pub fn gpt2_nano() -> Self {
        ModelConfig {
            vocab_size: 256,
            max_seq_len: 256,
            d_model: 128,
            n_layers: 6,
            n_heads: 4,
            d_mlp: 512,
            head: Head::LanguageModel,
            seed: 0,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "gpt2-nano" => Some(Self::gpt2_nano()),
            _ => None,
        }
    }

    pub fn with_head(mut self, head: Head) -> Self {
        self.head = head;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_mlp", self.d_mlp),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if let Head::Classifier { n_classes: 0 } = self.head {
            return Err(Error::config("n_classes", "must be positive"));
        }
        AttentionConfig::new(self.d_model, self.n_heads)?;
        Ok(())
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
        }
    }

    /// Positions pinned on top of the policy's own pins.
    pub fn head_pins(&self) -> Pins {
        match self.head {
            Head::LanguageModel => Pins { first: true, last: true },
            Head::Classifier { .. } => Pins { first: false, last: true },
        }
    }

    /// The analytic cost model for this executing configuration.
    pub fn arch(&self) -> ArchPreset {
        ArchPreset {
            name: "model".into(),
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_mlp: self.d_mlp,
            attention: AttentionKind::Mha,
            head: match self.head {
                Head::LanguageModel => HeadCost::LanguageModel { vocab: self.vocab_size },
                Head::Classifier { n_classes } => HeadCost::Classifier { n_classes },
            },
        }
    }

    /// Name and shape of every parameter, in storage order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.d_model, self.d_mlp);
        let mut m = vec![
            ("wte".to_string(), vec![self.vocab_size, d]),
            ("wpe".to_string(), vec![self.max_seq_len, d]),
        ];
        for l in 0..self.n_layers {
            let p = |s: &str| format!("h{l}.{s}");
            m.extend([
                (p("ln_1.g"), vec![d]),
                (p("ln_1.b"), vec![d]),
                (p("attn.w_qkv"), vec![d, 3 * d]),
                (p("attn.b_qkv"), vec![3 * d]),
                (p("attn.w_out"), vec![d, d]),
                (p("attn.b_out"), vec![d]),
                (p("ln_2.g"), vec![d]),
                (p("ln_2.b"), vec![d]),
                (p("mlp.w_fc"), vec![d, f]),
                (p("mlp.b_fc"), vec![f]),
                (p("mlp.w_proj"), vec![f, d]),
                (p("mlp.b_proj"), vec![d]),
            ]);
        }
        m.push(("ln_f.g".into(), vec![d]));
        m.push(("ln_f.b".into(), vec![d]));
        if let Head::Classifier { n_classes } = self.head {
            m.push(("cls.w".into(), vec![d, n_classes]));
            m.push(("cls.b".into(), vec![n_classes]));
        }
        m
    }
}

const PER_LAYER: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Element> {
    config: ModelConfig,
    params: Vec<Param<T>>,
}

/// Output of a counted, self-contained forward pass.
#[derive(Debug, Clone)]
pub struct ForwardResult<T> {
    /// `[rows × classes]`, row-major.
    pub logits: Vec<T>,
    pub n_classes: usize,
    /// Original sequence position of each logit row.
    pub positions: Vec<usize>,
    pub trace: PreservationTrace,
    pub cost: CostReport,
}

/// Handles into a graph after [`Model::forward_graph`].
#[derive(Debug, Clone)]
pub struct GraphForward {
    pub logits: Var,
    pub positions: Vec<usize>,
    pub trace: PreservationTrace,
    /// Contribution vector each layer selected with.
    pub contributions: Vec<ContributionVector>,
    /// Fused attention node of each layer.
    pub attention_nodes: Vec<Var>,
    /// Prompt length; later positions were decoded.
    pub prompt_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    pub mode: Mode,
    pub dropout: f64,
    /// Positions at or after this index are decode positions: never pruned,
    /// not counted against the budget, and not scored.
    pub prompt_len: Option<usize>,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            mode: Mode::Eval,
            dropout: 0.0,
            prompt_len: None,
        }
    }
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self::default()
    }

    pub fn train(dropout: f64) -> Self {
        ForwardOptions {
            mode: Mode::Train,
            dropout,
            prompt_len: None,
        }
    }

    pub fn with_prompt_len(mut self, prompt_len: usize) -> Self {
        self.prompt_len = Some(prompt_len);
        self
    }
}

/// Result of greedy generation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    /// Prompt followed by the generated ids.
    pub tokens: Vec<u32>,
    /// Final-layer active rows at each decode step.
    pub final_active: Vec<usize>,
}

/// Prompt-side result of a forward: what each layer saw and what survived.
struct PromptPass {
    /// Input of each layer with the positions of its rows.
    layer_inputs: Vec<(Var, Vec<usize>)>,
    kept: Vec<Vec<bool>>,
    final_x: Var,
    final_positions: Vec<usize>,
    contributions: Vec<ContributionVector>,
    attention_nodes: Vec<Var>,
}

impl PromptPass {
    fn start(n: usize, x: Var, n_layers: usize) -> Self {
        let mut kept = Vec::with_capacity(n_layers + 1);
        kept.push(vec![true; n]);
        PromptPass {
            layer_inputs: Vec::with_capacity(n_layers),
            kept,
            final_x: x,
            final_positions: (0..n).collect(),
            contributions: Vec::with_capacity(n_layers),
            attention_nodes: Vec::with_capacity(n_layers),
        }
    }
}

struct LayerVars {
    ln1: (Var, Var),
    attn: AttentionParams,
    ln2: (Var, Var),
    fc: (Var, Var),
    proj: (Var, Var),
}

struct Vars {
    wte: Var,
    wpe: Var,
    layers: Vec<LayerVars>,
    ln_f: (Var, Var),
    cls: Option<(Var, Var)>,
}

impl<T: Element> Model<T> {
    /// Seeded Gaussian init (std 0.02) for embeddings and projections; unit
    /// gains and zero offsets for layer norms; zero biases. Values are drawn
    /// in `f64` and rounded, so both precisions start from the same model.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let params = config
            .manifest()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if name.ends_with(".g") {
                    vec![T::one(); n]
                } else if shape.len() == 1 {
                    vec![T::zero(); n]
                } else {
                    (0..n).map(|_| T::of(normal.sample(&mut rng))).collect()
                };
                Param { name, shape, data }
            })
            .collect();
        Ok(Model { config, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<Param<T>>) -> Result<Self> {
        config.validate()?;
        let manifest = config.manifest();
        if manifest.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                manifest.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in manifest.iter().zip(&params) {
            if *name != p.name || *shape != p.shape || p.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!("parameter {} does not match manifest entry {name} {shape:?}", p.name)));
            }
        }
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|v| U::of(v.to_f64_lossy())).collect(),
                })
                .collect(),
        }
    }

    /// Order-sensitive hash of every parameter bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for p in &self.params {
            p.name.hash(&mut h);
            for v in &p.data {
                v.to_f64_lossy().to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    fn bind<'p>(&'p self, g: &mut Graph<'p, T>) -> Result<Vars> {
        let all = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| g.param(i, &p.data, &p.shape))
            .collect::<Result<Vec<Var>>>()?;
        let (wte, wpe) = (all[0], all[1]);
        let mut layers = Vec::with_capacity(self.config.n_layers);
        for l in 0..self.config.n_layers {
            let v = &all[2 + l * PER_LAYER..2 + (l + 1) * PER_LAYER];
            layers.push(LayerVars {
                ln1: (v[0], v[1]),
                attn: AttentionParams {
                    w_qkv: v[2],
                    b_qkv: v[3],
                    w_out: v[4],
                    b_out: v[5],
                },
                ln2: (v[6], v[7]),
                fc: (v[8], v[9]),
                proj: (v[10], v[11]),
            });
        }
        let f = 2 + self.config.n_layers * PER_LAYER;
        let ln_f = (all[f], all[f + 1]);
        let cls = match self.config.head {
            Head::Classifier { .. } => Some((all[f + 2], all[f + 3])),
            Head::LanguageModel => None,
        };
        Ok(Vars {
            wte,
            wpe,
            layers,
            ln_f,
            cls,
        })
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptyActiveSet);
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Dataset(format!("token {t} outside vocabulary of {}", self.config.vocab_size)));
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn block<'p, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'p, T>,
        lv: &LayerVars,
        x: Var,
        opts: &ForwardOptions,
        attn_opts: AttentionOptions<'_>,
        frozen: Option<&[bool]>,
        rng: &mut R,
    ) -> Result<(Var, attention::AttentionOutput)> {
        let a = g.layer_norm(x, lv.ln1.0, lv.ln1.1, LN_EPS)?;
        let attn = attention::causal_attention(g, a, &self.config.attention(), &lv.attn, attn_opts)?;
        let mut delta = g.dropout(attn.out, opts.dropout, opts.mode, rng)?;
        if let Some(keep) = frozen {
            delta = g.mask_rows(delta, keep)?;
        }
        let x = g.add(x, delta)?;
        let m = g.layer_norm(x, lv.ln2.0, lv.ln2.1, LN_EPS)?;
        let m = g.matmul(m, lv.fc.0)?;
        let m = g.add_row(m, lv.fc.1)?;
        let m = g.gelu(m)?;
        let m = g.matmul(m, lv.proj.0)?;
        let m = g.add_row(m, lv.proj.1)?;
        let mut delta = g.dropout(m, opts.dropout, opts.mode, rng)?;
        if let Some(keep) = frozen {
            delta = g.mask_rows(delta, keep)?;
        }
        Ok((g.add(x, delta)?, attn))
    }

    fn head<'p>(&self, g: &mut Graph<'p, T>, vars: &Vars, x: Var) -> Result<Var> {
        let h = g.layer_norm(x, vars.ln_f.0, vars.ln_f.1, LN_EPS)?;
        match vars.cls {
            None => g.matmul_nt(h, vars.wte),
            Some((w, b)) => {
                let rows = g.shape(h)[0];
                let last = g.gather_rows(h, &[rows - 1])?;
                let logits = g.matmul(last, w)?;
                g.add_row(logits, b)
            }
        }
    }

    /// Builds the full forward pass on `g`.
    ///
    /// Every block runs on the rows that entered it; afterwards the policy's
    /// budget decides how many of those rows the next block receives, chosen
    /// by the block's contribution vector. Language-model logits cover the
    /// surviving rows; classifier logits come from the last position.
    ///
    /// With [`ForwardOptions::prompt_len`] set, only the prompt is pruned.
    /// The remaining positions are decoded against the prompt's final active
    /// set: at every layer they attend to those rows and to each other, and
    /// they are never pruned themselves.
    pub fn forward_graph<'p, R: Rng + ?Sized>(
        &'p self,
        g: &mut Graph<'p, T>,
        tokens: &[u32],
        policy: &PreservationPolicy,
        opts: &ForwardOptions,
        rng: &mut R,
    ) -> Result<GraphForward> {
        self.check_tokens(tokens)?;
        let n = tokens.len();
        let prompt_len = opts.prompt_len.unwrap_or(n);
        if prompt_len == 0 || prompt_len > n {
            return Err(Error::config("prompt_len", format!("{prompt_len} not in 1..={n}")));
        }
        if prompt_len < n && matches!(self.config.head, Head::Classifier { .. }) {
            return Err(Error::config("prompt_len", "classifier heads take no decode positions"));
        }
        let vars = self.bind(g)?;
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let all: Vec<usize> = (0..n).collect();
        let x = g.embedding(vars.wte, &ids)?;
        let x = attention::add_positions(g, x, vars.wpe, &all)?;
        let x = g.dropout(x, opts.dropout, opts.mode, rng)?;
        let (xp, xt) = if prompt_len < n {
            (g.gather_rows(x, &all[..prompt_len])?, Some(g.gather_rows(x, &all[prompt_len..])?))
        } else {
            (x, None)
        };
        let pins = policy.pins.union(self.config.head_pins());
        let prompt = match policy.mode {
            PruneMode::Monotonic => self.prompt_monotonic(g, &vars, xp, prompt_len, policy, pins, opts, rng)?,
            PruneMode::Rescoring => self.prompt_rescoring(g, &vars, xp, prompt_len, policy, pins, opts, rng)?,
        };
        let mut trace = PreservationTrace::new(n, self.config.n_layers);
        for row in &prompt.kept {
            let mut full = row.clone();
            full.resize(n, true);
            trace.push_layer(&full)?;
        }
        let mut positions = prompt.final_positions.clone();
        let x = match xt {
            None => prompt.final_x,
            Some(mut xt) => {
                let f = positions.len();
                let tail: Vec<usize> = (f..f + n - prompt_len).collect();
                for (lv, (input, rows)) in vars.layers.iter().zip(&prompt.layer_inputs) {
                    let keep: Vec<usize> = prompt
                        .final_positions
                        .iter()
                        .map(|p| rows.binary_search(p).expect("final set is in every layer"))
                        .collect();
                    let kv = g.gather_rows(*input, &keep)?;
                    let rows = g.concat_rows(kv, xt)?;
                    let (h, _) = self.block(g, lv, rows, opts, AttentionOptions::default(), None, rng)?;
                    xt = g.gather_rows(h, &tail)?;
                }
                positions.extend(prompt_len..n);
                g.concat_rows(prompt.final_x, xt)?
            }
        };
        let logits = self.head(g, &vars, x)?;
        if let Head::Classifier { .. } = self.config.head {
            positions = vec![n - 1];
        }
        Ok(GraphForward {
            logits,
            positions,
            trace,
            contributions: prompt.contributions,
            attention_nodes: prompt.attention_nodes,
            prompt_len,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn prompt_monotonic<'p, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'p, T>,
        vars: &Vars,
        mut x: Var,
        n: usize,
        policy: &PreservationPolicy,
        pins: Pins,
        opts: &ForwardOptions,
        rng: &mut R,
    ) -> Result<PromptPass> {
        let mut active = ActiveSet::full(n, pins)?;
        let mut pass = PromptPass::start(n, x, self.config.n_layers);
        for lv in &vars.layers {
            pass.layer_inputs.push((x, active.positions().to_vec()));
            let (h, attn) = self.block(g, lv, x, opts, AttentionOptions::default(), None, rng)?;
            let next = select(attn.contributions.as_slice(), &active, policy.budget(active.len()))?;
            x = if next.len() < active.len() {
                g.gather_rows(h, &active.indices_of(&next))?
            } else {
                h
            };
            active = next;
            let mut row = vec![false; n];
            active.positions().iter().for_each(|&p| row[p] = true);
            pass.kept.push(row);
            pass.contributions.push(attn.contributions);
            pass.attention_nodes.push(attn.node);
        }
        pass.final_x = x;
        pass.final_positions = active.positions().to_vec();
        Ok(pass)
    }

    /// Every position stays resident. Pruned rows are frozen and masked as
    /// keys, but are still scored (on the causal-only soft-score) and may be
    /// selected again by a later layer.
    #[allow(clippy::too_many_arguments)]
    fn prompt_rescoring<'p, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'p, T>,
        vars: &Vars,
        mut x: Var,
        n: usize,
        policy: &PreservationPolicy,
        pins: Pins,
        opts: &ForwardOptions,
        rng: &mut R,
    ) -> Result<PromptPass> {
        let candidates = ActiveSet::full(n, pins)?;
        let all: Vec<usize> = (0..n).collect();
        let mut flags = vec![true; n];
        let mut n_active = n;
        let mut pass = PromptPass::start(n, x, self.config.n_layers);
        for lv in &vars.layers {
            pass.layer_inputs.push((x, all.clone()));
            let attn_opts = AttentionOptions {
                key_visible: Some(&flags),
                scoring_queries: Some(&flags),
                score_unmasked: true,
            };
            let (h, attn) = self.block(g, lv, x, opts, attn_opts, Some(&flags), rng)?;
            x = h;
            let next = select(attn.contributions.as_slice(), &candidates, policy.budget(n_active))?;
            n_active = next.len();
            flags = (0..n).map(|p| next.contains(p)).collect();
            pass.kept.push(flags.clone());
            pass.contributions.push(attn.contributions);
            pass.attention_nodes.push(attn.node);
        }
        let rows: Vec<usize> = (0..n).filter(|&p| flags[p]).collect();
        pass.final_x = if rows.len() < n { g.gather_rows(x, &rows)? } else { x };
        pass.final_positions = rows;
        Ok(pass)
    }

    /// Self-contained counted forward pass (dropout drawn from the model seed
    /// in train mode).
    pub fn forward(&self, tokens: &[u32], policy: &PreservationPolicy, opts: &ForwardOptions) -> Result<ForwardResult<T>> {
        let mut g = Graph::with_counter();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let fwd = self.forward_graph(&mut g, tokens, policy, opts, &mut rng)?;
        let n_classes = *g.shape(fwd.logits).last().expect("2-D logits");
        let cost = self.cost_of(policy, &fwd, g.macs());
        Ok(ForwardResult {
            logits: g.value(fwd.logits).to_vec(),
            n_classes,
            positions: fwd.positions,
            trace: fwd.trace,
            cost,
        })
    }

    /// Cost of a finished forward. Rescoring keeps every prompt row
    /// resident, so each layer processes the full prompt.
    pub fn cost_of(&self, policy: &PreservationPolicy, fwd: &GraphForward, macs_counted: u64) -> CostReport {
        let l = self.config.n_layers;
        let tail = fwd.trace.seq_len() - fwd.prompt_len;
        let entering: Vec<usize> = match policy.mode {
            PruneMode::Monotonic => fwd.trace.counts()[..l].iter().map(|c| c - tail).collect(),
            PruneMode::Rescoring => vec![fwd.prompt_len; l],
        };
        let final_rows = fwd.trace.counts()[l] - tail;
        let arch = self.config.arch();
        match self.config.head {
            Head::Classifier { .. } => CostReport::new(&arch, &entering, 1, macs_counted),
            Head::LanguageModel => CostReport::with_decode_tail(&arch, &entering, final_rows, tail, macs_counted),
        }
    }

    /// Greedy decoding. The prompt is prefilled under `policy`; each generated
    /// position attends, at every layer, to the prompt rows that survived the
    /// last layer and to every earlier generated position.
    pub fn generate(&self, prompt: &[u32], n_new: usize, policy: &PreservationPolicy) -> Result<Generation> {
        if !matches!(self.config.head, Head::LanguageModel) {
            return Err(Error::config("head", "generation needs a language-model head"));
        }
        if prompt.is_empty() {
            return Err(Error::EmptyActiveSet);
        }
        if prompt.len() + n_new > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: prompt.len() + n_new,
                max: self.config.max_seq_len,
            });
        }
        let mut tokens = prompt.to_vec();
        let mut final_active = Vec::with_capacity(n_new);
        let opts = ForwardOptions::eval().with_prompt_len(prompt.len());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..n_new {
            let mut g = Graph::new();
            let fwd = self.forward_graph(&mut g, &tokens, policy, &opts, &mut rng)?;
            let v = self.config.vocab_size;
            let logits = g.value(fwd.logits);
            let last = &logits[logits.len() - v..];
            final_active.push(fwd.positions.len());
            tokens.push(argmax(last) as u32);
        }
        Ok(Generation { tokens, final_active })
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<T: Element>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests;
