//! Uniform-α fine-tuning and zero-shot evaluation sweeps.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::CostReport;
use crate::error::{Error, Result};
use crate::model::{argmax, ForwardOptions, GraphForward, Head, Model};
use crate::par::Execution;
use crate::policy::{sample_alpha, PreservationPolicy, PruneMode, ALPHA_FLOOR, DEFAULT_TAU};
use crate::tasks::{Dataset, Example, Metric};
use crate::tensor::{Element, Graph, Mode, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub steps: Option<usize>,
    pub dropout: f64,
    pub alpha_lo: f64,
    pub alpha_hi: f64,
    pub tau: usize,
    pub seed: u64,
    pub mode: PruneMode,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 4e-5,
            batch_size: 8,
            epochs: 5,
            steps: None,
            dropout: 0.1,
            alpha_lo: ALPHA_FLOOR,
            alpha_hi: 1.0,
            tau: DEFAULT_TAU,
            seed: 0,
            mode: PruneMode::Monotonic,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.epochs == 0 && self.steps.is_none() {
            return Err(Error::config("epochs", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must be in [0, 1)"));
        }
        if !(self.alpha_lo > 0.0 && self.alpha_lo <= self.alpha_hi && self.alpha_hi <= 1.0) {
            return Err(Error::RateBounds {
                lo: self.alpha_lo,
                hi: self.alpha_hi,
            });
        }
        if self.tau == 0 {
            return Err(Error::config("tau", "must be positive"));
        }
        Ok(())
    }

    /// Fixed-rate training at `alpha`.
    pub fn fixed(mut self, alpha: f64) -> Self {
        self.alpha_lo = alpha;
        self.alpha_hi = alpha;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub alpha: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,alpha,loss,grad_norm\n");
        for r in &self.records {
            writeln!(s, "{},{},{},{}", r.step, r.alpha, r.loss, r.grad_norm).expect("write to string");
        }
        s
    }
}

/// Mini-batches of example indices: a fresh shuffle per epoch, cycled until
/// `steps` batches exist. The last batch of an epoch may be short.
pub fn batch_schedule(n_examples: usize, cfg: &TrainConfig) -> Vec<Vec<usize>> {
    let per_epoch = n_examples.div_ceil(cfg.batch_size);
    let steps = cfg.steps.unwrap_or(cfg.epochs * per_epoch);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(steps);
    let mut order: Vec<usize> = (0..n_examples).collect();
    while out.len() < steps {
        order.shuffle(&mut rng);
        for b in order.chunks(cfg.batch_size) {
            if out.len() == steps {
                break;
            }
            out.push(b.to_vec());
        }
    }
    out
}

/// Dropout stream for one sequence of one step.
pub fn example_rng(seed: u64, step: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((step as u64) << 20) | index as u64);
    rng
}

/// Stream for the per-step rate draws, independent of the batch shuffle.
fn alpha_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    rng
}

/// Per-example scoring results.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ExampleStats {
    pub targets: usize,
    pub correct: usize,
    pub nll_sum: f64,
}

impl ExampleStats {
    fn add(&mut self, o: &ExampleStats) {
        self.targets += o.targets;
        self.correct += o.correct;
        self.nll_sum += o.nll_sum;
    }
}

/// Builds the forward for `ex` and its mean cross-entropy over the scored
/// rows. `None` when no scored row survived.
pub fn example_loss<'p, T: Element, R: Rng + ?Sized>(
    model: &'p Model<T>,
    g: &mut Graph<'p, T>,
    ex: &Example,
    policy: &PreservationPolicy,
    mode: Mode,
    dropout: f64,
    rng: &mut R,
) -> Result<(GraphForward, Option<Var>, ExampleStats)> {
    let mut opts = ForwardOptions {
        mode,
        dropout,
        prompt_len: None,
    };
    if let Some(p) = ex.prompt_len() {
        opts = opts.with_prompt_len(p);
    }
    let fwd = model.forward_graph(g, ex.tokens(), policy, &opts, rng)?;
    let classes = *g.shape(fwd.logits).last().expect("2-D logits");
    let (rows, targets): (Vec<usize>, Vec<usize>) = match (ex, model.config().head) {
        (Example::Class { label, .. }, Head::Classifier { n_classes }) => {
            if *label >= n_classes {
                return Err(Error::Dataset(format!("label {label} outside {n_classes} classes")));
            }
            (vec![0], vec![*label])
        }
        (Example::Lm { .. }, Head::LanguageModel) => ex.lm_targets(&fwd.positions).into_iter().unzip(),
        _ => return Err(Error::Dataset("example kind does not match the model head".into())),
    };
    if rows.is_empty() {
        return Ok((fwd, None, ExampleStats::default()));
    }
    let logits = if rows.len() == g.shape(fwd.logits)[0] {
        fwd.logits
    } else {
        g.gather_rows(fwd.logits, &rows)?
    };
    let values = g.value(logits);
    let correct = targets
        .iter()
        .enumerate()
        .filter(|&(r, &t)| argmax(&values[r * classes..(r + 1) * classes]) == t)
        .count();
    let loss = g.cross_entropy(logits, &targets)?;
    let mean = g.value(loss)[0].to_f64_lossy();
    let stats = ExampleStats {
        targets: targets.len(),
        correct,
        nll_sum: mean * targets.len() as f64,
    };
    Ok((fwd, Some(loss), stats))
}

struct Adam<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl<T: Element> Adam<T> {
    fn new(model: &Model<T>) -> Self {
        let zeros: Vec<Vec<T>> = model.params().iter().map(|p| vec![T::zero(); p.data.len()]).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, model: &mut Model<T>, grads: &[Vec<T>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (T::of(BETA1), T::of(BETA2));
        let c1 = T::of(1.0 - BETA1.powi(self.t));
        let c2 = T::of(1.0 - BETA2.powi(self.t));
        let (lr, eps) = (T::of(lr), T::of(ADAM_EPS));
        for (i, p) in model.params_mut().iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for j in 0..p.data.len() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p.data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Fine-tunes `model` in place.
///
/// Each step draws one rate from `U(alpha_lo, alpha_hi)` and applies it to
/// every sequence of the batch. The loss is the mean over sequences of each
/// sequence's mean token (or class) cross-entropy; selections are constants
/// to the gradient. Sequences run on [`TrainConfig::execution`]; gradients
/// are summed in batch order, so the result does not depend on threading.
pub fn train<T: Element>(model: &mut Model<T>, data: &Dataset, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    let schedule = batch_schedule(data.len(), cfg);
    let mut alpha_rng = alpha_rng(cfg.seed);
    let mut adam = Adam::new(model);
    let mut log = TrainLog::default();
    let sizes: Vec<usize> = model.params().iter().map(|p| p.data.len()).collect();
    for (step, batch) in schedule.iter().enumerate() {
        let alpha = sample_alpha(&mut alpha_rng, cfg.alpha_lo, cfg.alpha_hi)?;
        let policy = PreservationPolicy::new(alpha, cfg.tau)?.with_mode(cfg.mode);
        let m: &Model<T> = model;
        let results = cfg.execution.map(batch, |i, &idx| -> Result<Option<(f64, Vec<(usize, Vec<T>)>)>> {
            let mut rng = example_rng(cfg.seed, step, i);
            let mut g = Graph::new();
            let (_, loss, _) = example_loss(m, &mut g, &data.examples[idx], &policy, Mode::Train, cfg.dropout, &mut rng)?;
            let Some(loss) = loss else { return Ok(None) };
            let value = g.value(loss)[0].to_f64_lossy();
            g.backward(loss)?;
            Ok(Some((value, g.param_grads().map(|(id, gr)| (id, gr.to_vec())).collect())))
        });
        let mut grads: Vec<Vec<T>> = sizes.iter().map(|&n| vec![T::zero(); n]).collect();
        let (mut loss_sum, mut counted) = (0.0, 0usize);
        for r in results {
            let Some((loss, per_param)) = r? else { continue };
            loss_sum += loss;
            counted += 1;
            for (id, gr) in per_param {
                for (a, b) in grads[id].iter_mut().zip(gr) {
                    *a += b;
                }
            }
        }
        if counted == 0 {
            continue;
        }
        let loss = loss_sum / counted as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, alpha });
        }
        let scale = T::of(1.0 / counted as f64);
        let mut sq = 0.0;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= scale;
                sq += x.to_f64_lossy().powi(2);
            }
        }
        adam.step(model, &grads, cfg.lr);
        log.records.push(StepRecord {
            step,
            alpha,
            loss,
            grad_norm: sq.sqrt(),
        });
    }
    Ok(log)
}

/// One point of an evaluation sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalPoint {
    pub alpha: f64,
    pub metric: Metric,
    /// Accuracy or perplexity, per `metric`.
    pub value: f64,
    pub accuracy: f64,
    pub perplexity: f64,
    pub cost: CostReport,
}

/// Scores `data` once per rate, without touching the parameters.
/// Accuracy is per scored token (per example for classifiers); perplexity is
/// `exp` of the mean token NLL.
pub fn evaluate<T: Element>(
    model: &Model<T>,
    data: &Dataset,
    alphas: &[f64],
    tau: usize,
    mode: PruneMode,
    execution: Execution,
) -> Result<Vec<EvalPoint>> {
    alphas
        .iter()
        .map(|&alpha| {
            let policy = PreservationPolicy::new(alpha, tau)?.with_mode(mode);
            let per = execution.map(&data.examples, |_, ex| -> Result<(ExampleStats, CostReport)> {
                let mut g = Graph::with_counter();
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let (fwd, _, stats) = example_loss(model, &mut g, ex, &policy, Mode::Eval, 0.0, &mut rng)?;
                Ok((stats, model.cost_of(&policy, &fwd, g.macs())))
            });
            let mut stats = ExampleStats::default();
            let mut cost: Option<CostReport> = None;
            for r in per {
                let (s, c) = r?;
                stats.add(&s);
                match cost.as_mut() {
                    Some(acc) => acc.accumulate(&c),
                    None => cost = Some(c),
                }
            }
            let n = stats.targets.max(1) as f64;
            let accuracy = stats.correct as f64 / n;
            let perplexity = (stats.nll_sum / n).exp();
            Ok(EvalPoint {
                alpha,
                metric: data.metric,
                value: match data.metric {
                    Metric::Accuracy => accuracy,
                    Metric::Perplexity => perplexity,
                },
                accuracy,
                perplexity,
                cost: cost.unwrap_or_default(),
            })
        })
        .collect()
}
