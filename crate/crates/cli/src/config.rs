//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use dra_core::model::{Head, ModelConfig};
use dra_core::policy::PruneMode;
use dra_core::tasks::{split, Dataset, Task};
use dra_core::trainer::TrainConfig;
use dra_core::{Error, Result};

/// Everything a run needs, merged from defaults, a config file and flags
/// (later sources win).
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: String,
    pub text_file: Option<PathBuf>,
    pub min_len: usize,
    pub max_len: usize,
    pub alphabet: usize,
    pub parity_len: usize,
    pub chunk: usize,
    pub examples: usize,
    pub eval_examples: usize,
    pub preset: String,
    pub d_model: Option<usize>,
    pub n_layers: Option<usize>,
    pub n_heads: Option<usize>,
    pub d_mlp: Option<usize>,
    pub max_seq_len: Option<usize>,
    pub train: TrainConfig,
    pub out_dir: PathBuf,
}

/// Keys accepted in config files and as `--key` flags (with `-` for `_`).
pub const KEYS: &[&str] = &[
    "task",
    "text_file",
    "min_len",
    "max_len",
    "alphabet",
    "parity_len",
    "chunk",
    "examples",
    "eval_examples",
    "preset",
    "d_model",
    "n_layers",
    "n_heads",
    "d_mlp",
    "max_seq_len",
    "lr",
    "batch_size",
    "epochs",
    "steps",
    "dropout",
    "alpha_lo",
    "alpha_hi",
    "tau",
    "seed",
    "mode",
    "out_dir",
];

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: "copy".into(),
            text_file: None,
            min_len: 6,
            max_len: 6,
            alphabet: 10,
            parity_len: 24,
            chunk: 64,
            examples: 4000,
            eval_examples: 200,
            preset: "gpt2-nano".into(),
            d_model: None,
            n_layers: None,
            n_heads: None,
            d_mlp: None,
            max_seq_len: None,
            train: TrainConfig::default(),
            out_dir: PathBuf::from("runs"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse {value:?}")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let k = key.as_str();
        let v = value.trim();
        match k {
            "task" => self.task = v.to_string(),
            "text_file" => self.text_file = Some(PathBuf::from(v)),
            "min_len" => self.min_len = parse(k, v)?,
            "max_len" => self.max_len = parse(k, v)?,
            "alphabet" => self.alphabet = parse(k, v)?,
            "parity_len" => self.parity_len = parse(k, v)?,
            "chunk" => self.chunk = parse(k, v)?,
            "examples" => self.examples = parse(k, v)?,
            "eval_examples" => self.eval_examples = parse(k, v)?,
            "preset" => self.preset = v.to_string(),
            "d_model" => self.d_model = Some(parse(k, v)?),
            "n_layers" => self.n_layers = Some(parse(k, v)?),
            "n_heads" => self.n_heads = Some(parse(k, v)?),
            "d_mlp" => self.d_mlp = Some(parse(k, v)?),
            "max_seq_len" => self.max_seq_len = Some(parse(k, v)?),
            "lr" => self.train.lr = parse(k, v)?,
            "batch_size" => self.train.batch_size = parse(k, v)?,
            "epochs" => self.train.epochs = parse(k, v)?,
            "steps" => self.train.steps = Some(parse(k, v)?),
            "dropout" => self.train.dropout = parse(k, v)?,
            "alpha_lo" => self.train.alpha_lo = parse(k, v)?,
            "alpha_hi" => self.train.alpha_hi = parse(k, v)?,
            "tau" => self.train.tau = parse(k, v)?,
            "seed" => self.train.seed = parse(k, v)?,
            "mode" => {
                self.train.mode = match v {
                    "monotonic" => PruneMode::Monotonic,
                    "rescoring" => PruneMode::Rescoring,
                    _ => return Err(Error::config(k, "expected monotonic or rescoring")),
                }
            }
            "out_dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(Error::config(k, "unknown key")),
        }
        Ok(())
    }

    /// Applies a `key = value` document. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config("config", format!("line {}: expected key = value", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.alpha_lo > self.train.alpha_hi {
            return Err(Error::config("alpha_lo", "alpha-lo exceeds alpha-hi"));
        }
        self.train.validate()?;
        self.task()?;
        self.model_config()?.validate()?;
        if self.examples == 0 && self.task != "text" {
            return Err(Error::config("examples", "must be positive"));
        }
        Ok(())
    }

    pub fn task(&self) -> Result<Task> {
        Ok(match self.task.as_str() {
            "copy" => Task::Copy {
                min_len: self.min_len,
                max_len: self.max_len,
                alphabet: self.alphabet,
            },
            "reverse" => Task::Reverse {
                min_len: self.min_len,
                max_len: self.max_len,
                alphabet: self.alphabet,
            },
            "parity" => Task::Parity { len: self.parity_len },
            "text" => {
                let path = self
                    .text_file
                    .as_ref()
                    .ok_or_else(|| Error::config("text_file", "required for the text task"))?;
                let text = std::fs::read(path)
                    .map_err(|e| Error::config("text_file", format!("{}: {e}", path.display())))?;
                Task::Text { text, chunk: self.chunk }
            }
            other => return Err(Error::config("task", format!("unknown task {other:?}; expected copy, reverse, parity or text"))),
        })
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut c = ModelConfig::preset(&self.preset)
            .ok_or_else(|| Error::config("preset", format!("{:?} is not an executable preset; expected gpt2-nano", self.preset)))?;
        if let Some(v) = self.d_model {
            c.d_model = v;
            c.d_mlp = 4 * v;
        }
        if let Some(v) = self.n_layers {
            c.n_layers = v;
        }
        if let Some(v) = self.n_heads {
            c.n_heads = v;
        }
        if let Some(v) = self.d_mlp {
            c.d_mlp = v;
        }
        if let Some(v) = self.max_seq_len {
            c.max_seq_len = v;
        }
        if self.task == "parity" {
            c.head = Head::Classifier { n_classes: 2 };
        }
        c.seed = self.train.seed;
        Ok(c)
    }

    /// `(train, held_out)` examples. Both are fixed by the seed, so a sweep
    /// can rebuild the held-out set from a saved snapshot.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let data = self.task()?.build(self.examples, self.train.seed)?;
        Ok(split(data, self.eval_examples, self.train.seed.wrapping_add(1)))
    }

    /// Every key with its resolved value, in [`KEYS`] order.
    pub fn snapshot(&self) -> String {
        let opt = |v: Option<usize>| v.map_or_else(String::new, |v| v.to_string());
        let t = &self.train;
        let mut s = String::new();
        for &k in KEYS {
            let v = match k {
                "task" => self.task.clone(),
                "text_file" => self.text_file.as_ref().map_or_else(String::new, |p| p.display().to_string()),
                "min_len" => self.min_len.to_string(),
                "max_len" => self.max_len.to_string(),
                "alphabet" => self.alphabet.to_string(),
                "parity_len" => self.parity_len.to_string(),
                "chunk" => self.chunk.to_string(),
                "examples" => self.examples.to_string(),
                "eval_examples" => self.eval_examples.to_string(),
                "preset" => self.preset.clone(),
                "d_model" => opt(self.d_model),
                "n_layers" => opt(self.n_layers),
                "n_heads" => opt(self.n_heads),
                "d_mlp" => opt(self.d_mlp),
                "max_seq_len" => opt(self.max_seq_len),
                "lr" => t.lr.to_string(),
                "batch_size" => t.batch_size.to_string(),
                "epochs" => t.epochs.to_string(),
                "steps" => t.steps.map_or_else(String::new, |v| v.to_string()),
                "dropout" => t.dropout.to_string(),
                "alpha_lo" => t.alpha_lo.to_string(),
                "alpha_hi" => t.alpha_hi.to_string(),
                "tau" => t.tau.to_string(),
                "seed" => t.seed.to_string(),
                "mode" => match t.mode {
                    PruneMode::Monotonic => "monotonic".into(),
                    PruneMode::Rescoring => "rescoring".into(),
                },
                "out_dir" => self.out_dir.display().to_string(),
                _ => unreachable!("every key is listed"),
            };
            if !v.is_empty() {
                writeln!(s, "{k} = {v}").expect("write to string");
            }
        }
        s
    }
}
