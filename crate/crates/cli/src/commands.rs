use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use dra_core::cost::{self, ArchPreset, AttentionKind, CostReport, HeadCost};
use dra_core::model::{load_checkpoint, save_checkpoint};
use dra_core::trace::{export_csv, export_pgm, export_sweep_csv, export_sweep_svg, SweepPoint};
use dra_core::trainer::{evaluate, train as fit};
use dra_core::{Error, Execution, ForwardOptions, Model, PreservationPolicy, PruneMode};
use serde_json::json;

use crate::config::RunConfig;
use crate::{CalibrateArgs, CostArgs, GenerateArgs, RunArgs, SweepArgs, TraceArgs, TrainArgs};

pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn usage(field: &str, message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            kind: "config",
            message: format!("{field}: {}", message.into()),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_RUNTIME,
            kind: "runtime",
            message: message.into(),
        }
    }

    pub fn to_json(&self) -> String {
        json!({ "error": self.kind, "code": self.code, "message": self.message }).to_string()
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::Config { .. } | Error::RateBounds { .. } | Error::Policy(_) => (EXIT_USAGE, "config"),
            Error::SpeedupOutOfRange { .. } | Error::SpeedupGranularity { .. } => (EXIT_USAGE, "speedup"),
            Error::SequenceTooLong { .. } => (EXIT_USAGE, "input"),
            Error::Diverged { .. } => (EXIT_DIVERGED, "diverged"),
            Error::Checkpoint(_) => (EXIT_RUNTIME, "checkpoint"),
            Error::Io(_) => (EXIT_RUNTIME, "io"),
            _ => (EXIT_RUNTIME, "runtime"),
        };
        CliError {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn resolve(base: Option<&Path>, run: &RunArgs) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::default();
    for path in base.into_iter().chain(run.config.as_deref()) {
        let text = fs::read_to_string(path).map_err(|e| CliError::usage("config", format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for (k, v) in run.overrides() {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load(path: &Path) -> CliResult<Model<f32>> {
    if !path.is_file() {
        return Err(CliError::usage("checkpoint", format!("{} does not exist", path.display())));
    }
    Ok(load_checkpoint(path)?)
}

/// `out_dir/run-<secs>-s<seed>`, suffixed if that already exists.
fn fresh_run_dir(out_dir: &Path, seed: u64) -> CliResult<PathBuf> {
    fs::create_dir_all(out_dir)?;
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let base = format!("run-{secs}-s{seed}");
    let mut dir = out_dir.join(&base);
    let mut k = 1;
    while dir.exists() {
        dir = out_dir.join(format!("{base}-{k}"));
        k += 1;
    }
    fs::create_dir(&dir)?;
    Ok(dir)
}

fn tokens_of(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| u32::from(b)).collect()
}

pub fn train(args: &TrainArgs) -> CliResult {
    let cfg = resolve(None, &args.run)?;
    let (train_set, eval_set) = cfg.datasets()?;
    let mut model = Model::<f32>::init(cfg.model_config()?)?;
    let dir = fresh_run_dir(&cfg.out_dir, cfg.train.seed)?;
    fs::write(dir.join("config.txt"), cfg.snapshot())?;
    let log = fit(&mut model, &train_set, &cfg.train)?;
    fs::write(dir.join("train_log.csv"), log.to_csv())?;
    let ckpt = dir.join("model.ckpt");
    save_checkpoint(&model, &ckpt)?;
    let last = log.records.last();
    println!(
        "{}",
        json!({
            "run_dir": dir.display().to_string(),
            "checkpoint": ckpt.display().to_string(),
            "steps": log.records.len(),
            "final_loss": last.map(|s| s.loss),
            "train_examples": train_set.len(),
            "eval_examples": eval_set.len(),
        })
    );
    Ok(())
}

pub fn sweep(args: &SweepArgs) -> CliResult {
    let model = load(&args.checkpoint)?;
    let dir = args.checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf();
    let snapshot = dir.join("config.txt");
    let cfg = resolve(snapshot.is_file().then_some(snapshot.as_path()), &args.run)?;
    let (_, eval_set) = cfg.datasets()?;
    let (tau, mode) = (cfg.train.tau, cfg.train.mode);

    let alphas = if !args.speedups.is_empty() {
        let arch = model.config().arch();
        args.speedups
            .iter()
            .map(|&target| {
                cost::calibrate_with(target, |alpha| {
                    let policy = PreservationPolicy::new(alpha, tau)?.with_mode(mode);
                    let mut total = CostReport::default();
                    for ex in &eval_set.examples {
                        let n = ex.tokens().len();
                        let p = ex.prompt_len().unwrap_or(n);
                        total.accumulate(&cost::planned_cost(&arch, p, n - p, &policy));
                    }
                    Ok(total.speedup_macs)
                })
            })
            .collect::<Result<Vec<_>, _>>()?
    } else if args.alphas.is_empty() {
        vec![1.0, 0.7, 0.5, 0.3, 0.1]
    } else {
        args.alphas.clone()
    };

    let points = evaluate(&model, &eval_set, &alphas, tau, mode, Execution::default())?;
    let metric_name = match eval_set.metric {
        dra_core::tasks::Metric::Accuracy => "accuracy",
        dra_core::tasks::Metric::Perplexity => "perplexity",
    };
    let sweep: Vec<SweepPoint> = points
        .iter()
        .map(|p| SweepPoint {
            series: "model".into(),
            alpha: p.alpha,
            speedup: p.cost.speedup_macs,
            metric: p.value,
            memory_ratio: p.cost.memory_ratio,
        })
        .collect();
    let csv = export_sweep_csv(&sweep);
    fs::write(dir.join("sweep.csv"), &csv)?;
    fs::write(dir.join("sweep.svg"), export_sweep_svg(&sweep, metric_name)?)?;
    print!("{csv}");
    Ok(())
}

fn parse_mode(s: &str) -> CliResult<PruneMode> {
    match s {
        "monotonic" => Ok(PruneMode::Monotonic),
        "rescoring" => Ok(PruneMode::Rescoring),
        _ => Err(CliError::usage("mode", "expected monotonic or rescoring")),
    }
}

pub fn trace(args: &TraceArgs) -> CliResult {
    let model = load(&args.checkpoint)?;
    let bytes = match (&args.text, &args.input_file) {
        (Some(t), _) => t.as_bytes().to_vec(),
        (None, Some(p)) => fs::read(p)?,
        (None, None) => return Err(CliError::usage("input", "give --text or --input-file")),
    };
    let policy = PreservationPolicy::new(args.alpha, args.tau)?
        .with_mode(parse_mode(&args.mode)?);
    let r = model.forward(&tokens_of(&bytes), &policy, &ForwardOptions::eval())?;
    fs::create_dir_all(&args.out_dir)?;
    let csv = args.out_dir.join("trace.csv");
    let pgm = args.out_dir.join("trace.pgm");
    fs::write(&csv, export_csv(&r.trace)?)?;
    fs::write(&pgm, export_pgm(&r.trace)?)?;
    println!(
        "{}",
        json!({
            "seq_len": r.trace.seq_len(),
            "counts": r.trace.counts(),
            "csv": csv.display().to_string(),
            "pgm": pgm.display().to_string(),
        })
    );
    Ok(())
}

fn arch_of(args: &CostArgs) -> CliResult<ArchPreset> {
    match (&args.preset, args.layers) {
        (Some(name), _) => Ok(cost::preset(name)?),
        (None, Some(n_layers)) => {
            let a = ArchPreset {
                name: "custom".into(),
                n_layers,
                n_heads: args.heads.unwrap_or(1),
                d_model: args.d_model.unwrap_or(0),
                d_mlp: args.d_mlp.unwrap_or(0),
                attention: AttentionKind::Mha,
                head: HeadCost::None,
            };
            if a.n_layers == 0 || a.n_heads == 0 || a.d_model == 0 || a.d_model % a.n_heads != 0 {
                return Err(CliError::usage("dims", "need positive layers and heads, with heads dividing d-model"));
            }
            Ok(a)
        }
        (None, None) => Err(CliError::usage("preset", "give --preset or --layers/--heads/--d-model/--d-mlp")),
    }
}

pub fn cost(args: &CostArgs) -> CliResult {
    let arch = arch_of(args)?;
    if args.seq == 0 {
        return Err(CliError::usage("seq", "must be positive"));
    }
    let alpha = match (args.alpha, args.target_speedup) {
        (_, Some(t)) => cost::calibrate_alpha(&arch, args.seq, t, args.tau)?,
        (Some(a), None) => a,
        (None, None) => 1.0,
    };
    let policy = PreservationPolicy::new(alpha, args.tau)?;
    let report = cost::planned_cost(&arch, args.seq, 0, &policy);
    if args.csv {
        println!("preset,seq,alpha,{}", CostReport::CSV_HEADER);
        println!("{},{},{alpha},{}", arch.name, args.seq, report.csv_row());
    } else {
        println!("preset            {:>20}", arch.name);
        println!("seq               {:>20}", args.seq);
        println!("alpha             {alpha:>20}");
        print!("{report}");
    }
    Ok(())
}

pub fn calibrate(args: &CalibrateArgs) -> CliResult {
    let arch = cost::preset(&args.preset)?;
    let alpha = cost::calibrate_alpha(&arch, args.seq, args.target_speedup, args.tau)?;
    let achieved = cost::analytic_speedup(&arch, args.seq, &PreservationPolicy::new(alpha, args.tau)?);
    println!(
        "{}",
        json!({ "preset": arch.name, "seq": args.seq, "target": args.target_speedup, "alpha": alpha, "speedup": achieved })
    );
    Ok(())
}

pub fn generate(args: &GenerateArgs) -> CliResult {
    let model = load(&args.checkpoint)?;
    let policy = PreservationPolicy::new(args.alpha, args.tau)?;
    let prompt = tokens_of(args.prompt.as_bytes());
    let g = model.generate(&prompt, args.n_new, &policy)?;
    let bytes: Vec<u8> = g.tokens[prompt.len()..].iter().map(|&t| t as u8).collect();
    let mut out = json!({
        "completion": String::from_utf8_lossy(&bytes),
        "final_active": g.final_active,
    });
    if let Some(reps) = args.ttft_reps {
        let t = cost::measure_ttft(&model, &prompt, &policy, reps)?;
        out["ttft_median_secs"] = json!(t.median_secs);
        out["speedup_macs"] = json!(t.speedup_macs);
    }
    println!("{out}");
    Ok(())
}
