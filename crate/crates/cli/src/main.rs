//! `mist`: train, evaluate, sweep, trace, cost, gradient-check and
//! synthesize data from a flat TOML config.
//!
//! Every command writes its artifact plus `manifest.<command>.json` into the
//! output directory. Failures print one JSON line on stderr,
//! `{"error":"<kind>","message":"..."}`, and exit nonzero.

mod manifest;

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mist_core::answer::predict;
use mist_core::features::{generate_synthetic, save_features};
use mist_core::ista::validate_trace_json;
use mist_core::numerics::Graph;
use mist_core::rng::derive_seed;
use mist_core::selection::Noise;
use mist_harness::cost::cost_estimate;
use mist_harness::sweep::{sweep, write_sweep_csv, Axis};
use mist_harness::train::{eval_seed, model_grad_check};
use mist_harness::{evaluate, train, HarnessError, Model, ModelKind, TrainConfig};
use serde_json::json;

use manifest::RunManifest;

/// Relative error bound for `gradcheck`.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "mist", version, about = "Question-conditioned spatial-temporal selection for video QA")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config; writes params.bin, metrics.csv and config.toml.
    Train {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Evaluate saved parameters with deterministic selection.
    Eval {
        params: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        /// Evaluation-set seed; defaults to the one used during training.
        #[arg(long)]
        seed: Option<u64>,
        /// Defaults to the directory holding the params file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one job per value and seed along a single axis.
    Sweep {
        config: PathBuf,
        /// top_k, top_j, layers, segments or frames.
        #[arg(long)]
        axis: Axis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        /// Seeds shared by every value; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, default_value = "runs/sweep")]
        out: PathBuf,
    },
    /// Emit the selection trace of one synthetic sample.
    Trace {
        params: PathBuf,
        sample_seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-form multiply-accumulate report.
    Cost {
        config: PathBuf,
        #[arg(long, default_value = "runs/cost")]
        out: PathBuf,
    },
    /// Finite-difference check of the end-to-end loss at initialisation.
    Gradcheck {
        config: PathBuf,
        /// Step size; near-zero entries are roundoff-limited, so larger steps
        /// inside the allowed range give more headroom.
        #[arg(long, default_value_t = 5e-4)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        sample_seed: u64,
        #[arg(long, default_value = "runs/gradcheck")]
        out: PathBuf,
    },
    /// Write synthetic samples as feature files.
    Synth {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Defaults to the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Harness(HarnessError),
    Io(PathBuf, std::io::Error),
    Check(String),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Io(..) => "io",
            CliError::Check(_) => "check_failed",
            CliError::Harness(e) => match e {
                HarnessError::Config(_) => "config",
                HarnessError::Diverged { .. } => "diverged",
                HarnessError::Params(_) => "params",
                HarnessError::Io(_) | HarnessError::Csv(_) => "io",
                HarnessError::Json(_) => "format",
                HarnessError::Core(c) => match c {
                    mist_core::MistError::Format(_) => "format",
                    mist_core::MistError::Io(_) => "io",
                    mist_core::MistError::Invalid(_) => "config",
                    _ => "internal",
                },
            },
        }
    }

    fn exit_code(&self) -> u8 {
        match self.kind() {
            "usage" | "config" => 2,
            "io" | "format" | "params" => 3,
            "check_failed" => 4,
            _ => 1,
        }
    }

    fn message(&self) -> String {
        let text = match self {
            CliError::Usage(m) | CliError::Check(m) => m.clone(),
            CliError::Harness(e) => e.to_string(),
            CliError::Io(p, e) => format!("{}: {e}", p.display()),
        };
        text.split_whitespace().collect::<Vec<_>>().join(" ")
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        CliError::Harness(e)
    }
}

impl From<mist_core::MistError> for CliError {
    fn from(e: mist_core::MistError) -> Self {
        CliError::Harness(e.into())
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_at<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| CliError::Io(path.to_path_buf(), e))
}

fn prepare(dir: &Path) -> Result<()> {
    io_at(dir, fs::create_dir_all(dir))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(HarnessError::from)?;
    io_at(path, fs::write(path, text + "\n"))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(io_at(path, File::create(path))?))
}

fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = io_at(path, fs::read_to_string(path))?;
    TrainConfig::from_toml_str(&text).map_err(|e| match e {
        HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())).into(),
        other => other.into(),
    })
}

fn load_model(path: &Path) -> Result<Model> {
    match Model::load(path) {
        Err(HarnessError::Io(e)) => Err(CliError::Io(path.to_path_buf(), e)),
        other => Ok(other?),
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn finish(m: RunManifest, dir: &Path) -> Result<()> {
    let path = m.path_in(dir);
    io_at(&path, m.finish(dir)).map(|_| ())
}

fn cmd_train(config: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    prepare(out)?;
    let mut m = RunManifest::start("train").with_config(&cfg);
    m.inputs.push(config.to_path_buf());

    let (model, log) = train(&cfg)?;
    let params = out.join("params.bin");
    let metrics = out.join("metrics.csv");
    let resolved = out.join("config.toml");
    model.save(&params)?;
    log.write_csv(create(&metrics)?)?;
    io_at(&resolved, fs::write(&resolved, cfg.to_toml_string()))?;
    m.outputs.extend([params, metrics, resolved]);
    finish(m, out)?;

    let last = log.last_eval();
    println!(
        "{}",
        json!({
            "steps": cfg.steps,
            "final_loss": log.rows.last().map(|r| r.loss),
            "acc": last.and_then(|r| r.acc),
            "hit_rate": last.and_then(|r| r.hit_rate),
            "wall_seconds": log.wall_seconds,
        })
    );
    Ok(())
}

fn cmd_eval(params: &Path, n: Option<usize>, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let model = load_model(params)?;
    let out = out.unwrap_or_else(|| parent_dir(params));
    prepare(&out)?;
    let cfg = &model.config;
    let n = n.unwrap_or(cfg.eval_samples);
    let seed = seed.unwrap_or_else(|| eval_seed(cfg));
    let mut m = RunManifest::start("eval").with_config(cfg);
    m.seed = Some(seed);
    m.inputs.push(params.to_path_buf());

    let report = evaluate(&model, n, seed)?;
    let path = out.join("eval.json");
    write_json(&path, &report)?;
    m.outputs.push(path);
    finish(m, &out)?;
    println!("{}", serde_json::to_string(&report).map_err(HarnessError::from)?);
    Ok(())
}

fn cmd_sweep(config: &Path, axis: Axis, values: &[usize], seeds: Vec<u64>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds };
    prepare(out)?;
    let mut m = RunManifest::start("sweep").with_config(&cfg);
    m.inputs.push(config.to_path_buf());

    let rows = sweep(&cfg, axis, values, &seeds)?;
    let path = out.join("sweep.csv");
    write_sweep_csv(&rows, create(&path)?)?;
    m.outputs.push(path);
    finish(m, out)
}

fn cmd_trace(params: &Path, sample_seed: u64, out: Option<PathBuf>) -> Result<()> {
    let model = load_model(params)?;
    let cfg = &model.config;
    if cfg.model != ModelKind::Mist {
        return Err(CliError::Usage(format!("trace needs a mist model, params hold {:?}", cfg.model)));
    }
    let out = out.unwrap_or_else(|| parent_dir(params));
    prepare(&out)?;
    let mut m = RunManifest::start("trace").with_config(cfg);
    m.seed = Some(sample_seed);
    m.inputs.push(params.to_path_buf());

    let sample = generate_synthetic(&cfg.synth(), sample_seed)?;
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, &sample, &mut Noise::Eval, cfg.temp_end)?;
    let trace = fwd.trace.expect("mist models always trace");
    let value = serde_json::to_value(&trace).map_err(HarnessError::from)?;
    validate_trace_json(&value, model.ista_config())?;
    let prediction = predict(g.value(fwd.scores), Some(sample.label))?;

    let trace_path = out.join(format!("trace_{sample_seed}.json"));
    let pred_path = out.join(format!("prediction_{sample_seed}.json"));
    write_json(&trace_path, &value)?;
    write_json(
        &pred_path,
        &json!({
            "label": sample.label,
            "predicted": prediction.predicted,
            "correct": prediction.correct,
            "scores": prediction.scores,
            "planted": sample.planted,
        }),
    )?;
    m.outputs.extend([trace_path, pred_path]);
    finish(m, &out)
}

fn cmd_cost(config: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    prepare(out)?;
    let mut m = RunManifest::start("cost").with_config(&cfg);
    m.inputs.push(config.to_path_buf());
    let report = cost_estimate(&cfg)?;
    let path = out.join("cost.json");
    write_json(&path, &report)?;
    m.outputs.push(path);
    finish(m, out)?;
    println!("{}", serde_json::to_string(&report).map_err(HarnessError::from)?);
    Ok(())
}

fn cmd_gradcheck(config: &Path, eps: f64, sample_seed: u64, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    if !(eps > 1e-7 && eps < 1e-3) {
        return Err(CliError::Usage(format!("eps {eps} outside (1e-7, 1e-3)")));
    }
    prepare(out)?;
    let mut m = RunManifest::start("gradcheck").with_config(&cfg);
    m.inputs.push(config.to_path_buf());

    let model = Model::init(&cfg)?;
    let report = model_grad_check(&model, sample_seed, eps)?;
    let passed = report.max_rel_error < GRADCHECK_TOLERANCE;
    let path = out.join("gradcheck.json");
    let body = json!({
        "report": report,
        "eps": eps,
        "sample_seed": sample_seed,
        "tolerance": GRADCHECK_TOLERANCE,
        "passed": passed,
    });
    write_json(&path, &body)?;
    m.outputs.push(path);
    finish(m, out)?;
    println!("{body}");
    if passed {
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "max relative error {:e} at {} exceeds {GRADCHECK_TOLERANCE:e}",
            report.max_rel_error, report.worst_param_path
        )))
    }
}

fn cmd_synth(config: &Path, out: &Path, count: usize, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config)?;
    let seed = seed.unwrap_or(cfg.seed);
    prepare(out)?;
    let mut m = RunManifest::start("synth").with_config(&cfg);
    m.seed = Some(seed);
    m.inputs.push(config.to_path_buf());
    let synth = cfg.synth();
    for i in 0..count {
        let s = generate_synthetic(&synth, derive_seed(seed, &[i as u64]))?;
        let feat = out.join(format!("sample_{i}.mistfeat"));
        let meta = out.join(format!("sample_{i}.json"));
        save_features(&s.video, &s.question, &s.answers, &feat)?;
        write_json(&meta, &json!({ "label": s.label, "planted": s.planted }))?;
        m.outputs.extend([feat, meta]);
    }
    finish(m, out)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed, out } => cmd_train(&config, seed, &out),
        Command::Eval { params, n, seed, out } => cmd_eval(&params, n, seed, out),
        Command::Sweep {
            config,
            axis,
            values,
            seeds,
            out,
        } => cmd_sweep(&config, axis, &values, seeds, &out),
        Command::Trace { params, sample_seed, out } => cmd_trace(&params, sample_seed, out),
        Command::Cost { config, out } => cmd_cost(&config, &out),
        Command::Gradcheck {
            config,
            eps,
            sample_seed,
            out,
        } => cmd_gradcheck(&config, eps, sample_seed, &out),
        Command::Synth { config, out, count, seed } => cmd_synth(&config, &out, count, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or_default();
            return report(CliError::Usage(first.trim_start_matches("error: ").to_string()));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(e),
    }
}

fn report(e: CliError) -> ExitCode {
    eprintln!("{}", json!({ "error": e.kind(), "message": e.message() }));
    ExitCode::from(e.exit_code())
}
