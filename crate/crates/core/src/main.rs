//! `sgnet` command-line entry point: synthesize data, train, evaluate,
//! predict and run the gradient check.

use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use sgnet::config::{LoadedData, RunConfig};
use sgnet::data::{synth_generate, write_bev_text, SynthKind, SynthSpec, Window};
use sgnet::gradcheck::check_model;
use sgnet::graph::Fault;
use sgnet::model::{Ablation, Mode, ModelConfig, SgeVariant, Sgnet};
use sgnet::train::{evaluate, predict_windows, Checkpoint, EpochRecord, EvalOptions, Trainer};
use sgnet::Error;

#[derive(Parser)]
#[command(name = "sgnet", version, about = "Stepwise goal-driven trajectory prediction")]
struct Cli {
    /// Worker threads; defaults to SGNET_THREADS or the number of cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic tracks as a bev-text file.
    Synth(SynthArgs),
    /// Train a model and write checkpoints, the epoch log and the effective config.
    Train(TrainArgs),
    /// Score a checkpoint and write metrics.csv and metrics.json.
    Eval(EvalArgs),
    /// Write every proposal of every window as CSV rows.
    Predict(PredictArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// constant-velocity, circular or piecewise-goal[:EVERY]
    #[arg(long, default_value = "constant-velocity")]
    kind: String,
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// States per track.
    #[arg(long, default_value_t = 20)]
    len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Standard deviation of Gaussian position noise.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.lr=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Shorthand for `model.ablation` (ED, E or D).
    #[arg(long)]
    ablation: Option<String>,
    /// Shorthand for `train.epochs`.
    #[arg(long)]
    epochs: Option<usize>,
    /// Continue from a checkpoint. Without `--config` its recorded settings are reused.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Write 0 in the seconds column so reruns produce identical files.
    #[arg(long)]
    fixed_clock: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Partition {
    Train,
    Val,
    Test,
    All,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Data files replacing the recorded `data.paths`.
    #[arg(long, num_args = 1..)]
    data: Vec<PathBuf>,
    /// Override a data or split key. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, value_enum, default_value = "test")]
    partition: Partition,
    /// Proposals per window; ignored by deterministic checkpoints.
    #[arg(long)]
    k: Option<usize>,
    /// Seed of the latent samples.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Step cutoffs, in steps or seconds with an `s` suffix (e.g. `15,30,45` or `0.5s,1s`).
    #[arg(long, value_delimiter = ',')]
    horizons: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Size {
    Tiny,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    TanhSlope,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "tiny")]
    size: Size,
    /// Parameter entries to probe.
    #[arg(long, default_value_t = 120)]
    probes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "recurrent")]
    sge: String,
    #[arg(long, default_value = "stochastic")]
    mode: String,
    #[arg(long, hide = true, value_enum)]
    inject_fault: Option<FaultArg>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = init_threads(cli.threads) {
        eprintln!("error: {:#}", e);
        return ExitCode::from(2);
    }
    let result = match cli.cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for configuration problems and missing inputs, 1 otherwise.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        match cause.downcast_ref::<Error>() {
            Some(Error::Config(_) | Error::Parse { .. }) => return 2,
            Some(Error::Io(io)) if io.kind() == std::io::ErrorKind::NotFound => return 2,
            _ => {}
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            if io.kind() == std::io::ErrorKind::NotFound {
                return 2;
            }
        }
    }
    1
}

fn init_threads(flag: Option<usize>) -> anyhow::Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("SGNET_THREADS") {
            Ok(v) => Some(
                v.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("SGNET_THREADS must be an integer, got '{}'", v)))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(Error::Config("thread count must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> anyhow::Result<ExitCode> {
    let spec = SynthSpec {
        kind: a.kind.parse::<SynthKind>()?,
        n: a.n,
        len: a.len,
        seed: a.seed,
        noise: a.noise,
    };
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::Config(format!("--noise must be a non-negative number, got {}", a.noise)).into());
    }
    let tracks = synth_generate(&spec);
    let file = fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_bev_text(&tracks, BufWriter::new(file))?;
    log::info!("wrote {} tracks to {}", tracks.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<ExitCode> {
    let resumed = a.resume.as_deref().map(load_checkpoint).transpose()?;
    let mut cfg = match (&a.config, &resumed) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            RunConfig::parse(&text).with_context(|| format!("in {}", path.display()))?
        }
        (None, Some(ckpt)) => RunConfig::from_checkpoint(ckpt)?,
        (None, None) => RunConfig::default(),
    };
    cfg.apply_overrides(&a.overrides)?;
    if let Some(seed) = a.seed {
        cfg.set("train.seed", &seed.to_string())?;
    }
    if let Some(ab) = &a.ablation {
        cfg.set("model.ablation", ab)?;
    }
    if let Some(e) = a.epochs {
        cfg.set("train.epochs", &e.to_string())?;
    }
    let LoadedData { windows, .. } = cfg.load_partitions()?;
    if windows.train.is_empty() {
        return Err(Error::Validation("the training partition has no windows".into()).into());
    }
    log::info!(
        "windows: {} train, {} val, {} test",
        windows.train.len(),
        windows.val.len(),
        windows.test.len()
    );

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    fs::write(a.out.join("config.effective.txt"), cfg.to_text())?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.dump_path = Some(a.out.join("nonfinite_dump.txt"));

    let mut log_text = format!("{}\n", EpochRecord::CSV_HEADER);
    let mut trainer = match &resumed {
        Some(ckpt) => {
            if ckpt.model != cfg.model {
                return Err(Error::Config("the model settings differ from the resumed checkpoint".into()).into());
            }
            // keep the rows the checkpoint already covers
            if let Ok(old) = fs::read_to_string(a.out.join("epochs.csv")) {
                for line in old.lines().skip(1) {
                    let epoch: Option<usize> = line.split(',').next().and_then(|e| e.parse().ok());
                    if epoch.is_some_and(|e| e <= ckpt.epoch) {
                        log_text.push_str(line);
                        log_text.push('\n');
                    }
                }
            }
            Trainer::resume(ckpt, train_cfg)?
        }
        None => Trainer::new(Sgnet::new(cfg.model.clone(), cfg.train.seed)?, train_cfg)?,
    };
    let extra = cfg.recorded_pairs();
    let log_path = a.out.join("epochs.csv");
    fs::write(&log_path, &log_text)?;

    let out = a.out.clone();
    trainer.fit(&windows.train, &windows.val, |rec, t| {
        log_text.push_str(&rec.csv_row(a.fixed_clock));
        log_text.push('\n');
        fs::write(&log_path, &log_text)?;
        let mut ckpt = t.checkpoint();
        ckpt.extra = extra.clone();
        ckpt.save(&out.join("last.ckpt"))?;
        if rec.val_loss.unwrap_or(rec.train_loss) == ckpt.best_val {
            ckpt.save(&out.join("best.ckpt"))?;
        }
        Ok(())
    })?;
    Ok(ExitCode::SUCCESS)
}

/// Checkpoint, config rebuilt from it, and the selected windows.
fn prepare(a: &DataArgs) -> anyhow::Result<(Checkpoint, RunConfig, Vec<Window>, Option<f64>)> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let mut cfg = RunConfig::from_checkpoint(&ckpt)?;
    if !a.data.is_empty() {
        let joined: Vec<String> = a.data.iter().map(|p| p.display().to_string()).collect();
        cfg.set("data.paths", &joined.join(","))?;
    }
    for o in &a.overrides {
        if o.trim_start().starts_with("model.") {
            return Err(Error::Config(format!("'{}': model settings come from the checkpoint", o)).into());
        }
    }
    cfg.apply_overrides(&a.overrides)?;
    let loaded = cfg.load_partitions().context("checkpoint and data disagree")?;
    let p = loaded.windows;
    let windows = match a.partition {
        Partition::Train => p.train,
        Partition::Val => p.val,
        Partition::Test => p.test,
        Partition::All => p.train.into_iter().chain(p.val).chain(p.test).collect(),
    };
    Ok((ckpt, cfg, windows, loaded.step_secs))
}

/// Parses step counts or `s`-suffixed seconds.
fn parse_horizons(items: &[String], step_secs: Option<f64>) -> anyhow::Result<Vec<usize>> {
    items
        .iter()
        .map(|h| {
            let h = h.trim();
            let steps = match h.strip_suffix('s') {
                Some(secs) => {
                    let secs: f64 = secs
                        .parse()
                        .map_err(|_| Error::Config(format!("--horizons: bad duration '{}'", h)))?;
                    let dt = step_secs.ok_or_else(|| anyhow!("no tracks to infer the step duration from"))?;
                    (secs / dt).round() as usize
                }
                None => h
                    .parse()
                    .map_err(|_| Error::Config(format!("--horizons: expected steps or seconds, got '{}'", h)))?,
            };
            if steps == 0 {
                bail!(Error::Config(format!("--horizons: '{}' is shorter than one step", h)));
            }
            Ok(steps)
        })
        .collect()
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<ExitCode> {
    let (ckpt, _, windows, step_secs) = prepare(&a.data)?;
    let horizons = parse_horizons(&a.horizons, step_secs)?;
    let model = ckpt.to_model()?;
    let opts = EvalOptions {
        k: a.data.k,
        horizons,
        seed: a.data.seed,
        ..EvalOptions::default()
    };
    let report = evaluate(&model, &windows, &opts)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    fs::write(a.out.join("metrics.csv"), report.to_csv())?;
    fs::write(a.out.join("metrics.json"), report.to_json())?;
    print!("{}", report.to_csv());
    Ok(ExitCode::SUCCESS)
}

fn cmd_predict(a: PredictArgs) -> anyhow::Result<ExitCode> {
    let (ckpt, cfg, windows, _) = prepare(&a.data)?;
    if windows.is_empty() {
        return Err(Error::Validation("no windows to predict".into()).into());
    }
    let model = ckpt.to_model()?;
    let opts = EvalOptions {
        k: a.data.k,
        seed: a.data.seed,
        ..EvalOptions::default()
    };
    let preds = predict_windows(&model, &windows, &opts)?;
    let coords: &[&str] = if cfg.model.output_dim == 4 { &["x", "y", "x2", "y2"] } else { &["x", "y"] };
    let mut text = format!("scene,agent,window_start,proposal,step,{}\n", coords.join(","));
    for (w, props) in windows.iter().zip(&preds) {
        for (k, traj) in props.iter().enumerate() {
            for (s, row) in traj.iter().enumerate() {
                write!(text, "{},{},{},{},{}", w.scene, w.agent, w.start_frame, k, s + 1)?;
                for v in row {
                    write!(text, ",{}", v)?;
                }
                text.push('\n');
            }
        }
    }
    fs::write(&a.out, text).with_context(|| format!("writing {}", a.out.display()))?;
    log::info!("wrote {} windows of predictions to {}", windows.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(a: GradcheckArgs) -> anyhow::Result<ExitCode> {
    let cfg = ModelConfig {
        sge: a.sge.parse::<SgeVariant>()?,
        mode: a.mode.parse::<Mode>()?,
        ablation: Ablation::ED,
        ..match a.size {
            Size::Tiny => ModelConfig::tiny(),
        }
    };
    let fault = a.inject_fault.map(|f| match f {
        FaultArg::TanhSlope => Fault::TanhSlope,
    });
    let started = std::time::Instant::now();
    let check = check_model(&cfg, a.seed, a.probes, fault)?;
    let width = check.blocks.iter().map(|b| b.name.len()).max().unwrap_or(0);
    for b in &check.blocks {
        println!("{:<width$}  probes {:>3}  worst {:.3e}", b.name, b.probes, b.worst, width = width);
    }
    let verdict = if check.passed() { "PASS" } else { "FAIL" };
    println!(
        "{}: {} probes ({} redrawn at kinks), worst relative error {:.3e} (tolerance {:.0e}), {:.1} s",
        verdict,
        check.probes(),
        check.redrawn,
        check.worst(),
        check.tolerance,
        started.elapsed().as_secs_f64()
    );
    Ok(if check.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
