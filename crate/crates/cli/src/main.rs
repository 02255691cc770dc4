//! Command-line interface: synthesize data, train, evaluate, predict,
//! ensemble, and run the gradient-check suite.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation failure,
//! 3 numeric failure.

use clap::{Args, Parser, Subcommand};
use qfe_core::answer::TaskMode;
use qfe_core::checkpoint::Checkpoint;
use qfe_core::config::Config;
use qfe_core::data;
use qfe_core::error::QfeError;
use qfe_core::synth::{generate_synthetic, SyntheticSpec};
use qfe_core::train;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "qfe", about = "Joint answer selection and sequential evidence extraction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-hop dataset (JSON Lines).
    Synth(SynthArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset and print the metric report.
    Eval(EvalArgs),
    /// Write per-sample predictions with extraction traces.
    Predict(PredictArgs),
    /// Combine several checkpoints: union of evidence, majority label.
    Ensemble(EnsembleArgs),
    /// Run the finite-difference gradient-check suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output JSONL path.
    #[arg(long)]
    out: PathBuf,
    /// Generator spec JSON (overrides the defaults).
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    num: usize,
    #[arg(long, value_enum, default_value = "rc")]
    mode: ModeArg,
    /// Equalize answer-type class counts by duplication before writing.
    #[arg(long)]
    balance: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Config JSON; missing fields take desk-scale defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training data (JSONL).
    #[arg(long)]
    data: PathBuf,
    /// Dev data for per-epoch metrics and best-checkpoint selection.
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch log output (JSON).
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    beam: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Write the full JSON report here (the text table always prints).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    beam: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    beam: Option<usize>,
}

#[derive(Args)]
struct EnsembleArgs {
    /// Member checkpoints (repeat the flag).
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Screened random instances per component.
    #[arg(long, default_value_t = 3)]
    instances: usize,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ModeArg {
    Rc,
    Rte,
}

impl From<ModeArg> for TaskMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Rc => TaskMode::Rc,
            ModeArg::Rte => TaskMode::Rte,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap's help/version output is a clean exit.
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e.downcast_ref::<QfeError>() {
                Some(QfeError::Numeric(_)) => ExitCode::from(3),
                Some(_) => ExitCode::from(2),
                None => ExitCode::from(2),
            }
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Synth(args) => {
            let mut spec = match &args.spec {
                Some(path) => serde_json::from_str::<SyntheticSpec>(&std::fs::read_to_string(path)?)?,
                None => SyntheticSpec::default(),
            };
            if args.spec.is_none() {
                spec.seed = args.seed;
                spec.num_samples = args.num;
                spec.mode = args.mode.into();
            }
            let mut samples = generate_synthetic(&spec)?;
            if args.balance {
                samples = data::balance_classes(&samples, spec.seed)?;
            }
            data::save(&args.out, &samples)?;
            println!("wrote {} samples to {}", samples.len(), args.out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Train(args) => {
            let mut cfg = match &args.config {
                Some(p) => Config::from_file(p)?,
                None => Config::desk(),
            };
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            if let Some(mode) = args.mode {
                cfg.mode = mode.into();
            }
            if let Some(beam) = args.beam {
                cfg.beam_size = beam;
            }
            cfg.validate()?;
            let train_data = data::load(&args.data, cfg.mode)?;
            let dev_data = match &args.dev {
                Some(p) => data::load(p, cfg.mode)?,
                None => Vec::new(),
            };
            let trained = train::train(&cfg, &train_data, &dev_data, false)?;
            let cp = Checkpoint::from_model(
                &trained.model,
                &trained.vocab,
                &trained.chars,
                trained.best_epoch as u32,
                Some(&trained.adam),
            );
            cp.save(&args.out)?;
            if let Some(log_path) = &args.log {
                std::fs::write(log_path, serde_json::to_string_pretty(&trained.log)?)?;
            }
            println!("saved checkpoint (best epoch {}) to {}", trained.best_epoch, args.out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval(args) => {
            let cp = Checkpoint::load(&args.checkpoint)?;
            let (mut model, vocab, chars, _) = cp.restore()?;
            if let Some(beam) = args.beam {
                model.cfg.beam_size = beam;
            }
            let samples = data::load(&args.data, model.cfg.mode)?;
            let (report, _, _) = train::evaluate(&model, &vocab, &chars, &samples)?;
            print!("{}", report.render_text());
            if let Some(out) = &args.out {
                std::fs::write(out, serde_json::to_string_pretty(&report)?)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Predict(args) => {
            let cp = Checkpoint::load(&args.checkpoint)?;
            let (mut model, vocab, chars, _) = cp.restore()?;
            if let Some(beam) = args.beam {
                model.cfg.beam_size = beam;
            }
            let samples = data::load(&args.data, model.cfg.mode)?;
            let (_, _, preds) = train::evaluate(&model, &vocab, &chars, &samples)?;
            train::write_predictions(&args.out, &preds)?;
            println!("wrote {} predictions to {}", preds.len(), args.out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Ensemble(args) => {
            let checkpoints: Vec<Checkpoint> = args
                .checkpoints
                .iter()
                .map(Checkpoint::load)
                .collect::<Result<_, _>>()?;
            let mode = checkpoints[0].config.mode;
            let samples = data::load(&args.data, mode)?;
            let (_, merged) = train::ensemble_from_checkpoints(&checkpoints, &samples)?;
            train::write_predictions(&args.out, &merged)?;
            println!(
                "wrote {} ensembled predictions ({} members) to {}",
                merged.len(),
                checkpoints.len(),
                args.out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck(args) => {
            let report = train::gradcheck_suite(args.instances)?;
            println!("gradient check (h = 1e-5, threshold {:.0e}):", report.threshold);
            for c in &report.components {
                println!(
                    "  {:<14} max rel error {:10.3e} over {} instances  [{}]",
                    c.name,
                    c.max_rel_error,
                    c.instances,
                    if c.max_rel_error < report.threshold { "ok" } else { "FAIL" }
                );
            }
            println!("checked parameters ({}):", report.parameters.len());
            for name in &report.parameters {
                println!("  {name}");
            }
            if report.pass {
                println!("gradcheck: pass");
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("gradcheck: FAIL");
                Ok(ExitCode::from(3))
            }
        }
    }
}
