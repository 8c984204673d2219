use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fiscal_impute::gbt::SCHEMA_VERSION;
use fiscal_impute::pipeline::{self, PipelineError, RunConfig, SchemaSource};

#[derive(Parser)]
#[command(
    name = "fiscal-impute",
    about = "Impute unreported spending amounts with boosted trees",
    disable_version_flag = true
)]
struct Cli {
    /// Print the artifact schema version and exit
    #[arg(long)]
    version: bool,
    /// JSON config file; flags override its keys
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    input: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    #[arg(long, global = true)]
    study: Option<PathBuf>,
    /// JSON schema file for the input CSV
    #[arg(long, global = true)]
    schema: Option<PathBuf>,
    #[arg(long, global = true)]
    trials: Option<usize>,
    #[arg(long, global = true)]
    folds: Option<usize>,
    #[arg(long, global = true)]
    test_fraction: Option<f64>,
    #[arg(long, global = true)]
    iqr_k: Option<f64>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Clean, filter, split and encode the input table
    Prepare,
    /// Run the hyperparameter study
    Tune,
    /// Fit the model (best study trial if a study exists)
    Train,
    /// Write fit metrics for the train and test splits
    Evaluate,
    /// Predict missing amounts with residual ranges
    Impute,
    /// Histograms and a plain-text summary
    Report,
    /// Generate a synthetic district table with ground truth
    Synth,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Prepare => "prepare",
            Command::Tune => "tune",
            Command::Train => "train",
            Command::Evaluate => "evaluate",
            Command::Impute => "impute",
            Command::Report => "report",
            Command::Synth => "synth",
        }
    }
}

fn build_config(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = &cli.input {
        cfg.input = Some(v.clone());
    }
    if let Some(v) = &cli.out {
        cfg.out = v.clone();
    }
    if let Some(v) = &cli.model {
        cfg.model = Some(v.clone());
    }
    if let Some(v) = &cli.study {
        cfg.study = Some(v.clone());
    }
    if let Some(v) = &cli.schema {
        cfg.schema = Some(SchemaSource::Path(v.clone()));
    }
    if let Some(v) = cli.trials {
        cfg.n_trials = v;
    }
    if let Some(v) = cli.folds {
        cfg.cv_folds = v;
    }
    if let Some(v) = cli.test_fraction {
        cfg.test_fraction = v;
    }
    if let Some(v) = cli.iqr_k {
        cfg.iqr_k = v;
    }
    if let Some(v) = cli.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(command: Command, cfg: &RunConfig) -> Result<(), PipelineError> {
    match command {
        Command::Synth => {
            let (table, truth) = pipeline::run_synth(cfg)?;
            eprintln!(
                "synth: {} rows, {} hidden, hidden total {}",
                table.len(),
                truth.hidden.len(),
                truth.hidden_aggregate
            );
        }
        Command::Prepare => {
            let p = pipeline::run_prepare(cfg)?;
            let s = &p.summary;
            eprintln!(
                "prepare: {} rows, {} labeled, {} outliers removed, {} train / {} test, {} to impute, {} features",
                s.n_rows,
                s.n_labeled,
                s.n_outliers_removed,
                s.n_train,
                s.n_test,
                s.n_impute,
                s.feature_names.len()
            );
        }
        Command::Tune => {
            let n = cfg.n_trials;
            let study = pipeline::run_tune_with(cfg, |t| {
                eprintln!("tune: trial {}/{n} cv_rmse {}", t.index + 1, t.value);
            })?;
            eprintln!(
                "tune: best trial {} cv_rmse {}",
                study.best_index,
                study.best().value
            );
        }
        Command::Train => {
            let model = pipeline::run_train(cfg)?;
            eprintln!(
                "train: {} trees written to {}",
                model.trees.len(),
                cfg.model_path().display()
            );
        }
        Command::Evaluate => {
            let e = pipeline::run_evaluate(cfg)?;
            if let Some(t) = &e.test {
                eprintln!("evaluate: test rmse {} r2 {:?}", t.rmse, t.r2);
            }
        }
        Command::Impute => {
            let r = pipeline::run_impute(cfg)?;
            eprintln!(
                "impute: {} records, total {} [{}, {}]",
                r.per_record.len(),
                r.aggregate_point,
                r.aggregate_low,
                r.aggregate_high
            );
        }
        Command::Report => {
            let r = pipeline::run_report(cfg)?;
            print!("{}", r.summary);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.version {
        println!(
            "fiscal-impute {} schema_version {SCHEMA_VERSION}",
            env!("CARGO_PKG_VERSION")
        );
        return ExitCode::SUCCESS;
    }
    let Some(command) = cli.command else {
        eprintln!("error: no command given (try --help)");
        return ExitCode::from(2);
    };
    let result = build_config(&cli).and_then(|cfg| run(command, &cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error in `{}`: {e}", command.name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
