//! `eauc` command-line interface.
//!
//! Settings come from an optional TOML config; `EAUC_OUTPUT_DIR` replaces
//! `output_dir`, and flags (including `--set section.key=value`) override
//! both. Exit codes: 0 success, 1 user error, 2 internal error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use eauc_core::harness::config::string_override;
use eauc_core::harness::run;
use eauc_core::harness::ExperimentConfig;
use eauc_core::Error;

const OUTPUT_DIR_ENV: &str = "EAUC_OUTPUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "eauc", version, about = "Error-aligned uncertainty calibration experiments")]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic scene set.
    GenerateData {
        #[command(flatten)]
        common: Common,
        /// Destination file (default: <output_dir>/scenes.csv).
        #[arg(long)]
        out: Option<PathBuf>,
        /// synth.scenes
        #[arg(long)]
        scenes: Option<usize>,
        /// synth.shifted_scenes
        #[arg(long)]
        shifted_scenes: Option<usize>,
    },
    /// Train one model per ensemble member.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Train without calibration briefly and suggest thresholds.
    WarmupScan {
        #[command(flatten)]
        common: Common,
        /// scan.warmup_epochs
        #[arg(long)]
        warmup_epochs: Option<usize>,
    },
    /// Rank calibration settings by validation R-AUC.
    GridSearch {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate checkpoints on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate; repeat for an ensemble (default: the
        /// members written by `train` in the output directory).
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
    },
    /// Recompute retention curves and metrics from a records file.
    RetentionReport {
        /// Records file written by `evaluate`.
        #[arg(long)]
        records: PathBuf,
        /// Directory for the curves and summary (default: $EAUC_OUTPUT_DIR or
        /// the records file's directory).
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set optim.learning_rate=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// output_dir
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// task (trajectory | regression)
    #[arg(long)]
    task: Option<String>,
    /// seed
    #[arg(long)]
    seed: Option<u64>,
    /// optim.epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// optim.learning_rate
    #[arg(long)]
    learning_rate: Option<f64>,
    /// eauc.beta
    #[arg(long)]
    beta: Option<f64>,
    /// eauc.gamma
    #[arg(long)]
    gamma: Option<f64>,
    /// eauc.ade_th
    #[arg(long)]
    ade_th: Option<f64>,
    /// eauc.c_th
    #[arg(long)]
    c_th: Option<f64>,
    /// inference.ensemble_size
    #[arg(long)]
    ensemble_size: Option<usize>,
    /// data.scenes_file
    #[arg(long)]
    scenes_file: Option<PathBuf>,
    /// data.table_file
    #[arg(long)]
    table_file: Option<PathBuf>,
}

impl Common {
    fn overrides(&self) -> Vec<String> {
        let mut o = Vec::new();
        if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
            o.push(string_override("output_dir", &dir));
        }
        let path = |key: &str, v: &Option<PathBuf>| v.as_ref().map(|p| string_override(key, &p.to_string_lossy()));
        o.extend(path("output_dir", &self.output_dir));
        o.extend(self.task.as_ref().map(|t| string_override("task", t)));
        o.extend(self.seed.map(|v| format!("seed={v}")));
        o.extend(self.epochs.map(|v| format!("optim.epochs={v}")));
        o.extend(self.learning_rate.map(|v| format!("optim.learning_rate={v:?}")));
        o.extend(self.beta.map(|v| format!("eauc.beta={v:?}")));
        o.extend(self.gamma.map(|v| format!("eauc.gamma={v:?}")));
        o.extend(self.ade_th.map(|v| format!("eauc.ade_th={v:?}")));
        o.extend(self.c_th.map(|v| format!("eauc.c_th={v:?}")));
        o.extend(self.ensemble_size.map(|v| format!("inference.ensemble_size={v}")));
        o.extend(path("data.scenes_file", &self.scenes_file));
        o.extend(path("data.table_file", &self.table_file));
        o.extend(self.set.iter().cloned());
        o
    }

    fn load(&self, extra: &[String]) -> Result<ExperimentConfig, Error> {
        let mut overrides = self.overrides();
        overrides.extend_from_slice(extra);
        match &self.config {
            Some(path) => ExperimentConfig::load(path, &overrides),
            None => ExperimentConfig::from_overrides(&overrides),
        }
    }
}

/// Prints to stdout, ignoring a closed pipe.
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

fn print_json<T: serde::Serialize>(value: &T) {
    match serde_json::to_string_pretty(value) {
        Ok(s) => out!("{s}"),
        Err(e) => log::warn!("could not print summary: {e}"),
    }
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenerateData {
            common,
            out,
            scenes,
            shifted_scenes,
        } => {
            let mut extra = Vec::new();
            extra.extend(scenes.map(|v| format!("synth.scenes={v}")));
            extra.extend(shifted_scenes.map(|v| format!("synth.shifted_scenes={v}")));
            let cfg = common.load(&extra)?;
            let path = run::generate_data(&cfg, out.as_deref())?;
            out!("wrote {}", path.display());
        }
        Command::Train { common } => {
            let cfg = common.load(&[])?;
            let logs = run::train(&cfg)?;
            for (k, log) in logs.iter().enumerate() {
                let last = log.epochs.last().expect("at least one epoch");
                out!(
                    "member {k}: {} epochs, final primary loss {:.6}, best epoch {}, checkpoint {}",
                    log.epochs.len(),
                    last.primary,
                    log.best_epoch,
                    run::final_checkpoint(&cfg.output_dir, k).display()
                );
            }
        }
        Command::WarmupScan { common, warmup_epochs } => {
            let extra: Vec<String> = warmup_epochs.map(|v| format!("scan.warmup_epochs={v}")).into_iter().collect();
            let cfg = common.load(&extra)?;
            let scan = run::warmup_scan(&cfg)?;
            print_json(&scan.suggestion);
        }
        Command::GridSearch { common } => {
            let cfg = common.load(&[])?;
            let rows = run::grid(&cfg)?;
            out!("{}", run::grid_to_text(cfg.task, &rows).trim_end());
        }
        Command::Evaluate { common, checkpoints } => {
            let cfg = common.load(&[])?;
            let out = run::evaluate(&cfg, &checkpoints)?;
            print_json(&out);
        }
        Command::RetentionReport { records, output_dir } => {
            let dir = output_dir
                .or_else(|| std::env::var(OUTPUT_DIR_ENV).ok().map(PathBuf::from))
                .unwrap_or_else(|| records.parent().map_or_else(PathBuf::new, Path::to_path_buf));
            let report = run::retention(&records, &dir)?;
            print_json(&report);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match std::panic::catch_unwind(|| execute(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
        Err(_) => {
            eprintln!("error: internal failure");
            ExitCode::from(2)
        }
    }
}
