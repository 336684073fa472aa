//! `icf`: validate datasets, run and resume collaboration runs, re-emit
//! reports, and run an offline demo.
//!
//! Exit status: 0 success, 1 validation or configuration error, 2 I/O error,
//! 3 engine error (including interruption).

mod config;
mod demo;

use std::io::IsTerminal;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use icf_core::collab::{EngineError, Progress};
use icf_core::dataset::{self, DatasetError};
use icf_core::run::{self, ExecOptions, RunError, RunSummary};
use icf_core::store::{RunDir, StoreError};

use config::{Overrides, RunConfigFile};

/// Like `println!`, but a closed stdout (e.g. piped into `head`) is not fatal.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

#[derive(Parser)]
#[command(
    name = "icf",
    version,
    about = "Iterative consensus among LLM participants on multiple-choice questions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a dataset file and print per-question diagnostics.
    Validate { dataset: PathBuf },
    /// Start a run from a TOML config.
    Run {
        config: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        max_rounds: Option<u32>,
        #[arg(long)]
        n: Option<u32>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        parallelism: Option<usize>,
        /// Directory under which the run directory is created.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Continue an interrupted run; a finished run just re-emits its reports.
    Resume {
        dir: PathBuf,
        #[arg(long, default_value_t = 4)]
        parallelism: usize,
    },
    /// Re-emit reports from a run's event log.
    Report { dir: PathBuf },
    /// Write and run a three-agent scripted demo; no network needed.
    MockDemo {
        #[arg(long, default_value = "icf-demo")]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

/// An error with its exit status.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }

    fn io(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        let code = match &e {
            RunError::Config(_) | RunError::Dataset { .. } | RunError::Prompt(_) | RunError::AlreadyExists(_) => 1,
            RunError::Store(StoreError::DigestMismatch { .. }) => 1,
            RunError::Io { .. } | RunError::Store(_) => 2,
            RunError::Engine(EngineError::Store(StoreError::Io { .. })) => 2,
            RunError::Engine(_) | RunError::Report(_) => 3,
        };
        let mut message = e.to_string();
        if matches!(e, RunError::Engine(EngineError::Cancelled)) {
            message.push_str("; the log ends at a record boundary and can be resumed");
        }
        Failure { code, message }
    }
}

struct Style {
    color: bool,
}

impl Style {
    fn detect() -> Self {
        Style {
            color: std::env::var_os("NO_COLOR").is_none() && std::io::stderr().is_terminal(),
        }
    }

    fn paint(&self, code: &str, text: &str) -> String {
        if self.color {
            format!("\x1b[{code}m{text}\x1b[0m")
        } else {
            text.to_string()
        }
    }
}

fn progress_hook(style: Arc<Style>) -> icf_core::collab::ProgressHook {
    Arc::new(move |p: &Progress| match p {
        Progress::RoundStarted { round: 0, questions } => {
            eprintln!(
                "{} initial self-consistency on {questions} questions",
                style.paint("1", "round 0:")
            );
        }
        Progress::RoundStarted { round, questions } => {
            eprintln!(
                "{} reviewing {questions} disagreed questions",
                style.paint("1", &format!("round {round}:"))
            );
        }
        Progress::Partitioned(part) => {
            eprintln!(
                "{} consensus {:.2}% ({} disagreed)",
                style.paint("1", &format!("round {}:", part.round)),
                part.consensus_rate,
                part.disagreed_ids.len()
            );
        }
        Progress::Skipped {
            round,
            question_id,
            reason,
        } => {
            eprintln!(
                "{} {question_id} skipped in round {round}: {reason}",
                style.paint("33", "warning:")
            );
        }
        Progress::UnitFinished { .. } => {}
    })
}

fn cancel_on_ctrl_c() -> Arc<AtomicBool> {
    let flag = Arc::new(AtomicBool::new(false));
    let set = flag.clone();
    tokio::spawn(async move {
        if tokio::signal::ctrl_c().await.is_ok() {
            eprintln!("interrupt received; finishing in-flight work");
            set.store(true, Ordering::SeqCst);
        }
    });
    flag
}

fn exec_options(parallelism: usize, style: &Arc<Style>) -> ExecOptions {
    ExecOptions {
        parallelism,
        cancel: Some(cancel_on_ctrl_c()),
        progress: Some(progress_hook(style.clone())),
        ..ExecOptions::default()
    }
}

fn print_summary(summary: &RunSummary) {
    let reports = summary.dir.join("reports");
    if let Ok(text) = std::fs::read_to_string(reports.join("summary.txt")) {
        say!("{text}");
    }
    say!("run directory: {}", summary.dir.display());
}

fn cmd_validate(path: &Path) -> Result<(), Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    match dataset::load_question_set(&text) {
        Ok(qs) => {
            let media = qs.questions.iter().filter(|q| q.has_media).count();
            if media > 0 {
                say!("{} questions OK ({media} with media, excluded from runs)", qs.len());
            } else {
                say!("{} questions OK", qs.len());
            }
            Ok(())
        }
        Err(DatasetError::Invalid(diagnostics)) => {
            for d in &diagnostics {
                say!("{d}");
            }
            Err(Failure::config(format!(
                "{}: {} invalid question record(s)",
                path.display(),
                diagnostics.len()
            )))
        }
        Err(e) => Err(Failure::config(format!("{}: {e}", path.display()))),
    }
}

async fn cmd_run(
    config_path: &Path,
    overrides: Overrides,
    out: Option<PathBuf>,
    style: Arc<Style>,
) -> Result<(), Failure> {
    let mut cfg = RunConfigFile::load(config_path).map_err(Failure::config)?;
    cfg.apply(overrides);
    cfg.validate().map_err(Failure::config)?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    let spec = cfg.to_spec(base);
    let out_root = out.unwrap_or_else(|| base.join(&cfg.out));
    let dir = run::create_run(&spec, &out_root)?;
    eprintln!("run directory: {}", dir.root.display());
    let summary = run::execute(&dir, exec_options(cfg.parallelism, &style)).await?;
    print_summary(&summary);
    Ok(())
}

async fn cmd_resume(dir: &Path, parallelism: usize, style: Arc<Style>) -> Result<(), Failure> {
    let summary = run::execute(&RunDir::new(dir), exec_options(parallelism, &style)).await?;
    print_summary(&summary);
    Ok(())
}

fn cmd_report(dir: &Path) -> Result<(), Failure> {
    let run_dir = RunDir::new(dir);
    run::report(&run_dir)?;
    let text =
        std::fs::read_to_string(run_dir.reports_dir().join("summary.txt")).map_err(|e| Failure::io(e.to_string()))?;
    say!("{text}");
    Ok(())
}

async fn cmd_mock_demo(out: &Path, seed: u64, style: Arc<Style>) -> Result<(), Failure> {
    let config_path = demo::write_files(out, seed).map_err(|e| Failure::io(format!("{}: {e}", out.display())))?;
    let cfg = RunConfigFile::load(&config_path).map_err(Failure::config)?;
    let spec = cfg.to_spec(out);
    let dir = match run::create_run(&spec, &out.join(&cfg.out)) {
        Ok(dir) => dir,
        // same demo already ran here: resuming is a no-op that re-emits reports
        Err(RunError::AlreadyExists(root)) => RunDir::new(root),
        Err(e) => return Err(e.into()),
    };
    eprintln!("demo files in {}", out.display());
    let summary = run::execute(&dir, exec_options(cfg.parallelism, &style)).await?;
    print_summary(&summary);
    Ok(())
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = Cli::parse();
    let style = Arc::new(Style::detect());
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_ansi(style.color)
        .with_writer(std::io::stderr)
        .init();

    let result = match cli.command {
        Command::Validate { dataset } => cmd_validate(&dataset),
        Command::Run {
            config,
            threshold,
            max_rounds,
            n,
            seed,
            parallelism,
            out,
        } => {
            let overrides = Overrides {
                threshold,
                max_rounds,
                n,
                seed,
                parallelism,
            };
            cmd_run(&config, overrides, out, style.clone()).await
        }
        Command::Resume { dir, parallelism } => cmd_resume(&dir, parallelism, style.clone()).await,
        Command::Report { dir } => cmd_report(&dir),
        Command::MockDemo { out, seed } => cmd_mock_demo(&out, seed, style.clone()).await,
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{} {}", style.paint("31", "error:"), f.message);
            ExitCode::from(f.code)
        }
    }
}
