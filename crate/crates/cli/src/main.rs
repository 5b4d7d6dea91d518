use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use miaudit_core::harness::{
    axis_label, emit_report, load_report, run_experiment, sweep, write_models, write_sweep_csv,
    write_timings, Experiment, ExperimentConfig, Stage, StageError,
};
use miaudit_core::Error;
use serde_json::Value;

#[derive(Parser)]
#[command(
    name = "mi-audit",
    version,
    about = "Membership-inference audits of small classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its report, metrics and models.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run one experiment per value of a config field.
    Sweep {
        template: PathBuf,
        /// Dotted path into the config, e.g. `split.size` or `attacks.2.spec.d`.
        #[arg(long)]
        axis: String,
        /// Comma-separated values, or a JSON array.
        #[arg(long, allow_hyphen_values = true)]
        values: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Recompute metrics from a report's per-point records and check them.
    Score {
        report: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn fail(stage: Stage, error: Error) -> StageError {
    StageError {
        stage,
        context: String::new(),
        error,
    }
}

fn parse_values(raw: &str) -> Result<Vec<Value>, StageError> {
    let raw = raw.trim();
    if raw.starts_with('[') {
        return match serde_json::from_str(raw) {
            Ok(Value::Array(v)) => Ok(v),
            Ok(_) => unreachable!("leading bracket parses as an array or fails"),
            Err(e) => Err(fail(Stage::Config, Error::Config(format!("--values: {e}")))),
        };
    }
    Ok(raw
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| serde_json::from_str(s).unwrap_or_else(|_| Value::String(s.into())))
        .collect())
}

fn write_outputs(exp: &Experiment, out: &Path) -> Result<(), StageError> {
    emit_report(&exp.report, out).map_err(|e| fail(Stage::Emit, e))?;
    write_timings(&exp.timings, out).map_err(|e| fail(Stage::Emit, e))?;
    write_models(exp, out).map_err(|e| fail(Stage::Emit, e))
}

fn print_summary(exp: &Experiment) {
    let r = &exp.report;
    println!(
        "{}: acc_train {:.4} acc_test {:.4}",
        r.name, r.metrics.acc_train, r.metrics.acc_test
    );
    for m in &r.metrics.attacks {
        println!(
            "  {:<24} accuracy {:.4}  precision {:.4}  recall {:.4}  f1 {:.4}  queries {}",
            m.attack, m.metrics.accuracy, m.metrics.precision, m.metrics.recall, m.metrics.f1, m.queries
        );
    }
    for w in &r.warnings {
        eprintln!("warning: {w}");
    }
}

fn run(config: &Path, seed: Option<u64>, out: &Path) -> Result<(), StageError> {
    let mut cfg = ExperimentConfig::load(config).map_err(|e| fail(Stage::Config, e))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let exp = run_experiment(&cfg)?;
    write_outputs(&exp, out)?;
    print_summary(&exp);
    Ok(())
}

fn run_sweep(
    template: &Path,
    axis: &str,
    values: &str,
    seed: Option<u64>,
    out: &Path,
) -> Result<(), StageError> {
    let text = std::fs::read_to_string(template).map_err(|e| fail(Stage::Config, Error::io(template, e)))?;
    let mut tpl: Value = serde_json::from_str(&text).map_err(|e| fail(Stage::Config, Error::Serde(e)))?;
    if let Some(s) = seed {
        tpl["seed"] = Value::from(s);
    }
    let values = parse_values(values)?;
    let base = template.parent().unwrap_or(Path::new("."));
    let outcome = sweep(&tpl, base, axis, &values);
    let mut failed = 0;
    for run in &outcome.runs {
        let label = axis_label(&run.value);
        match &run.outcome {
            Ok(exp) => {
                write_outputs(exp, &out.join(format!("{axis}={label}")))?;
                println!("{axis}={label}");
                print_summary(exp);
            }
            Err(e) => {
                failed += 1;
                eprintln!("{axis}={label} failed: {e}");
            }
        }
    }
    write_sweep_csv(&outcome.rows, &out.join("sweep.csv")).map_err(|e| fail(Stage::Emit, e))?;
    if failed > 0 {
        eprintln!("{failed} of {} sweep values failed", outcome.runs.len());
    }
    Ok(())
}

fn score(report: &Path, out: Option<&Path>) -> Result<(), StageError> {
    let r = load_report(report).map_err(|e| fail(Stage::Score, e))?;
    let recomputed = r.rescore().map_err(|e| fail(Stage::Score, e))?;
    for m in &recomputed.attacks {
        println!(
            "{:<24} accuracy {:.4}  precision {:.4}  recall {:.4}  f1 {:.4}",
            m.attack, m.metrics.accuracy, m.metrics.precision, m.metrics.recall, m.metrics.f1
        );
    }
    if let Some(dir) = out {
        let mut fresh = r.clone();
        fresh.metrics = recomputed.clone();
        emit_report(&fresh, dir).map_err(|e| fail(Stage::Emit, e))?;
    }
    if recomputed != r.metrics {
        return Err(fail(
            Stage::Score,
            Error::Format("stored metrics disagree with per-point records".into()),
        ));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config, seed, out } => run(config, *seed, out),
        Command::Sweep {
            template,
            axis,
            values,
            seed,
            out,
        } => run_sweep(template, axis, values, *seed, out),
        Command::Score { report, out } => score(report, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.stage.exit_code() as u8)
        }
    }
}
