//! Command-line front end.

use std::collections::HashSet;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};

use crate::run::{run, Command, RunOptions, RunOutcome, Table};
use crate::scenario::{load_scenario, Overrides, ScenarioError};
use crate::templates::{generate, to_json, Template};

/// Exit code for unreadable, malformed or inconsistent input.
pub const EXIT_INPUT: u8 = 4;
/// Exit code when a run was refused because of an invalid initialization.
pub const EXIT_REFUSED: u8 = 3;
/// Exit code when a run finished without meeting its thresholds.
pub const EXIT_NOT_CONVERGED: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "formest", version, about = "Distributed orientation estimation and formation control")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Debug, Subcommand)]
pub enum CliCommand {
    /// Run the orientation estimator alone.
    Estimate(RunArgs),
    /// Drive agents into the desired formation using estimated orientations.
    Formation(RunArgs),
    /// Estimate positions up to a common rotation and translation.
    Localize(RunArgs),
    /// Synchronize oscillators on the circle.
    Circle {
        #[command(flatten)]
        run: RunArgs,
        /// Add uniform noise in [-AMP, AMP] to every initial angle.
        #[arg(long, value_name = "AMP")]
        perturb: Option<f64>,
    },
    /// Write a scenario file from a named template.
    Gen {
        /// fig3, chain or all2all-circle20
        template: Template,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Scenario file; repeat to run several.
    #[arg(long, required = true)]
    pub scenario: Vec<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub horizon: Option<f64>,
    /// Replaces every seed in the scenario file.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub record_every: Option<usize>,
    /// Run even if the estimator initialization is invalid.
    #[arg(long)]
    pub force: bool,
    /// Scenarios run in parallel.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    ExitCode::from(execute(cli))
}

/// Runs a parsed command line and returns the exit code.
pub fn execute(cli: Cli) -> u8 {
    match cli.command {
        CliCommand::Estimate(args) => {
            run_all(Command::Estimate, &args, RunOptions { force: args.force, perturb: None })
        }
        CliCommand::Formation(args) => {
            run_all(Command::Formation, &args, RunOptions { force: args.force, perturb: None })
        }
        CliCommand::Localize(args) => {
            run_all(Command::Localize, &args, RunOptions { force: args.force, perturb: None })
        }
        CliCommand::Circle { run, perturb } => run_all(Command::Circle, &run, RunOptions { force: run.force, perturb }),
        CliCommand::Gen { template, seed, out } => {
            let text = to_json(&generate(template, seed));
            let written = match out {
                Some(path) => fs::write(&path, text).map_err(|e| format!("{}: {e}", path.display())),
                None => io::stdout().write_all(text.as_bytes()).map_err(|e| e.to_string()),
            };
            match written {
                Ok(()) => 0,
                Err(e) => {
                    eprintln!("error: {e}");
                    EXIT_INPUT
                }
            }
        }
    }
}

/// Output directories: `out` itself for one scenario, `out/<stem>` for
/// several (suffixed when stems collide).
fn output_dirs(out: &Path, scenarios: &[PathBuf]) -> Vec<PathBuf> {
    if scenarios.len() == 1 {
        return vec![out.to_owned()];
    }
    let mut seen = HashSet::new();
    scenarios
        .iter()
        .map(|p| {
            let stem = p.file_stem().map_or_else(|| "scenario".into(), |s| s.to_string_lossy().into_owned());
            let mut name = stem.clone();
            let mut k = 2;
            while !seen.insert(name.clone()) {
                name = format!("{stem}-{k}");
                k += 1;
            }
            out.join(name)
        })
        .collect()
}

enum Finished {
    Done(Box<RunOutcome>),
    Input(ScenarioError),
}

fn run_one(command: Command, path: &Path, overrides: &Overrides, options: &RunOptions) -> Finished {
    let outcome = load_scenario(path, overrides).and_then(|s| run(command, &s, options));
    match outcome {
        Ok(o) => Finished::Done(Box::new(o)),
        Err(e) => Finished::Input(e),
    }
}

fn run_all(command: Command, args: &RunArgs, options: RunOptions) -> u8 {
    let overrides = Overrides { dt: args.dt, horizon: args.horizon, seed: args.seed, record_every: args.record_every };
    let n = args.scenario.len();
    let results: Vec<Mutex<Option<Finished>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..args.jobs.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                if k >= n {
                    break;
                }
                let done = run_one(command, &args.scenario[k], &overrides, &options);
                *results[k].lock().expect("no worker panics while holding the lock") = Some(done);
            });
        }
    });

    let dirs = output_dirs(&args.out, &args.scenario);
    let mut code = 0u8;
    let mut reports = Vec::new();
    for (slot, dir) in results.into_iter().zip(&dirs) {
        match slot.into_inner().expect("workers finished").expect("every scenario ran") {
            Finished::Input(e) => {
                eprintln!("error: {e}");
                code = code.max(EXIT_INPUT);
            }
            Finished::Done(outcome) => {
                let json = outcome.report.to_json();
                if let Err(e) = write_outputs(dir, command, &outcome.table, &json) {
                    eprintln!("error: {}: {e}", dir.display());
                    code = code.max(EXIT_INPUT);
                }
                eprintln!("{}", outcome.report.summary());
                code = code.max(outcome.report.verdict.exit_code());
                reports.push(json);
            }
        }
    }
    let doc = if n == 1 { reports.pop() } else { Some(serde_json::Value::Array(reports)) };
    if let Some(doc) = doc {
        println!("{}", serde_json::to_string_pretty(&doc).expect("reports always serialize"));
    }
    code
}

fn write_outputs(dir: &Path, command: Command, table: &Option<Table>, report: &serde_json::Value) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    if let Some(t) = table {
        write_csv(&dir.join(format!("{}.csv", command.name())), t)?;
    }
    let mut text = serde_json::to_string_pretty(report).expect("reports always serialize");
    text.push('\n');
    fs::write(dir.join("report.json"), text)
}

pub fn write_csv(path: &Path, table: &Table) -> io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&table.header)?;
    for row in &table.rows {
        w.write_record(row)?;
    }
    w.flush()
}
