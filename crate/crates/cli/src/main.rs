// Copyright (c) The flashbft Contributors
// SPDX-License-Identifier: Apache-2.0

//! `flashsim`: runs scenario files through the simulator and writes metric CSVs.
//!
//! Exit codes: 0 on success, 1 for invalid scenarios or refused comparisons,
//! 2 for runtime failures such as unwritable output directories.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use flashbft::netsim::report::{compare, speedup_csv, Report, SpeedupRow, Summary};
use flashbft::netsim::scenario::Scenario;
use flashbft::netsim::sim::{run, SimError};
use flashbft::optimizer::Pattern;

/// Jitter sigma used by `--jitter on` when the scenario names none.
const DEFAULT_JITTER: f64 = 0.05;

#[derive(Parser)]
#[command(name = "flashsim", version, about = "Run flashbft simulations and compare their reports")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one or more scenarios and write clients.csv, consensus.csv, timeline.csv and summary.csv.
    Run {
        #[arg(required = true)]
        scenarios: Vec<PathBuf>,
        /// Output directory. Several scenarios get one subdirectory each.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Also run the conservative, egalitarian, static baseline and write speedup.csv.
        #[arg(long)]
        baseline: bool,
        /// Number of scenarios simulated concurrently.
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[command(flatten)]
        ov: Overrides,
    },
    /// Speedups of B over A. Each side is a report directory or a scenario file.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Directory for speedup.csv.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        ov: Overrides,
    },
}

#[derive(Args, Clone, Copy)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    jitter: Option<Switch>,
    #[arg(long, value_enum)]
    pattern: Option<PatternArg>,
}

#[derive(ValueEnum, Clone, Copy)]
enum Switch {
    On,
    Off,
}

#[derive(ValueEnum, Clone, Copy)]
enum PatternArg {
    Three,
    Seven,
}

enum Failure {
    Validation(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl Overrides {
    fn apply(self, sc: &mut Scenario) {
        if let Some(seed) = self.seed {
            sc.seed = seed;
        }
        match self.jitter {
            Some(Switch::On) => sc.jitter = sc.jitter.or(Some(DEFAULT_JITTER)),
            Some(Switch::Off) => sc.jitter = None,
            None => {}
        }
        match self.pattern {
            Some(PatternArg::Three) => sc.pattern = Pattern::ThreeStep,
            Some(PatternArg::Seven) => sc.pattern = Pattern::SevenStep,
            None => {}
        }
    }
}

fn load(path: &Path, ov: Overrides) -> Result<Scenario, Failure> {
    let mut sc = Scenario::load(path).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?;
    ov.apply(&mut sc);
    Ok(sc)
}

fn simulate(path: &Path, sc: &Scenario) -> Result<Report, Failure> {
    match run(sc) {
        Ok(trace) => Ok(Report::from_trace(&trace)),
        Err(e @ (SimError::Scenario(_) | SimError::Matrix(_))) => Err(Failure::Validation(format!("{}: {e}", path.display()))),
    }
}

fn write(report: &Report, dir: &Path) -> Result<(), Failure> {
    report.write(dir).with_context(|| format!("writing {}", dir.display()))?;
    Ok(())
}

fn describe(report: &Report) -> String {
    let s = &report.summary;
    let f = |k: &str| s.fields.get(k).cloned().unwrap_or_default();
    format!(
        "{}: consensus {:.2} ms (fast {} / conservative {}), final {:.2} ms, {} instances, linearizable {}",
        s.scenario,
        s.consensus_mean_ms,
        f("consensus_fast_ms"),
        f("consensus_conservative_ms"),
        s.level_mean_ms.get("final").copied().unwrap_or(f64::NAN),
        f("instances"),
        f("linearizable"),
    )
}

fn print_speedups(rows: &[SpeedupRow]) {
    println!("{:<10} {:>12} {:>12} {:>9}", "metric", "baseline_ms", "run_ms", "speedup");
    for r in rows {
        println!("{:<10} {:>12.3} {:>12.3} {:>8.3}x", r.metric, r.baseline_ms, r.run_ms, r.speedup);
    }
}

fn run_one(path: &Path, dir: &Path, baseline: bool, ov: Overrides) -> Result<Vec<String>, Failure> {
    let sc = load(path, ov)?;
    let report = simulate(path, &sc)?;
    write(&report, dir)?;
    let mut lines = vec![format!("{} -> {}", describe(&report), dir.display())];
    if baseline {
        let base = simulate(path, &sc.baseline())?;
        write(&base, &dir.join("baseline"))?;
        let rows = compare(&base.summary, &report.summary).map_err(|e| Failure::Validation(e.to_string()))?;
        std::fs::write(dir.join("speedup.csv"), speedup_csv(&rows)).with_context(|| format!("writing {}", dir.display()))?;
        lines.push(describe(&base));
        for r in rows {
            lines.push(format!("  speedup {:<9} {:.3}x", r.metric, r.speedup));
        }
    }
    Ok(lines)
}

fn cmd_run(scenarios: &[PathBuf], out: &Path, baseline: bool, batch: usize, ov: Overrides) -> Result<(), Failure> {
    let dir_for = |p: &Path| {
        if scenarios.len() == 1 {
            out.to_path_buf()
        } else {
            out.join(p.file_stem().unwrap_or_default())
        }
    };
    let jobs: Vec<(&PathBuf, PathBuf)> = scenarios.iter().map(|p| (p, dir_for(p))).collect();
    for chunk in jobs.chunks(batch.max(1)) {
        let results: Vec<Result<Vec<String>, Failure>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|(p, d)| s.spawn(move || run_one(p, d, baseline, ov))).collect();
            handles.into_iter().map(|h| h.join().expect("simulation thread panicked")).collect()
        });
        for r in results {
            for line in r? {
                println!("{line}");
            }
        }
    }
    Ok(())
}

fn summary_of(path: &Path, ov: Overrides) -> Result<Summary, Failure> {
    if path.is_dir() {
        return Summary::read(path).with_context(|| format!("reading {}", path.join("summary.csv").display())).map_err(Failure::Runtime);
    }
    let sc = load(path, ov)?;
    Ok(simulate(path, &sc)?.summary)
}

fn cmd_compare(a: &Path, b: &Path, out: Option<&Path>, ov: Overrides) -> Result<(), Failure> {
    let (sa, sb) = (summary_of(a, ov)?, summary_of(b, ov)?);
    let rows = compare(&sa, &sb).map_err(|e| Failure::Validation(format!("refusing to compare {} and {}: {e}", a.display(), b.display())))?;
    print_speedups(&rows);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).and_then(|_| std::fs::write(dir.join("speedup.csv"), speedup_csv(&rows))).with_context(|| format!("writing {}", dir.display()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Run { scenarios, out, baseline, batch, ov } => cmd_run(scenarios, out, *baseline, *batch, *ov),
        Cmd::Compare { a, b, out, ov } => cmd_compare(a, b, out.as_deref(), *ov),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
