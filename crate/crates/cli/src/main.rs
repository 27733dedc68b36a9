// SPDX-License-Identifier: Apache-2.0

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::Parser;
use dpti_core::bench::{self, SUITES};
use dpti_core::costmodel::CostTable;
use dpti_core::report::{self, SimReport};
use dpti_core::scenario::Scenario;
use dpti_core::tasks::sched::{ScheduleMode, DEFAULT_MAX_STEPS};
use dpti_core::Variant;

/// Runs scenario files through the simulator and prints violation and
/// benchmark reports.
///
/// Exit status: 0 when every expectation holds, 1 when one fails, 2 on a
/// usage or parse error.
#[derive(Parser, Debug)]
#[command(name = "dpti-sim", version)]
struct Args {
    /// Scenario file (JSON).
    scenario: Option<PathBuf>,

    /// Override the protection variant: stash, freeze or none.
    #[arg(long)]
    variant: Option<Variant>,

    /// Run the seeded scheduler with this seed.
    #[arg(long, conflicts_with = "exhaustive")]
    seed: Option<u64>,

    /// Run this many consecutive seeds, starting at --seed, in parallel.
    #[arg(long, default_value_t = 1, conflicts_with = "exhaustive")]
    runs: u64,

    /// Explore every interleaving.
    #[arg(long)]
    exhaustive: bool,

    /// Bound on scheduler decisions per explored run; implies --exhaustive.
    #[arg(long)]
    max_steps: Option<usize>,

    /// Run benchmark suites (getppid, strings, aliases, sgx, compute or all).
    /// With a scenario, compares it unfiltered, under the sequential
    /// baseline and under DPTI.
    #[arg(long, num_args = 0..=1, default_missing_value = "all", value_name = "SUITE")]
    bench: Option<String>,

    /// Write the machine-readable report (JSON) here.
    #[arg(long, value_name = "FILE")]
    report_out: Option<PathBuf>,

    /// Cost table overrides (JSON object with any subset of the constants).
    #[arg(long, value_name = "FILE")]
    costs: Option<PathBuf>,
}

enum Failure {
    Expectations,
    Usage(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Usage(e)
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    match real_main(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Expectations) => ExitCode::from(1),
        Err(Failure::Usage(e)) => {
            eprintln!("dpti-sim: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main(mut args: Args) -> Result<(), Failure> {
    // `--bench file.json` is read as a scenario to benchmark.
    if let Some(b) = &args.bench {
        if args.scenario.is_none() && b != "all" && !SUITES.contains(&b.as_str()) {
            args.scenario = Some(PathBuf::from(b));
            args.bench = Some("all".into());
        }
    }
    let costs = match &args.costs {
        Some(path) => Some(load_costs(path)?),
        None => None,
    };
    if let Some(suite) = &args.bench {
        return bench_mode(&args, suite, costs);
    }
    let Some(path) = &args.scenario else {
        return Err(Failure::Usage(anyhow::anyhow!("no scenario given (see --help)")));
    };
    let mut scenario = load_scenario(path)?;
    if let Some(v) = args.variant {
        scenario.variant = v;
    }
    if costs.is_some() {
        scenario.costs = costs;
    }
    if args.exhaustive || args.max_steps.is_some() {
        let default = match scenario.schedule {
            ScheduleMode::Exhaustive { max_steps } => max_steps,
            ScheduleMode::Seeded { .. } => DEFAULT_MAX_STEPS,
        };
        scenario.schedule = ScheduleMode::Exhaustive { max_steps: args.max_steps.unwrap_or(default) };
    } else if let Some(seed) = args.seed {
        scenario.schedule = ScheduleMode::Seeded { seed };
    }
    if args.runs == 0 {
        return Err(Failure::Usage(anyhow::anyhow!("--runs must be at least 1")));
    }
    let reports = if args.runs > 1 {
        let start = match scenario.schedule {
            ScheduleMode::Seeded { seed } => seed,
            ScheduleMode::Exhaustive { .. } => 0,
        };
        run_seeds(&scenario, start, args.runs)?
    } else {
        vec![report::run(&scenario).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?]
    };
    for (i, r) in reports.iter().enumerate() {
        if i > 0 {
            println!();
        }
        print!("{}", r.to_text());
    }
    if let Some(out) = &args.report_out {
        let text = if reports.len() == 1 {
            reports[0].to_json()
        } else {
            serde_json::to_string_pretty(&reports).context("serializing reports")?
        };
        std::fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
    }
    if reports.iter().all(SimReport::passed) {
        Ok(())
    } else {
        Err(Failure::Expectations)
    }
}

fn run_seeds(scenario: &Scenario, start: u64, runs: u64) -> Result<Vec<SimReport>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(runs as usize);
    let seeds: Vec<u64> = (start..start + runs).collect();
    let chunks: Vec<&[u64]> = seeds.chunks(seeds.len().div_ceil(workers)).collect();
    let results: Vec<Result<Vec<SimReport>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = chunks
            .iter()
            .map(|chunk| {
                scope.spawn(move || {
                    chunk
                        .iter()
                        .map(|&seed| {
                            let mut s = scenario.clone();
                            s.schedule = ScheduleMode::Seeded { seed };
                            report::run(&s).map_err(anyhow::Error::from)
                        })
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::new();
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

fn bench_mode(args: &Args, suite: &str, costs: Option<CostTable>) -> Result<(), Failure> {
    let costs = costs.unwrap_or_default();
    let report = match &args.scenario {
        Some(path) => {
            let mut s = load_scenario(path)?;
            if let Some(v) = args.variant {
                s.variant = v;
            }
            bench::bench_scenario(&s, &costs).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?
        }
        None => bench::run_suites(Some(suite), &costs).map_err(|e| anyhow::anyhow!(e))?,
    };
    print!("{}", report.to_table());
    if let Some(out) = &args.report_out {
        let text = serde_json::to_string_pretty(&report).context("serializing bench report")?;
        std::fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Scenario::from_json(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
}

fn load_costs(path: &Path) -> Result<CostTable> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let table: CostTable = serde_json::from_str(&text)
        .map_err(|e| anyhow::anyhow!("{}: line {}, column {}: {e}", path.display(), e.line(), e.column()))?;
    if let Err(e) = table.validate() {
        bail!("{}: {e}", path.display());
    }
    Ok(table)
}
