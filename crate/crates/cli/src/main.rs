//! `infogather` — plan, simulate, and benchmark energy-aware multi-robot
//! information gathering missions.
//!
//! Every command takes an explicit seed (or a fixed internal one) and
//! writes a deterministic CSV: running the same command twice produces
//! byte-identical output.  Passing an `--out` path ending in `.json`
//! writes the full JSON record instead; any other path gets the CSV plus
//! a JSON sidecar.
//!
//! Set `INFOGATHER_THREADS` to cap intra-run parallelism (benchmark
//! trials); a single mission or planning run is always sequential.

use clap::{Parser, Subcommand, ValueEnum};
use infogather::harness::{
    self, HarnessError, NetBenchParams, PlannerConfig, SphereParams,
};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "infogather",
    version,
    about = "Energy-aware multi-robot information gathering: planning, tracking, and safety benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Algo {
    /// Distributed local search over the scenario's message network.
    Dls,
    /// The same local search evaluated centrally.
    Cls,
    /// Sequential coordinate-descent baseline.
    Cd,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the trajectory-selection problem once from the scenario's
    /// initial state and export the planner metrics.
    Plan {
        /// Preset name or path to a scenario JSON file.
        #[arg(long)]
        scenario: String,
        /// Planner to run.
        #[arg(long, value_enum)]
        algo: Algo,
        /// Disable lazy candidate scans (dls/cls only).
        #[arg(long)]
        no_lazy: bool,
        /// Disable the greedy warm start (dls/cls only).
        #[arg(long)]
        no_warm_start: bool,
        /// Approximation knob: candidates are exchanged only when they
        /// improve the objective by a factor of 1 + alpha/N^4.
        #[arg(long)]
        alpha: f64,
        /// Master seed; overrides the scenario's seed.
        #[arg(long)]
        seed: u64,
        /// Output path (CSV, or JSON when the extension is .json).
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the closed-loop mission: replan on schedule, track waypoints
    /// through the safety filter, and assimilate noisy measurements.
    Track {
        /// Preset name or path to a scenario JSON file.
        #[arg(long)]
        scenario: String,
        /// Master seed; overrides the scenario's seed.
        #[arg(long)]
        seed: u64,
        /// Output path (CSV, or JSON when the extension is .json).
        #[arg(long)]
        out: PathBuf,
    },
    /// Antipodal sphere exchange: robots start on a sphere and must reach
    /// the opposite pole under the pairwise safety filter.
    Sphere {
        /// Team size (at least 2).
        #[arg(long)]
        robots: usize,
        /// Deviation-metric knob: larger values favor swerving over
        /// braking.
        #[arg(long)]
        beta: f64,
        /// Number of randomized trials.
        #[arg(long)]
        trials: usize,
        /// Master seed for the trial perturbations.
        #[arg(long)]
        seed: u64,
        /// Output path (CSV, or JSON when the extension is .json).
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep team sizes and planner variants over synthetic instances
    /// under simulated message delay.
    BenchNet {
        /// Largest team size; the sweep covers 2 through this value.
        #[arg(long)]
        robots: usize,
        /// Mean message delay in milliseconds.
        #[arg(long)]
        delay_ms: f64,
        /// Output path (CSV, or JSON when the extension is .json).
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    if let Ok(v) = std::env::var("INFOGATHER_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n >= 1 => {
                // Ignore the error if a global pool already exists.
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: INFOGATHER_THREADS must be a positive integer, got '{v}'");
                return ExitCode::from(2);
            }
        }
    }
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(command: Command) -> Result<(), HarnessError> {
    match command {
        Command::Plan { scenario, algo, no_lazy, no_warm_start, alpha, seed, out } => {
            let mut cfg = harness::load_scenario(&scenario)?;
            cfg.seed = seed;
            cfg.alpha = alpha;
            cfg.planner = match algo {
                Algo::Dls => PlannerConfig::Dls { lazy: !no_lazy, warm_start: !no_warm_start },
                Algo::Cls => PlannerConfig::Cls { lazy: !no_lazy, warm_start: !no_warm_start },
                // Keep the scenario's visiting order when it already asks
                // for coordinate descent.
                Algo::Cd => match cfg.planner {
                    PlannerConfig::Cd { order } => PlannerConfig::Cd { order },
                    _ => PlannerConfig::Cd { order: Default::default() },
                },
            };
            harness::validate(&cfg)?;
            let rec = harness::run_plan_once(&cfg)?;
            harness::export(&rec, &out)?;
            let row = &rec.replans[0];
            println!(
                "plan {}: objective {:.6} (information {:.6}, energy {:.6}) in {} rounds, \
                 {} oracle evaluations -> {}",
                cfg.name,
                row.objective,
                row.mi,
                row.energy,
                row.rounds,
                row.evals,
                out.display()
            );
            Ok(())
        }
        Command::Track { scenario, seed, out } => {
            let mut cfg = harness::load_scenario(&scenario)?;
            cfg.seed = seed;
            harness::validate(&cfg)?;
            let rec = harness::run_tracking_sim(&cfg)?;
            harness::export(&rec, &out)?;
            let run = &rec.runs[0];
            println!(
                "track {}: {} replans, {} control steps, objective {:.6}, min barrier {} -> {}",
                cfg.name,
                rec.replans.len(),
                rec.controls.len(),
                run.objective.unwrap_or(f64::NAN),
                run.min_h.map_or_else(|| "n/a".into(), |h| format!("{h:.4}")),
                out.display()
            );
            Ok(())
        }
        Command::Sphere { robots, beta, trials, seed, out } => {
            let params = SphereParams { robots, beta, trials, seed };
            let rec = harness::run_sphere_benchmark(&params)?;
            harness::export(&rec, &out)?;
            let feasible = rec.runs.iter().filter(|r| r.feasible).count();
            let min_h = rec
                .runs
                .iter()
                .filter(|r| r.feasible)
                .filter_map(|r| r.min_h)
                .fold(f64::INFINITY, f64::min);
            println!(
                "sphere: {feasible}/{trials} feasible trials, min barrier over feasible {} -> {}",
                if feasible > 0 { format!("{min_h:.6}") } else { "n/a".into() },
                out.display()
            );
            Ok(())
        }
        Command::BenchNet { robots, delay_ms, out } => {
            let params = NetBenchParams { robots, delay_ms, seed: 0 };
            let rec = harness::run_planner_bench(&params)?;
            harness::export(&rec, &out)?;
            println!(
                "bench-net: {} sweep points over teams of 2..={robots} at {delay_ms} ms mean \
                 delay -> {}",
                rec.runs.len(),
                out.display()
            );
            Ok(())
        }
    }
}
