use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dgk::engine::Method;
use dgk_bench::output::write_run;
use dgk_bench::sweep::sweep;
use dgk_bench::{run_scenario, BenchError, Overrides, Scenario};

#[derive(Parser)]
#[command(name = "dgk", version, about = "Budget-constrained dual-control experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one method on one seed and write its logs.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to the scenario's method, then dual_gatekeeper.
        #[arg(long, value_parser = parse_method)]
        method: Option<Method>,
        #[arg(long)]
        out: PathBuf,
        /// Budget as a percentage of the baseline cost.
        #[arg(long)]
        budget_pct: Option<f64>,
        /// Safety-verification rollouts per candidate.
        #[arg(long)]
        rollouts: Option<usize>,
    },
    /// Run several methods over several seeds in parallel.
    Sweep {
        #[arg(long)]
        scenario: PathBuf,
        /// Comma-separated seeds or an inclusive range `a..b`; defaults to the scenario's seeds.
        #[arg(long, value_parser = parse_seeds)]
        seeds: Option<SeedList>,
        #[arg(long, value_delimiter = ',', value_parser = parse_method, required = true)]
        methods: Vec<Method>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        budget_pct: Option<f64>,
        #[arg(long)]
        rollouts: Option<usize>,
    },
}

#[derive(Clone, Debug)]
struct SeedList(Vec<u64>);

fn parse_method(s: &str) -> Result<Method, String> {
    Method::parse(s).map_err(|e| e.to_string())
}

fn parse_seeds(s: &str) -> Result<SeedList, String> {
    let bad = |e: std::num::ParseIntError| format!("bad seed list '{s}': {e}");
    if let Some((a, b)) = s.split_once("..") {
        let (a, b) = (a.trim().parse::<u64>().map_err(bad)?, b.trim().parse::<u64>().map_err(bad)?);
        return Ok(SeedList((a..=b).collect()));
    }
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<u64>().map_err(bad))
        .collect::<Result<_, _>>()
        .map(SeedList)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn execute(cli: Cli) -> Result<(), BenchError> {
    match cli.command {
        Command::Run {
            scenario,
            seed,
            method,
            out,
            budget_pct,
            rollouts,
        } => {
            let sc = Scenario::load(&scenario)?.with_overrides(Overrides { budget_pct, rollouts });
            let method = method.or(sc.method).unwrap_or(Method::DualGatekeeper);
            let run = run_scenario(&sc, method, seed, None)?;
            write_run(&out, &sc, &run)?;
            println!("{}", serde_json::to_string_pretty(&dgk_bench::output::rounded_json(&run.summary)?)?);
        }
        Command::Sweep {
            scenario,
            seeds,
            methods,
            out,
            budget_pct,
            rollouts,
        } => {
            let sc = Scenario::load(&scenario)?.with_overrides(Overrides { budget_pct, rollouts });
            let seeds = seeds.map(|s| s.0).unwrap_or_else(|| sc.seeds.clone());
            let result = sweep(&sc, &seeds, &methods, Some(&out))?;
            for a in &result.aggregates {
                println!(
                    "{:<16} trials {:>3}  safe {:>5.1}%  success {:>5.1}%  cost {:>7.2}%",
                    a.method, a.trials, a.safe_run_pct, a.success_pct, a.mean_cost_pct
                );
            }
        }
    }
    Ok(())
}
