use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use swarmplan::admm::Preset;
use swarmplan::arena::Rect;
use swarmplan::sim::suite::{default_arena, BenchConfig, Planner};
use swarmplan::sim::Method;
use swarmplan_cli::{cmd_bench, cmd_randsuite, cmd_run, cmd_validate, exit_code, Overrides};

#[derive(Parser)]
#[command(name = "swarmplan", version, about = "Multi-agent planner simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum MethodArg {
    AdmmHocbf,
    Centralized,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    M1,
    M20,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum PlannerArg {
    Centralized,
    AdmmM1,
    AdmmM20,
}

#[derive(clap::Args)]
struct OverrideArgs {
    /// Replace the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// ADMM rounds and penalty preset.
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    /// Threads for the ADMM phases.
    #[arg(long)]
    workers: Option<usize>,
    /// Simulated seconds before the episode counts as timed out.
    #[arg(long)]
    max_sim_time: Option<f64>,
}

impl OverrideArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            method: self.method.map(|m| match m {
                MethodArg::AdmmHocbf => Method::AdmmHocbf,
                MethodArg::Centralized => Method::Centralized,
            }),
            preset: self.preset.map(|p| match p {
                PresetArg::M1 => Preset::M1,
                PresetArg::M20 => Preset::M20,
            }),
            workers: self.workers,
            max_sim_time: self.max_sim_time,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario file; writes trajectory.csv, summary.json and trajectories.svg.
    Run {
        scenario: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Write random scenario files.
    Randsuite {
        /// Agents per scenario.
        #[arg(long)]
        agents: usize,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        /// Sampling rectangle as xmin,xmax,ymin,ymax.
        #[arg(long, value_delimiter = ',')]
        bounds: Option<Vec<f64>>,
        #[arg(long, default_value = "suite")]
        out: PathBuf,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Time planners over random suites and fit the log-log scaling exponent.
    Bench {
        /// Agent counts, strictly increasing.
        #[arg(long, value_delimiter = ',', default_value = "2,4,6,8,10,12")]
        ns: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "centralized,admm_m20")]
        methods: Vec<PlannerArg>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Episodes run concurrently; defaults to the machine's parallelism.
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        max_sim_time: Option<f64>,
        /// Truncate every episode after this many steps.
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        bounds: Option<Vec<f64>>,
        #[arg(long, default_value = "bench")]
        out: PathBuf,
    },
    /// Check a scenario file without running it.
    Validate {
        scenario: PathBuf,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
}

fn rect(bounds: Option<Vec<f64>>) -> anyhow::Result<Rect> {
    match bounds {
        None => Ok(default_arena()),
        Some(b) if b.len() == 4 => Ok(Rect::new(b[0], b[1], b[2], b[3])),
        Some(b) => anyhow::bail!("--bounds takes xmin,xmax,ymin,ymax, got {} values", b.len()),
    }
}

fn execute(cmd: Command) -> anyhow::Result<u8> {
    match cmd {
        Command::Run { scenario, out, overrides } => cmd_run(&scenario, &out, &overrides.overrides()),
        Command::Randsuite {
            agents,
            trials,
            bounds,
            out,
            overrides,
        } => {
            let o = overrides.overrides();
            let files = cmd_randsuite(agents, trials, o.seed.unwrap_or(0), rect(bounds)?, &out, &o)?;
            for f in files {
                println!("{}", f.display());
            }
            Ok(0)
        }
        Command::Bench {
            ns,
            trials,
            methods,
            seed,
            workers,
            max_sim_time,
            max_steps,
            bounds,
            out,
        } => {
            let planners = methods
                .into_iter()
                .map(|m| match m {
                    PlannerArg::Centralized => Planner::Centralized,
                    PlannerArg::AdmmM1 => Planner::AdmmM1,
                    PlannerArg::AdmmM20 => Planner::AdmmM20,
                })
                .collect();
            let mut cfg = BenchConfig::new(ns, trials, planners);
            cfg.seed = seed;
            cfg.arena = rect(bounds)?;
            cfg.max_steps = max_steps;
            if let Some(w) = workers {
                cfg.workers = w;
            }
            if let Some(t) = max_sim_time {
                cfg.max_sim_time = t;
            }
            let report = cmd_bench(&cfg, &out)?;
            for s in &report.series {
                println!(
                    "{}: exponent {:.3} [{:.3}, {:.3}]",
                    s.planner.label(),
                    s.fit.exponent,
                    s.fit.ci_low,
                    s.fit.ci_high
                );
            }
            Ok(0)
        }
        Command::Validate { scenario, overrides } => {
            let s = cmd_validate(&scenario, &overrides.overrides())?;
            println!("ok: {} agents, {} corridors", s.agents.len(), s.arena.len());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SWARMPLAN_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // Usage errors share the bad-input status.
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli.command) {
        Ok(code) => {
            if code == swarmplan_cli::commands::EXIT_TIMEOUT {
                eprintln!("episode timed out; summary written");
            }
            ExitCode::from(code)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
