use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use swarmplan::admm::{AdmmConfig, Preset};
use swarmplan::arena::Rect;
use swarmplan::error::{ModelError, PlanError};
use swarmplan::model::AgentParams;
use swarmplan::sim::suite::{random_suite, run_bench, BenchConfig, BenchReport};
use swarmplan::sim::{run_episode, EpisodeSummary, Method, Scenario};

use crate::file::{ScenarioFile, SchemaError};
use crate::output::{bench_svg, trajectory_svg, write_trajectory_csv};

pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const PLOT_FILE: &str = "trajectories.svg";
pub const BENCH_FILE: &str = "bench.json";
pub const BENCH_PLOT_FILE: &str = "bench.svg";

/// Exit status of `run` when the episode hit `max_sim_time`.
pub const EXIT_TIMEOUT: u8 = 3;

/// Command-line overrides applied on top of a scenario.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub method: Option<Method>,
    pub preset: Option<Preset>,
    pub workers: Option<usize>,
    pub max_sim_time: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, s: &mut Scenario) {
        if let Some(seed) = self.seed {
            s.seed = seed;
        }
        if let Some(m) = self.method {
            s.method = m;
        }
        if let Some(p) = self.preset {
            // Only the round count and penalty change, the weights stay as given.
            let preset = AdmmConfig::preset(p);
            s.admm.m = preset.m;
            s.admm.mu = preset.mu;
        }
        if let Some(w) = self.workers {
            s.workers = w;
        }
        if let Some(t) = self.max_sim_time {
            s.max_sim_time = t;
        }
    }
}

/// Exit status for a failed command: 1 for bad input, 2 for a solver or safety failure.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<SchemaError>().is_some() {
        return 1;
    }
    match err.downcast_ref::<PlanError>() {
        Some(PlanError::Solver { .. } | PlanError::Qcqp(_) | PlanError::Collision { .. }) => 2,
        _ => 1,
    }
}

/// Runs the scenario invariants and reports a failure against the scenario file key.
pub fn check_scenario(s: &Scenario) -> Result<(), SchemaError> {
    s.validate().map(|_| ()).map_err(|e| {
        let path = match &e {
            PlanError::Model(ModelError::InvalidParam { field, .. }) => format!("params.{field}"),
            PlanError::Model(ModelError::InvalidHorizon { field, .. }) => format!("horizon.{field}"),
            PlanError::Scenario { field, .. } => field.clone(),
            PlanError::Arena(_) => "arena.rects".into(),
            _ => String::new(),
        };
        SchemaError {
            path,
            message: e.to_string(),
        }
    })
}

pub fn load_scenario(path: &Path, overrides: &Overrides) -> anyhow::Result<Scenario> {
    let mut s = ScenarioFile::load(path)?.to_scenario();
    overrides.apply(&mut s);
    check_scenario(&s)?;
    Ok(s)
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub method: Method,
    pub agents: usize,
    pub seed: u64,
    pub admm_rounds: usize,
    pub admm_penalty: f64,
    #[serde(flatten)]
    pub metrics: EpisodeSummary,
}

/// Runs one episode and writes the trajectory CSV, summary JSON and path plot.
/// Returns the exit status, [`EXIT_TIMEOUT`] when the episode did not finish.
pub fn cmd_run(scenario: &Path, out: &Path, overrides: &Overrides) -> anyhow::Result<u8> {
    let s = load_scenario(scenario, overrides)?;
    log::info!("running {} agents with {:?}", s.agents.len(), s.method);
    let log = run_episode(&s)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let csv = fs::File::create(out.join(TRAJECTORY_FILE))?;
    write_trajectory_csv(&log, std::io::BufWriter::new(csv))?;
    fs::write(out.join(PLOT_FILE), trajectory_svg(&log, &s.arena))?;
    let summary = RunSummary {
        method: s.method,
        agents: s.agents.len(),
        seed: s.seed,
        admm_rounds: s.admm.m,
        admm_penalty: s.admm.mu,
        metrics: log.summary(),
    };
    fs::write(out.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)? + "\n")?;
    log::info!(
        "{} steps, {} collisions, filter active {:.1} %",
        summary.metrics.steps,
        summary.metrics.collisions,
        summary.metrics.filter_activity
    );
    Ok(if log.timed_out { EXIT_TIMEOUT } else { 0 })
}

pub fn cmd_validate(scenario: &Path, overrides: &Overrides) -> anyhow::Result<Scenario> {
    load_scenario(scenario, overrides)
}

/// Writes `trials` random scenarios of `n` agents inside `bounds` as
/// `scenario_n{n}_t{trial}.json`.
pub fn cmd_randsuite(
    n: usize,
    trials: usize,
    seed: u64,
    bounds: Rect,
    out: &Path,
    overrides: &Overrides,
) -> anyhow::Result<Vec<PathBuf>> {
    let params = AgentParams::default();
    let suite = random_suite(n, trials, seed, &bounds, &params)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut written = Vec::with_capacity(trials);
    for (t, agents) in suite.into_iter().enumerate() {
        let mut s = Scenario::new(agents, params);
        s.arena = vec![bounds];
        s.seed = seed;
        overrides.apply(&mut s);
        check_scenario(&s)?;
        let path = out.join(format!("scenario_n{n}_t{t}.json"));
        fs::write(&path, ScenarioFile::from_scenario(&s).to_json())?;
        written.push(path);
    }
    Ok(written)
}

/// Runs the benchmark and writes the JSON report and its log-log plot.
pub fn cmd_bench(cfg: &BenchConfig, out: &Path) -> anyhow::Result<BenchReport> {
    let report = run_bench(cfg)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join(BENCH_FILE), serde_json::to_string_pretty(&report)? + "\n")?;
    fs::write(out.join(BENCH_PLOT_FILE), bench_svg(&report))?;
    for s in &report.series {
        log::info!(
            "{}: exponent {:.3} (95 % CI {:.3} to {:.3})",
            s.planner.label(),
            s.fit.exponent,
            s.fit.ci_low,
            s.fit.ci_high
        );
    }
    Ok(report)
}
