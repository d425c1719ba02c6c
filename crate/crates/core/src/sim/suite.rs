//! Random scenario suites, the scalability benchmark and its log-log exponent fit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::{compute_metrics, run_episode_with, AgentSpec, Method, RunOptions, Scenario};
use crate::admm::{AdmmConfig, Preset};
use crate::arena::{shrink_rect, Rect};
use crate::error::PlanError;
use crate::model::{AgentParams, AgentState};

pub const MAX_SAMPLING_ATTEMPTS: usize = 100_000;

/// Side of the square arena used for random suites, in metres.
pub const DEFAULT_ARENA_SIDE: f64 = 1.5;

pub fn default_arena() -> Rect {
    Rect {
        xmin: 0.0,
        xmax: DEFAULT_ARENA_SIDE,
        ymin: 0.0,
        ymax: DEFAULT_ARENA_SIDE,
    }
}

/// Rng for one trial; every `(n, trial)` pair draws from its own stream of the seed.
pub fn trial_rng(seed: u64, n: usize, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((n as u64) << 32) | trial as u64);
    rng
}

/// Starts and targets at rest, uniform in the shrunk bounds of `arena`, each set pairwise
/// at least `2R + ε` apart.
pub fn random_agents(n: usize, arena: &Rect, params: &AgentParams, rng: &mut impl Rng) -> Result<Vec<AgentSpec>, PlanError> {
    let b = shrink_rect(arena, params)?;
    let d = params.safe_distance();
    let mut attempts = 0;
    let mut sample = |placed: &mut Vec<[f64; 2]>| -> Result<(), PlanError> {
        loop {
            if attempts >= MAX_SAMPLING_ATTEMPTS {
                return Err(PlanError::Crowded { agents: n, attempts });
            }
            attempts += 1;
            let p = [rng.gen_range(b.lo[0]..=b.hi[0]), rng.gen_range(b.lo[1]..=b.hi[1])];
            if placed.iter().all(|q| (p[0] - q[0]).hypot(p[1] - q[1]) >= d) {
                placed.push(p);
                return Ok(());
            }
        }
    };
    let mut starts = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        sample(&mut starts)?;
    }
    for _ in 0..n {
        sample(&mut targets)?;
    }
    Ok(starts
        .iter()
        .zip(&targets)
        .map(|(s, t)| AgentSpec {
            start: AgentState::at_rest(s[0], s[1]),
            target: AgentState::at_rest(t[0], t[1]),
        })
        .collect())
}

/// `trials` independent agent sets of size `n`.
pub fn random_suite(n: usize, trials: usize, seed: u64, arena: &Rect, params: &AgentParams) -> Result<Vec<Vec<AgentSpec>>, PlanError> {
    (0..trials)
        .map(|t| random_agents(n, arena, params, &mut trial_rng(seed, n, t)))
        .collect()
}

/// A planner configuration compared in suites and benchmarks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Planner {
    Centralized,
    AdmmM1,
    AdmmM20,
}

impl Planner {
    pub fn label(self) -> &'static str {
        match self {
            Planner::Centralized => "centralized",
            Planner::AdmmM1 => "admm_m1",
            Planner::AdmmM20 => "admm_m20",
        }
    }

    /// Scenario over `arena` with this planner and default parameters.
    pub fn scenario(self, agents: Vec<AgentSpec>, params: AgentParams, arena: &[Rect], seed: u64) -> Scenario {
        let mut s = Scenario::new(agents, params);
        s.arena = arena.to_vec();
        s.seed = seed;
        match self {
            Planner::Centralized => s.method = Method::Centralized,
            Planner::AdmmM1 => s.admm = AdmmConfig::preset(Preset::M1),
            Planner::AdmmM20 => s.admm = AdmmConfig::preset(Preset::M20),
        }
        s
    }
}

/// Least-squares line through `(ln N, ln t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExponentFit {
    pub exponent: f64,
    pub intercept: f64,
    /// Two-sided 95 % confidence interval of the exponent.
    pub ci_low: f64,
    pub ci_high: f64,
    pub points: usize,
}

pub const MIN_FIT_POINTS: usize = 5;

pub fn fit_exponent(ns: &[usize], times: &[f64]) -> Result<ExponentFit, PlanError> {
    if ns.len() != times.len() {
        return Err(PlanError::Bench("one time per agent count is required".into()));
    }
    let mut distinct = ns.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < MIN_FIT_POINTS {
        return Err(PlanError::Bench(format!(
            "the exponent fit needs at least {MIN_FIT_POINTS} distinct agent counts, got {}",
            distinct.len()
        )));
    }
    if ns.contains(&0) || times.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
        return Err(PlanError::Bench("agent counts and times must be positive".into()));
    }
    let x: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
    let y: Vec<f64> = times.iter().map(|t| t.ln()).collect();
    let k = x.len() as f64;
    let mx = x.iter().sum::<f64>() / k;
    let my = y.iter().sum::<f64>() / k;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x.iter().zip(&y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let dof = k - 2.0;
    let se = (sse / dof / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, dof)
        .map_err(|e| PlanError::Bench(e.to_string()))?
        .inverse_cdf(0.975);
    Ok(ExponentFit {
        exponent: slope,
        intercept,
        ci_low: slope - t * se,
        ci_high: slope + t * se,
        points: x.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    /// Agent counts, strictly increasing.
    pub ns: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
    pub planners: Vec<Planner>,
    pub params: AgentParams,
    pub arena: Rect,
    /// Episodes run concurrently.
    pub workers: usize,
    pub max_sim_time: f64,
    /// Truncates every episode after this many steps.
    pub max_steps: Option<usize>,
}

impl BenchConfig {
    pub fn new(ns: Vec<usize>, trials: usize, planners: Vec<Planner>) -> Self {
        Self {
            ns,
            trials,
            seed: 0,
            planners,
            params: AgentParams::default(),
            arena: default_arena(),
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            max_sim_time: super::DEFAULT_MAX_SIM_TIME,
            max_steps: None,
        }
    }
}

/// Per-step compute times of one planner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSeries {
    pub planner: Planner,
    pub ns: Vec<usize>,
    /// Mean over trials of each episode's average step time.
    pub mean: Vec<f64>,
    pub stdev: Vec<f64>,
    /// Average step time of every trial, indexed `[n][trial]`.
    pub samples: Vec<Vec<f64>>,
    pub fit: ExponentFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub trials: usize,
    pub seed: u64,
    pub series: Vec<BenchSeries>,
}

impl BenchReport {
    pub fn series(&self, planner: Planner) -> Option<&BenchSeries> {
        self.series.iter().find(|s| s.planner == planner)
    }
}

fn mean_stdev(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Runs every planner on the same random suites and fits the scaling exponent of each.
/// Any collision aborts the benchmark.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport, PlanError> {
    if cfg.ns.windows(2).any(|w| w[1] <= w[0]) {
        return Err(PlanError::Bench("agent counts must be strictly increasing".into()));
    }
    if cfg.ns.len() < MIN_FIT_POINTS {
        return Err(PlanError::Bench(format!("the exponent fit needs at least {MIN_FIT_POINTS} agent counts")));
    }
    if cfg.trials == 0 || cfg.planners.is_empty() || cfg.workers == 0 {
        return Err(PlanError::Bench("trials, planners and workers must be non-empty".into()));
    }
    let suites = cfg
        .ns
        .iter()
        .map(|&n| random_suite(n, cfg.trials, cfg.seed, &cfg.arena, &cfg.params))
        .collect::<Result<Vec<_>, _>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| PlanError::Bench(e.to_string()))?;
    let opts = RunOptions {
        record_duals: false,
        max_steps: cfg.max_steps,
    };
    let arena = [cfg.arena];
    let run = |planner: Planner, ni: usize, trial: usize| -> Result<f64, PlanError> {
        let mut s = planner.scenario(suites[ni][trial].clone(), cfg.params, &arena, cfg.seed);
        s.max_sim_time = cfg.max_sim_time;
        let log = run_episode_with(&s, &opts)?;
        let m = compute_metrics(&log);
        if m.collisions > 0 {
            return Err(PlanError::Collision {
                method: planner.label().into(),
                agents: cfg.ns[ni],
                trial,
                collisions: m.collisions,
            });
        }
        Ok(m.avg_step_time)
    };

    let mut series = Vec::new();
    for &planner in &cfg.planners {
        let mut samples = Vec::new();
        for ni in 0..cfg.ns.len() {
            // Discarded warm-up episode.
            run(planner, ni, 0)?;
            let times = pool.install(|| {
                (0..cfg.trials)
                    .into_par_iter()
                    .map(|t| run(planner, ni, t))
                    .collect::<Result<Vec<_>, _>>()
            })?;
            log::info!("bench {} N={}: {:?}", planner.label(), cfg.ns[ni], times);
            samples.push(times);
        }
        let (mean, stdev): (Vec<f64>, Vec<f64>) = samples.iter().map(|s| mean_stdev(s)).unzip();
        let fit = fit_exponent(&cfg.ns, &mean)?;
        series.push(BenchSeries {
            planner,
            ns: cfg.ns.clone(),
            mean,
            stdev,
            samples,
            fit,
        });
    }
    Ok(BenchReport {
        trials: cfg.trials,
        seed: cfg.seed,
        series,
    })
}
