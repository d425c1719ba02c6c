//! Closed-loop episodes of the hybrid planner and of the centralised baseline.

mod metrics;
pub mod suite;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::admm::{AdmmConfig, AdmmPlanner, AgentContext, DualRecord, KnotTrajectory};
use crate::arena::{advance_plan, build_corridor_map, input_bounds_for, plan_subtargets, CorridorMap, PositionBounds, Rect, SubTargetPlan};
use crate::baseline::{CentralProblem, DEFAULT_MARGIN};
use crate::error::PlanError;
use crate::hocbf::{safety_filter, FilterConfig};
use crate::model::{discretize, step, AgentParams, AgentState, ControlInput, DiscreteDynamics, Horizon};

pub use metrics::{collision_check, compute_metrics, CollisionSummary, EpisodeSummary};

/// An agent counts as arrived once `‖x − x_f‖²` drops below this.
pub const ARRIVAL_TOL: f64 = 1e-3;
pub const DEFAULT_MAX_SIM_TIME: f64 = 30.0;
const CONTAIN_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    AdmmHocbf,
    Centralized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub start: AgentState,
    pub target: AgentState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub agents: Vec<AgentSpec>,
    pub params: AgentParams,
    /// Corridors of the arena; empty for an unbounded plane.
    pub arena: Vec<Rect>,
    pub method: Method,
    pub admm: AdmmConfig,
    pub filter: FilterConfig,
    pub horizon: Horizon,
    pub max_sim_time: f64,
    pub seed: u64,
    /// Separation margin of the centralised method, used in place of `params.margin`.
    pub baseline_margin: f64,
    /// Threads for the ADMM phases.
    pub workers: usize,
}

impl Scenario {
    /// Hybrid planner with the default configuration and no arena.
    pub fn new(agents: Vec<AgentSpec>, params: AgentParams) -> Self {
        let horizon = Horizon::default();
        Self {
            agents,
            params,
            arena: Vec::new(),
            method: Method::AdmmHocbf,
            admm: AdmmConfig::default(),
            filter: FilterConfig {
                a_peak: params.a_peak,
                dt: horizon.dt,
                ..FilterConfig::default()
            },
            horizon,
            max_sim_time: DEFAULT_MAX_SIM_TIME,
            seed: 0,
            baseline_margin: DEFAULT_MARGIN,
            workers: 1,
        }
    }

    /// Checks every invariant and returns the corridor map when an arena is set.
    pub fn validate(&self) -> Result<Option<CorridorMap>, PlanError> {
        self.params.validate()?;
        self.admm.validate()?;
        self.filter.validate()?;
        self.horizon.knots()?;
        if self.agents.is_empty() {
            return Err(PlanError::scenario("agents", "at least one agent is required"));
        }
        if (self.filter.dt - self.horizon.dt).abs() > 1e-12 {
            return Err(PlanError::scenario("filter.dt", "must equal horizon.dt"));
        }
        if (self.filter.a_peak - self.params.a_peak).abs() > 1e-12 {
            return Err(PlanError::scenario("filter.a_peak", "must equal params.a_peak"));
        }
        if !(self.max_sim_time > 0.0) || !self.max_sim_time.is_finite() {
            return Err(PlanError::scenario("max_sim_time", "must be positive"));
        }
        if !(self.baseline_margin >= 0.0) || !self.baseline_margin.is_finite() {
            return Err(PlanError::scenario("baseline_margin", "must be non-negative"));
        }
        if self.workers == 0 {
            return Err(PlanError::scenario("workers", "must be at least 1"));
        }
        for (i, a) in self.agents.iter().enumerate() {
            if !a.start.is_finite() {
                return Err(PlanError::scenario(format!("agents[{i}].start"), "must be finite"));
            }
            if !a.target.is_finite() {
                return Err(PlanError::scenario(format!("agents[{i}].target"), "must be finite"));
            }
        }
        let d = self.params.safe_distance();
        for i in 0..self.agents.len() {
            for j in i + 1..self.agents.len() {
                let gap = (self.agents[i].start.position() - self.agents[j].start.position()).norm();
                if gap < d {
                    return Err(PlanError::scenario(
                        format!("agents[{j}].start"),
                        format!("closer than 2R+eps = {d} to agent {i} ({gap:.4} m)"),
                    ));
                }
            }
        }
        if self.arena.is_empty() {
            return Ok(None);
        }
        let map = build_corridor_map(&self.arena, &self.params)?;
        for (i, a) in self.agents.iter().enumerate() {
            for (name, s) in [("start", &a.start), ("target", &a.target)] {
                if map.containing([s.px, s.py], CONTAIN_TOL).is_empty() {
                    return Err(PlanError::scenario(
                        format!("agents[{i}].{name}"),
                        "not inside the shrunk bounds of any corridor",
                    ));
                }
            }
        }
        Ok(Some(map))
    }

    fn steps_limit(&self) -> usize {
        (self.max_sim_time / self.horizon.dt - 1e-9).ceil().max(0.0) as usize
    }
}

/// One executed MPC step. States are those at the start of the step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub time: f64,
    pub states: Vec<AgentState>,
    /// Planner inputs before the filter.
    pub u_star: Vec<ControlInput>,
    /// Applied inputs.
    pub u: Vec<ControlInput>,
    pub filter_active: bool,
    pub corrections: Vec<f64>,
    pub soft: bool,
    /// Corridor each agent was constrained to, empty without an arena.
    pub corridors: Vec<usize>,
    /// Largest consensus residual after each round.
    pub residuals: Vec<f64>,
    /// Median over agents of the consensus residual after each round.
    pub median_residuals: Vec<f64>,
    /// Centralised plan closer than `d − margin/2` somewhere.
    pub unsafe_step: bool,
    /// Wall-clock seconds of each agent's X- and Z-updates (or the centralised solve).
    pub agent_time: Vec<f64>,
    pub filter_time: f64,
    /// Max agent time plus filter time.
    pub step_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub method: Method,
    pub params: AgentParams,
    pub dt: f64,
    pub targets: Vec<AgentState>,
    /// Shrunk bounds of every corridor.
    pub bounds: Vec<PositionBounds>,
    pub steps: Vec<StepRecord>,
    pub final_states: Vec<AgentState>,
    pub timed_out: bool,
    /// Wall-clock seconds spent in pre-iterations.
    pub pre_time: f64,
    #[serde(skip)]
    pub dual_records: Vec<DualRecord>,
}

impl EpisodeLog {
    /// Positions at every logged time, including the final one.
    pub fn state_history(&self) -> impl Iterator<Item = &[AgentState]> {
        self.steps
            .iter()
            .map(|s| s.states.as_slice())
            .chain(std::iter::once(self.final_states.as_slice()))
    }

    /// Copy with all wall-clock fields zeroed.
    pub fn without_timing(&self) -> Self {
        let mut out = self.clone();
        out.pre_time = 0.0;
        for s in &mut out.steps {
            s.agent_time.iter_mut().for_each(|t| *t = 0.0);
            s.filter_time = 0.0;
            s.step_time = 0.0;
        }
        out
    }

    pub fn summary(&self) -> EpisodeSummary {
        compute_metrics(self)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Keep every dual step in the log.
    pub record_duals: bool,
    /// Stop after this many steps without flagging a timeout.
    pub max_steps: Option<usize>,
}

pub fn run_episode(s: &Scenario) -> Result<EpisodeLog, PlanError> {
    run_episode_with(s, &RunOptions::default())
}

fn arrived(states: &[AgentState], targets: &[AgentState]) -> bool {
    states.iter().zip(targets).all(|(s, t)| s.squared_error(t) < ARRIVAL_TOL)
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Per-agent corridor bookkeeping.
struct Corridors {
    map: CorridorMap,
    plans: Vec<SubTargetPlan>,
}

impl Corridors {
    fn contexts(&self, states: &[AgentState], targets: &[AgentState]) -> Vec<AgentContext> {
        states
            .iter()
            .zip(targets)
            .zip(&self.plans)
            .map(|((s, t), plan)| {
                let target = if plan.on_final_leg() {
                    *t
                } else {
                    let w = plan.current_target();
                    AgentState::at_rest(w[0], w[1])
                };
                AgentContext {
                    state: *s,
                    target,
                    bounds: Some(*self.map.bounds(plan.active_corridor())),
                }
            })
            .collect()
    }

    fn active(&self) -> Vec<usize> {
        self.plans.iter().map(SubTargetPlan::active_corridor).collect()
    }

    fn advance(&mut self, states: &[AgentState]) {
        for (plan, s) in self.plans.iter_mut().zip(states) {
            *plan = advance_plan(&self.map, plan, [s.px, s.py]);
        }
    }
}

struct StepOutcome {
    u_star: Vec<ControlInput>,
    u: Vec<ControlInput>,
    filter_active: bool,
    corrections: Vec<f64>,
    soft: bool,
    residuals: Vec<f64>,
    median_residuals: Vec<f64>,
    unsafe_step: bool,
    agent_time: Vec<f64>,
    filter_time: f64,
}

enum Controller {
    Hybrid(Box<AdmmPlanner>),
    Central {
        problem: CentralProblem,
        warm: Option<Vec<KnotTrajectory>>,
    },
}

impl Controller {
    fn step(&mut self, s: &Scenario, contexts: &[AgentContext]) -> Result<StepOutcome, PlanError> {
        let n = contexts.len();
        let states: Vec<AgentState> = contexts.iter().map(|c| c.state).collect();
        match self {
            Controller::Hybrid(planner) => {
                let plan = planner.plan_step(contexts)?;
                let t0 = Instant::now();
                let arena: Option<Vec<_>> = contexts
                    .iter()
                    .map(|c| c.bounds.map(|b| input_bounds_for(&c.state, &b, s.filter.a_peak, s.filter.dt)))
                    .collect();
                let (u, report) = safety_filter(&plan.inputs, &states, &s.params, &s.filter, arena.as_deref())?;
                let filter_time = t0.elapsed().as_secs_f64();
                let has_rect: Vec<bool> = contexts.iter().map(|c| c.bounds.is_some()).collect();
                planner.advance(&has_rect);
                Ok(StepOutcome {
                    u_star: plan.inputs,
                    u,
                    filter_active: report.active,
                    corrections: report.corrections,
                    soft: report.soft,
                    residuals: plan.residuals,
                    median_residuals: plan.agent_residuals.iter().map(|r| median(r)).collect(),
                    unsafe_step: false,
                    agent_time: plan.agent_time.iter().map(|d| d.as_secs_f64()).collect(),
                    filter_time,
                })
            }
            Controller::Central { problem, warm } => {
                let targets: Vec<AgentState> = contexts.iter().map(|c| c.target).collect();
                let bounds: Vec<Option<PositionBounds>> = contexts.iter().map(|c| c.bounds).collect();
                let t0 = Instant::now();
                let sol = problem.solve_step(&states, &targets, &bounds, &s.params, s.baseline_margin, warm.as_deref())?;
                let elapsed = t0.elapsed().as_secs_f64();
                let u: Vec<ControlInput> = sol.trajectories.iter().map(|t| t.inputs[0]).collect();
                *warm = Some(sol.trajectories.iter().map(KnotTrajectory::shifted).collect());
                Ok(StepOutcome {
                    u_star: u.clone(),
                    u,
                    filter_active: false,
                    corrections: vec![0.0; n],
                    soft: false,
                    residuals: Vec::new(),
                    median_residuals: Vec::new(),
                    unsafe_step: sol.unsafe_step,
                    agent_time: vec![elapsed; n],
                    filter_time: 0.0,
                })
            }
        }
    }
}

/// Runs the scenario until every agent has arrived or the time limit is reached.
pub fn run_episode_with(s: &Scenario, opts: &RunOptions) -> Result<EpisodeLog, PlanError> {
    let map = s.validate()?;
    let dynamics: DiscreteDynamics = discretize(s.horizon.dt)?;
    let n = s.agents.len();
    let targets: Vec<AgentState> = s.agents.iter().map(|a| a.target).collect();
    let mut states: Vec<AgentState> = s.agents.iter().map(|a| a.start).collect();

    let mut corridors = match map {
        Some(map) => {
            let plans = s
                .agents
                .iter()
                .map(|a| plan_subtargets(&map, [a.start.px, a.start.py], [a.target.px, a.target.py]))
                .collect::<Result<Vec<_>, _>>()?;
            Some(Corridors { map, plans })
        }
        None => None,
    };
    let contexts_for = |states: &[AgentState], corridors: &Option<Corridors>| match corridors {
        Some(c) => c.contexts(states, &targets),
        None => states
            .iter()
            .zip(&targets)
            .map(|(st, t)| AgentContext {
                state: *st,
                target: *t,
                bounds: None,
            })
            .collect(),
    };

    let mut log = EpisodeLog {
        method: s.method,
        params: s.params,
        dt: s.horizon.dt,
        targets: targets.clone(),
        bounds: corridors
            .as_ref()
            .map(|c| (0..c.map.corridors().len()).map(|k| *c.map.bounds(k)).collect())
            .unwrap_or_default(),
        steps: Vec::new(),
        final_states: Vec::new(),
        timed_out: false,
        pre_time: 0.0,
        dual_records: Vec::new(),
    };

    let mut controller = match s.method {
        Method::AdmmHocbf => {
            let contexts = contexts_for(&states, &corridors);
            let mut planner = AdmmPlanner::new(s.admm.clone(), s.params, s.horizon, &contexts)?.with_workers(s.workers);
            if opts.record_duals {
                planner.record_duals();
            }
            if !arrived(&states, &targets) {
                let t0 = Instant::now();
                planner.pre_iterate(&contexts)?;
                log.pre_time = t0.elapsed().as_secs_f64();
            }
            Controller::Hybrid(Box::new(planner))
        }
        Method::Centralized => Controller::Central {
            problem: CentralProblem::new(n, s.horizon, s.admm.q, s.admm.rw)?,
            warm: None,
        },
    };

    let limit = s.steps_limit();
    let mut k = 0;
    loop {
        if arrived(&states, &targets) {
            break;
        }
        if opts.max_steps.is_some_and(|m| k >= m) {
            break;
        }
        if k >= limit {
            log.timed_out = true;
            break;
        }
        let contexts = contexts_for(&states, &corridors);
        let out = controller.step(s, &contexts)?;
        if let Controller::Hybrid(p) = &mut controller {
            log.dual_records.extend(p.take_dual_records());
        }
        let max_agent = out.agent_time.iter().copied().fold(0.0, f64::max);
        log.steps.push(StepRecord {
            step: k,
            time: k as f64 * s.horizon.dt,
            states: states.clone(),
            u_star: out.u_star,
            corridors: corridors.as_ref().map(Corridors::active).unwrap_or_default(),
            filter_active: out.filter_active,
            corrections: out.corrections,
            soft: out.soft,
            residuals: out.residuals,
            median_residuals: out.median_residuals,
            unsafe_step: out.unsafe_step,
            step_time: max_agent + out.filter_time,
            agent_time: out.agent_time,
            filter_time: out.filter_time,
            u: out.u.clone(),
        });
        states = states.iter().zip(&out.u).map(|(x, u)| step(x, u, &dynamics)).collect();
        if let Some(c) = corridors.as_mut() {
            c.advance(&states);
        }
        k += 1;
        log::debug!("step {k}: max error {:.3e}", states.iter().zip(&targets).map(|(a, b)| a.squared_error(b)).fold(0.0, f64::max));
    }
    log.final_states = states;
    Ok(log)
}
