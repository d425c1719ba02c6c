//! Decentralised ADMM over per-agent tracking problems.
//!
//! Each round runs two bulk-synchronous phases against an immutable snapshot of
//! the [`SharedBoard`]: every agent solves its X-update and publishes its planned
//! positions, then every agent projects its position copies onto the separation
//! constraints (Z-update), takes a dual ascent step and publishes the result.

mod board;
pub mod xupdate;
pub mod zupdate;

use std::time::{Duration, Instant};

use nalgebra::{Matrix2, Matrix4, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arena::PositionBounds;
use crate::error::PlanError;
use crate::model::{discretize, AgentParams, AgentState, ControlInput, Horizon};
use crate::qsolve::WarmStart;

pub use board::{AgentSlot, Phase, SharedBoard, Stamp};
use xupdate::{shift_warm_start, CopyTerm, XUpdateProblem};

/// States at knots `0..=K` and inputs at knots `0..K` of one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotTrajectory {
    pub dt: f64,
    pub states: Vec<AgentState>,
    pub inputs: Vec<ControlInput>,
}

impl KnotTrajectory {
    pub fn knots(&self) -> usize {
        self.inputs.len()
    }

    pub fn positions(&self) -> Vec<Vector2<f64>> {
        self.states.iter().map(AgentState::position).collect()
    }

    /// Largest deviation from the discrete dynamics between consecutive knots.
    pub fn dynamics_defect(&self) -> f64 {
        let Ok(d) = discretize(self.dt) else {
            return f64::INFINITY;
        };
        self.inputs
            .iter()
            .enumerate()
            .map(|(k, u)| {
                let next = crate::model::step(&self.states[k], u, &d);
                (next.to_vector() - self.states[k + 1].to_vector()).amax()
            })
            .fold(0.0, f64::max)
    }

    /// One knot later in time; the last knot is duplicated.
    pub fn shifted(&self) -> Self {
        let mut states = self.states[1..].to_vec();
        states.push(*self.states.last().expect("K >= 1"));
        let mut inputs = self.inputs[1..].to_vec();
        inputs.push(*self.inputs.last().expect("K >= 1"));
        Self {
            dt: self.dt,
            states,
            inputs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    M1,
    M20,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmConfig {
    /// Rounds per MPC step.
    pub m: usize,
    /// Rounds before the first step.
    pub m_pre: usize,
    pub mu: f64,
    pub q: Matrix4<f64>,
    pub rw: Matrix2<f64>,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self::preset(Preset::M20)
    }
}

impl AdmmConfig {
    pub fn preset(p: Preset) -> Self {
        let (m, mu) = match p {
            Preset::M1 => (1, 1.0),
            Preset::M20 => (20, 40.0),
        };
        Self {
            m,
            m_pre: 50,
            mu,
            q: Matrix4::from_diagonal(&nalgebra::Vector4::new(1.0, 1.0, 0.0, 0.0)),
            rw: Matrix2::identity() * 1e-4,
        }
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        if self.m < 1 {
            return Err(PlanError::scenario("admm.m", "must be at least 1"));
        }
        if !(self.mu > 0.0) || !self.mu.is_finite() {
            return Err(PlanError::scenario("admm.mu", "must be positive"));
        }
        let qs = (self.q + self.q.transpose()) * 0.5;
        if (self.q - self.q.transpose()).amax() > 1e-12
            || qs.symmetric_eigenvalues().min() < -1e-12
            || !self.q.iter().all(|v| v.is_finite())
        {
            return Err(PlanError::scenario("admm.Q", "must be symmetric positive semidefinite"));
        }
        if (self.rw - self.rw.transpose()).amax() > 1e-12
            || self.rw.symmetric_eigenvalues().min() <= 0.0
            || !self.rw.iter().all(|v| v.is_finite())
        {
            return Err(PlanError::scenario("admm.Rw", "must be symmetric positive definite"));
        }
        Ok(())
    }
}

/// Agent `i`'s copies of its own positions and of every neighbour's, with duals.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusSet {
    /// All other agents, increasing id.
    pub neighbours: Vec<usize>,
    pub z_self: Vec<Vector2<f64>>,
    pub lam_self: Vec<Vector2<f64>>,
    /// `[neighbour slot][knot]`.
    pub z_other: Vec<Vec<Vector2<f64>>>,
    pub lam_other: Vec<Vec<Vector2<f64>>>,
}

impl ConsensusSet {
    /// Copies equal to the given planned positions, duals zero.
    pub fn from_plans(agent: usize, plans: &[Vec<Vector2<f64>>]) -> Self {
        let knots = plans[agent].len();
        let neighbours: Vec<usize> = (0..plans.len()).filter(|&j| j != agent).collect();
        Self {
            z_self: plans[agent].clone(),
            lam_self: vec![Vector2::zeros(); knots],
            z_other: neighbours.iter().map(|&j| plans[j].clone()).collect(),
            lam_other: vec![vec![Vector2::zeros(); knots]; neighbours.len()],
            neighbours,
        }
    }

    /// Slot of neighbour `j` in this set.
    pub fn slot_of(&self, owner: usize, j: usize) -> usize {
        debug_assert_ne!(owner, j);
        if j < owner {
            j
        } else {
            j - 1
        }
    }

    pub fn knots(&self) -> usize {
        self.z_self.len()
    }

    /// `λ ← λ + μ(p − z)` for the own copy and every neighbour copy.
    pub fn dual_update(&mut self, own: &[Vector2<f64>], others: &[&[Vector2<f64>]], mu: f64) {
        for k in 0..self.knots() {
            self.lam_self[k] += (own[k] - self.z_self[k]) * mu;
        }
        for (s, p) in others.iter().enumerate() {
            for k in 0..self.knots() {
                self.lam_other[s][k] += (p[k] - self.z_other[s][k]) * mu;
            }
        }
    }

    /// Largest `‖p − z‖` over all copies and knots.
    pub fn residual(&self, own: &[Vector2<f64>], others: &[&[Vector2<f64>]]) -> f64 {
        let mut r: f64 = 0.0;
        for k in 0..self.knots() {
            r = r.max((own[k] - self.z_self[k]).norm());
            for (s, p) in others.iter().enumerate() {
                r = r.max((p[k] - self.z_other[s][k]).norm());
            }
        }
        r
    }

    /// Moves every copy and dual one knot forward, duplicating the last.
    pub fn shift(&mut self) {
        fn shift_vec(v: &mut [Vector2<f64>]) {
            if v.len() > 1 {
                v.rotate_left(1);
                let n = v.len();
                v[n - 1] = v[n - 2];
            }
        }
        shift_vec(&mut self.z_self);
        shift_vec(&mut self.lam_self);
        for v in self.z_other.iter_mut().chain(self.lam_other.iter_mut()) {
            shift_vec(v);
        }
    }
}

/// Z-update for one agent against published plans: per-knot separation of `p + λ/μ`.
pub fn z_update(agent: usize, set: &ConsensusSet, plans: &[Vec<Vector2<f64>>], mu: f64, d: f64) -> ConsensusSet {
    let mut out = set.clone();
    let mut b = vec![Vector2::zeros(); set.neighbours.len()];
    for k in 0..set.knots() {
        let a = plans[agent][k] + set.lam_self[k] / mu;
        for (s, &j) in set.neighbours.iter().enumerate() {
            b[s] = plans[j][k] + set.lam_other[s][k] / mu;
        }
        let (zi, zj) = zupdate::separate_knot(a, &b, d);
        out.z_self[k] = zi;
        for (s, z) in zj.into_iter().enumerate() {
            out.z_other[s][k] = z;
        }
    }
    out
}

/// Per-agent inputs of one X-update.
#[derive(Debug, Clone, Copy)]
pub struct AgentContext {
    pub state: AgentState,
    pub target: AgentState,
    pub bounds: Option<PositionBounds>,
}

#[derive(Debug, Clone)]
pub struct RoundStats {
    /// Largest consensus residual over agents.
    pub residual: f64,
    pub agent_residuals: Vec<f64>,
    pub x_time: Vec<Duration>,
    pub z_time: Vec<Duration>,
}

/// Copies and duals before and after one dual step, for audit.
#[derive(Debug, Clone, PartialEq)]
pub struct DualRecord {
    pub mpc_step: u64,
    pub round: usize,
    pub agent: usize,
    pub before: ConsensusSet,
    pub after: ConsensusSet,
    pub plans: Vec<Vec<Vector2<f64>>>,
}

/// Result of the rounds of one MPC step.
#[derive(Debug, Clone)]
pub struct StepPlan {
    /// First input of each agent's latest X-update.
    pub inputs: Vec<ControlInput>,
    pub trajectories: Vec<KnotTrajectory>,
    /// Largest consensus residual after each round.
    pub residuals: Vec<f64>,
    /// Per-round, per-agent consensus residuals.
    pub agent_residuals: Vec<Vec<f64>>,
    /// Summed X- and Z-update time of each agent over the rounds.
    pub agent_time: Vec<Duration>,
}

pub struct AdmmPlanner {
    cfg: AdmmConfig,
    params: AgentParams,
    knots: usize,
    dt: f64,
    problem: XUpdateProblem,
    board: SharedBoard,
    warm: Vec<Option<WarmStart>>,
    trajectories: Vec<Option<KnotTrajectory>>,
    mpc_step: u64,
    round: usize,
    pool: Option<rayon::ThreadPool>,
    trace: Option<Vec<DualRecord>>,
}

impl AdmmPlanner {
    /// Copies start on the straight line from each agent's position to its target, duals at zero.
    pub fn new(
        cfg: AdmmConfig,
        params: AgentParams,
        horizon: Horizon,
        contexts: &[AgentContext],
    ) -> Result<Self, PlanError> {
        cfg.validate()?;
        params.validate()?;
        let knots = horizon.knots()?;
        let dynamics = discretize(horizon.dt)?;
        let n = contexts.len();
        let problem = XUpdateProblem::new(knots, dynamics, cfg.mu, n.max(1), cfg.q, cfg.rw)?;
        let plans: Vec<Vec<Vector2<f64>>> = contexts
            .iter()
            .map(|c| {
                let (p0, pf) = (c.state.position(), c.target.position());
                (0..=knots)
                    .map(|k| p0 + (pf - p0) * (k as f64 / knots as f64))
                    .collect()
            })
            .collect();
        let board = SharedBoard::new(
            (0..n)
                .map(|i| AgentSlot {
                    plan: plans[i].clone(),
                    consensus: ConsensusSet::from_plans(i, &plans),
                    plan_stamp: Stamp::default(),
                    consensus_stamp: Stamp::default(),
                })
                .collect(),
        );
        Ok(Self {
            cfg,
            params,
            knots,
            dt: horizon.dt,
            problem,
            board,
            warm: vec![None; n],
            trajectories: vec![None; n],
            mpc_step: 0,
            round: 0,
            pool: None,
            trace: None,
        })
    }

    /// Runs each phase on a pool of `workers` threads; 1 keeps everything on the caller.
    pub fn with_workers(mut self, workers: usize) -> Self {
        self.pool = (workers > 1)
            .then(|| rayon::ThreadPoolBuilder::new().num_threads(workers).build().ok())
            .flatten();
        self
    }

    /// Records every dual step from now on.
    pub fn record_duals(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn take_dual_records(&mut self) -> Vec<DualRecord> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn config(&self) -> &AdmmConfig {
        &self.cfg
    }

    pub fn board(&self) -> &SharedBoard {
        &self.board
    }

    pub fn knots(&self) -> usize {
        self.knots
    }

    pub fn agent_count(&self) -> usize {
        self.board.len()
    }

    /// X-update of one agent against the current board, without publishing.
    pub fn x_update(&self, agent: usize, ctx: &AgentContext) -> Result<KnotTrajectory, PlanError> {
        self.solve_x(agent, ctx).map(|(t, _)| t)
    }

    fn solve_x(&self, agent: usize, ctx: &AgentContext) -> Result<(KnotTrajectory, WarmStart), PlanError> {
        let slots = self.board.slots();
        let own = &slots[agent].consensus;
        let mut copies = Vec::with_capacity(slots.len());
        copies.push(CopyTerm {
            z: &own.z_self,
            lam: &own.lam_self,
        });
        for (j, slot) in slots.iter().enumerate() {
            if j == agent {
                continue;
            }
            let s = slot.consensus.slot_of(j, agent);
            copies.push(CopyTerm {
                z: &slot.consensus.z_other[s],
                lam: &slot.consensus.lam_other[s],
            });
        }
        let (traj, report) = self
            .problem
            .solve(
                &ctx.state,
                &ctx.target,
                &copies,
                ctx.bounds.as_ref(),
                &self.params,
                self.warm[agent].as_ref(),
            )
            .map_err(|detail| PlanError::Solver {
                agent,
                stage: "x-update",
                detail,
            })?;
        Ok((traj, WarmStart::from_report(&report)))
    }

    fn run_phase<T: Send>(&self, n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
        match &self.pool {
            Some(pool) => pool.install(|| (0..n).into_par_iter().map(&f).collect()),
            None => (0..n).map(f).collect(),
        }
    }

    /// One X phase and one Z/dual phase.
    pub fn round(&mut self, contexts: &[AgentContext]) -> Result<RoundStats, PlanError> {
        let n = self.board.len();
        let iter = self.round;
        let stamp_x = Stamp::new(self.mpc_step, iter, Phase::X);
        let stamp_z = Stamp::new(self.mpc_step, iter, Phase::Z);

        self.board.assert_readable(stamp_x);
        let xs = self.run_phase(n, |i| {
            let t0 = Instant::now();
            let r = self.solve_x(i, &contexts[i]);
            (r, t0.elapsed())
        });
        let mut x_time = Vec::with_capacity(n);
        for (i, (r, dt)) in xs.into_iter().enumerate() {
            let (traj, warm) = r?;
            self.board.publish_plan(i, traj.positions(), stamp_x);
            self.trajectories[i] = Some(traj);
            self.warm[i] = Some(warm);
            x_time.push(dt);
        }

        self.board.assert_readable(stamp_z);
        let mu = self.cfg.mu;
        let d = self.params.safe_distance();
        let plans: Vec<Vec<Vector2<f64>>> = self.board.slots().iter().map(|s| s.plan.clone()).collect();
        let zs = self.run_phase(n, |i| {
            let t0 = Instant::now();
            let slot = &self.board.slots()[i];
            let mut next = z_update(i, &slot.consensus, &plans, mu, d);
            let others: Vec<&[Vector2<f64>]> = next.neighbours.iter().map(|&j| plans[j].as_slice()).collect();
            next.dual_update(&plans[i], &others, mu);
            let residual = next.residual(&plans[i], &others);
            (next, residual, t0.elapsed())
        });
        let mut agent_residuals = Vec::with_capacity(n);
        let mut z_time = Vec::with_capacity(n);
        for (i, (set, r, dt)) in zs.into_iter().enumerate() {
            if let Some(trace) = self.trace.as_mut() {
                trace.push(DualRecord {
                    mpc_step: self.mpc_step,
                    round: iter,
                    agent: i,
                    before: self.board.slots()[i].consensus.clone(),
                    after: set.clone(),
                    plans: plans.clone(),
                });
            }
            self.board.publish_consensus(i, set, stamp_z);
            agent_residuals.push(r);
            z_time.push(dt);
        }
        self.round += 1;
        Ok(RoundStats {
            residual: agent_residuals.iter().copied().fold(0.0, f64::max),
            agent_residuals,
            x_time,
            z_time,
        })
    }

    /// `m_pre` rounds before the first step, without advancing time.
    pub fn pre_iterate(&mut self, contexts: &[AgentContext]) -> Result<Vec<RoundStats>, PlanError> {
        (0..self.cfg.m_pre).map(|_| self.round(contexts)).collect()
    }

    /// Runs `m` rounds and returns the first input of every agent's plan.
    pub fn plan_step(&mut self, contexts: &[AgentContext]) -> Result<StepPlan, PlanError> {
        if self.mpc_step == 0 {
            self.mpc_step = 1;
            self.round = 0;
        }
        let n = self.board.len();
        let mut residuals = Vec::with_capacity(self.cfg.m);
        let mut agent_residuals = Vec::with_capacity(self.cfg.m);
        let mut agent_time = vec![Duration::ZERO; n];
        for _ in 0..self.cfg.m {
            let stats = self.round(contexts)?;
            residuals.push(stats.residual);
            agent_residuals.push(stats.agent_residuals);
            for i in 0..n {
                agent_time[i] += stats.x_time[i] + stats.z_time[i];
            }
        }
        let trajectories: Vec<KnotTrajectory> = self
            .trajectories
            .iter()
            .map(|t| t.clone().expect("every agent solved this step"))
            .collect();
        Ok(StepPlan {
            inputs: trajectories.iter().map(|t| t.inputs[0]).collect(),
            trajectories,
            residuals,
            agent_residuals,
            agent_time,
        })
    }

    /// Moves copies, duals and warm starts one knot forward for the next step.
    pub fn advance(&mut self, has_rect: &[bool]) {
        let stamp = Stamp::new(self.mpc_step, self.round, Phase::Shift);
        self.board.shift_all(stamp);
        for (i, w) in self.warm.iter_mut().enumerate() {
            if let Some(ws) = w.as_ref() {
                *w = Some(shift_warm_start(ws, self.knots, has_rect.get(i).copied().unwrap_or(false)));
            }
        }
        self.mpc_step += 1;
        self.round = 0;
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }
}
