use serde::{Deserialize, Serialize};

use super::{EpisodeLog, ARRIVAL_TOL};
use crate::model::AgentParams;

/// Corrections at or below this count as no filter action.
pub const ACTIVITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollisionSummary {
    /// Logged times at which some pair is closer than `2R`.
    pub collisions: usize,
    /// Logged times at which some pair is closer than `2R + ε`.
    pub constraint_violations: usize,
    /// Smallest pairwise distance over the episode, infinite for a single agent.
    pub min_distance: f64,
}

pub fn collision_check(log: &EpisodeLog, params: &AgentParams) -> CollisionSummary {
    let contact = params.contact_distance();
    let safe = params.safe_distance();
    let mut out = CollisionSummary {
        collisions: 0,
        constraint_violations: 0,
        min_distance: f64::INFINITY,
    };
    for states in log.state_history() {
        let mut closest = f64::INFINITY;
        for i in 0..states.len() {
            for j in i + 1..states.len() {
                closest = closest.min((states[i].position() - states[j].position()).norm());
            }
        }
        out.collisions += usize::from(closest < contact);
        out.constraint_violations += usize::from(closest < safe);
        out.min_distance = out.min_distance.min(closest);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub steps: usize,
    pub arrived: bool,
    pub timed_out: bool,
    /// Simulated seconds until every agent arrived; absent when they did not.
    pub transit_time: Option<f64>,
    pub avg_step_time: f64,
    pub max_step_time: f64,
    pub pre_time: f64,
    pub collisions: usize,
    pub constraint_violations: usize,
    pub min_distance: f64,
    /// Percentage of steps in which the filter changed some input.
    pub filter_activity: f64,
    /// Mean over active steps of the largest per-agent correction, 0 without active steps.
    pub avg_correction: f64,
    pub soft_steps: usize,
    pub unsafe_steps: usize,
    /// Largest distance of a logged position outside its corridor's shrunk bounds.
    pub arena_violation: f64,
    /// Fraction of steps whose median residual did not grow from the first to the last round.
    pub residual_trend: Option<f64>,
}

pub fn compute_metrics(log: &EpisodeLog) -> EpisodeSummary {
    let collisions = collision_check(log, &log.params);
    let n_steps = log.steps.len();
    let arrived = log
        .final_states
        .iter()
        .zip(&log.targets)
        .all(|(s, t)| s.squared_error(t) < ARRIVAL_TOL);

    let step_times: Vec<f64> = log.steps.iter().map(|s| s.step_time).collect();
    let avg_step_time = if n_steps == 0 { 0.0 } else { step_times.iter().sum::<f64>() / n_steps as f64 };
    let max_step_time = step_times.iter().copied().fold(0.0, f64::max);

    let active: Vec<f64> = log
        .steps
        .iter()
        .map(|s| s.corrections.iter().copied().fold(0.0, f64::max))
        .filter(|&c| c > ACTIVITY_TOL)
        .collect();
    let filter_activity = if n_steps == 0 { 0.0 } else { 100.0 * active.len() as f64 / n_steps as f64 };
    let avg_correction = if active.is_empty() { 0.0 } else { active.iter().sum::<f64>() / active.len() as f64 };

    // Each position is checked against the corridor that produced it and the one it is next held to.
    let mut arena_violation: f64 = 0.0;
    if !log.bounds.is_empty() {
        for (k, s) in log.steps.iter().enumerate() {
            let next = log.steps.get(k + 1).map_or(log.final_states.as_slice(), |n| n.states.as_slice());
            for (a, &c) in s.corridors.iter().enumerate() {
                let b = &log.bounds[c];
                arena_violation = arena_violation
                    .max(b.violation([s.states[a].px, s.states[a].py]))
                    .max(b.violation([next[a].px, next[a].py]));
            }
        }
    }

    let trends: Vec<bool> = log
        .steps
        .iter()
        .filter_map(|s| match (s.median_residuals.first(), s.median_residuals.last()) {
            (Some(first), Some(last)) => Some(last <= first),
            _ => None,
        })
        .collect();
    let residual_trend = if trends.is_empty() {
        None
    } else {
        Some(trends.iter().filter(|&&t| t).count() as f64 / trends.len() as f64)
    };

    EpisodeSummary {
        steps: n_steps,
        arrived,
        timed_out: log.timed_out,
        transit_time: arrived.then(|| n_steps as f64 * log.dt),
        avg_step_time,
        max_step_time,
        pre_time: log.pre_time,
        collisions: collisions.collisions,
        constraint_violations: collisions.constraint_violations,
        min_distance: collisions.min_distance,
        filter_activity,
        avg_correction,
        soft_steps: log.steps.iter().filter(|s| s.soft).count(),
        unsafe_steps: log.steps.iter().filter(|s| s.unsafe_step).count(),
        arena_violation,
        residual_trend,
    }
}
