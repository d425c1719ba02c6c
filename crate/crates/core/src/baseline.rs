//! Centralised MPC over all agents, solved by sequential convexification.
//!
//! Each pairwise distance constraint `‖p_i − p_j‖ ≥ d` is replaced by the supporting
//! halfspace at the current iterate, `n̂ᵀ(p_i − p_j) ≥ d` with `n̂` the unit direction
//! between the linearisation points. The halfspace lies inside the nonconvex feasible
//! set, so once an iterate is feasible every later one is too and the objective cannot
//! increase.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix4, Vector2};
use serde::{Deserialize, Serialize};

use crate::admm::xupdate::XUpdateProblem;
use crate::admm::KnotTrajectory;
use crate::arena::{braking_envelope, PositionBounds};
use crate::error::PlanError;
use crate::model::{discretize, AgentParams, AgentState, DiscreteDynamics, Horizon};
use crate::qsolve::{
    BallConstraint, EqualityReduction, PreparedQcqp, QcqpData, SolveStatus, SolverSettings, WarmStart,
};

pub const STEP_TOL: f64 = 1e-6;
pub const MAX_SQP_ITER: usize = 30;
pub const MERIT_WEIGHT: f64 = 1e4;
/// Collision margin of the centralised method.
pub const DEFAULT_MARGIN: f64 = 0.03;

/// Stacked problem structure for a fixed agent count and horizon.
#[derive(Debug, Clone)]
pub struct CentralProblem {
    agents: usize,
    knots: usize,
    dynamics: DiscreteDynamics,
    q: Matrix4<f64>,
    prepared: PreparedQcqp,
    /// Include pairwise separation rows.
    pub collisions: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentralSolution {
    pub trajectories: Vec<KnotTrajectory>,
    /// Objective of each accepted iterate.
    pub objectives: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Some pair is closer than `d − ε/2` at a planned knot.
    pub unsafe_step: bool,
    pub min_distance: f64,
}

impl CentralSolution {
    pub fn objective(&self) -> f64 {
        self.objectives.last().copied().unwrap_or(f64::NAN)
    }
}

impl CentralProblem {
    pub fn new(agents: usize, horizon: Horizon, q: Matrix4<f64>, rw: Matrix2<f64>) -> Result<Self, PlanError> {
        if agents == 0 {
            return Err(PlanError::scenario("agents", "at least one agent is required"));
        }
        let knots = horizon.knots()?;
        let dynamics = discretize(horizon.dt)?;
        // The single-agent block is the X-update without consensus terms.
        let single = XUpdateProblem::new(knots, dynamics, 1.0, 0, q, rw)?;
        let block = single.prepared();
        let nb = XUpdateProblem::dim_for(knots);
        let n = agents * nb;
        let mb = block.eq_matrix().nrows();
        let mut h = DMatrix::zeros(n, n);
        let mut eq_a = DMatrix::zeros(agents * mb, n);
        for a in 0..agents {
            h.view_mut((a * nb, a * nb), (nb, nb)).copy_from(block.hessian());
            eq_a.view_mut((a * mb, a * nb), (mb, nb)).copy_from(block.eq_matrix());
        }
        let blocks: Vec<&EqualityReduction> = (0..agents).map(|_| block.reduction()).collect();
        let reduction = EqualityReduction::block_diagonal(&blocks);
        let prepared = PreparedQcqp::with_reduction(h, eq_a, reduction)?;
        Ok(Self {
            agents,
            knots,
            dynamics,
            q,
            prepared,
            collisions: true,
        })
    }

    pub fn agents(&self) -> usize {
        self.agents
    }

    pub fn knots(&self) -> usize {
        self.knots
    }

    fn block_dim(&self) -> usize {
        XUpdateProblem::dim_for(self.knots)
    }

    fn pos_index(&self, agent: usize, k: usize) -> usize {
        agent * self.block_dim() + 4 * k
    }

    /// Sum of all agents' tracking costs at the stacked point `x`.
    pub fn objective(&self, x: &DVector<f64>, g: &DVector<f64>, constant: f64) -> f64 {
        0.5 * x.dot(&(self.prepared.hessian() * x)) + g.dot(x) + constant
    }

    /// Sum of pairwise distance shortfalls `max(0, d − ‖p_i − p_j‖)` over knots `1..=K`.
    fn violation(&self, x: &DVector<f64>, d: f64) -> f64 {
        let mut v = 0.0;
        for k in 1..=self.knots {
            for i in 0..self.agents {
                for j in i + 1..self.agents {
                    let dist = (self.position(x, i, k) - self.position(x, j, k)).norm();
                    v += (d - dist).max(0.0);
                }
            }
        }
        v
    }

    fn position(&self, x: &DVector<f64>, agent: usize, k: usize) -> Vector2<f64> {
        let s = self.pos_index(agent, k);
        Vector2::new(x[s], x[s + 1])
    }

    /// Solves one MPC step for all agents.
    ///
    /// `warm` holds one trajectory per agent, typically the previous solution shifted by a knot;
    /// without it the iteration starts from straight lines to the targets.
    pub fn solve_step(
        &self,
        x0s: &[AgentState],
        targets: &[AgentState],
        bounds: &[Option<PositionBounds>],
        params: &AgentParams,
        margin: f64,
        warm: Option<&[KnotTrajectory]>,
    ) -> Result<CentralSolution, PlanError> {
        let na = self.agents;
        if x0s.len() != na || targets.len() != na || bounds.len() != na {
            return Err(PlanError::scenario("agents", "agent count does not match the prepared problem"));
        }
        let nb = self.block_dim();
        let n = na * nb;
        let kn = self.knots;
        let d = 2.0 * params.radius + margin;

        let mut g = DVector::zeros(n);
        let mut constant = 0.0;
        let mut eq_b = DVector::zeros(self.prepared.eq_matrix().nrows());
        let mb = 4 * (kn + 1);
        let mut balls: Vec<BallConstraint> = Vec::with_capacity(2 * kn * na);
        for a in 0..na {
            let xf = targets[a].to_vector();
            let qxf = self.q * xf * -2.0;
            constant += (kn + 1) as f64 * xf.dot(&(self.q * xf));
            for k in 0..=kn {
                for c in 0..4 {
                    g[a * nb + 4 * k + c] = qxf[c];
                }
            }
            eq_b.rows_mut(a * mb, 4).copy_from(&x0s[a].to_vector());
            for b in XUpdateProblem::limit_balls(kn, params, &x0s[a], self.dynamics.dt) {
                let idx = b.indices.iter().map(|i| i + a * nb).collect();
                balls.push(BallConstraint::centered(idx, b.radius));
            }
        }

        // Under exact ZOH the position moves by the mean of consecutive velocities, so the
        // velocity limits bound how far an agent can get from its start by each knot.
        let reach: Vec<Vec<f64>> = x0s
            .iter()
            .map(|s| {
                let dt = self.dynamics.dt;
                let mut r = vec![0.0; kn + 1];
                let mut prev = s.velocity().norm();
                for k in 1..=kn {
                    let cur = XUpdateProblem::velocity_radius(params, s.velocity().norm(), k, dt);
                    r[k] = r[k - 1] + 0.5 * (prev + cur) * dt;
                    prev = cur;
                }
                r
            })
            .collect();
        // Pair-knot rows that no dynamically feasible plan can violate are left out.
        let mut pairs: Vec<(usize, usize, usize)> = Vec::new();
        if self.collisions {
            for i in 0..na {
                for j in i + 1..na {
                    let gap = (x0s[i].position() - x0s[j].position()).norm();
                    for k in 1..=kn {
                        if gap - reach[i][k] - reach[j][k] < d + 1e-6 {
                            pairs.push((i, j, k));
                        }
                    }
                }
            }
        }
        let rect_count: usize = bounds.iter().filter(|b| b.is_some()).count() * 4 * kn;
        let rows = rect_count + pairs.len();
        let mut in_a = DMatrix::zeros(rows, n);
        let mut in_b = DVector::zeros(rows);
        let mut r = 0;
        for (a, b) in bounds.iter().enumerate() {
            let Some(b) = b else { continue };
            let envelope = braking_envelope(b, &x0s[a], params.a_max, self.dynamics.dt, kn);
            for (k, b) in (1..=kn).zip(&envelope) {
                let s = self.pos_index(a, k);
                for ax in 0..2 {
                    in_a[(r, s + ax)] = 1.0;
                    in_b[r] = b.hi[ax];
                    in_a[(r + 1, s + ax)] = -1.0;
                    in_b[r + 1] = -b.lo[ax];
                    r += 2;
                }
            }
        }
        let collision_row0 = r;

        let line = |frac: &dyn Fn(usize) -> f64| {
            let mut x = DVector::zeros(n);
            for a in 0..na {
                let (p0, pf) = (x0s[a].position(), targets[a].position());
                for k in 0..=kn {
                    let p = p0 + (pf - p0) * frac(k);
                    let s = self.pos_index(a, k);
                    x[s] = p[0];
                    x[s + 1] = p[1];
                }
            }
            x
        };
        // Linearisation points in order of preference. Holding agents at their starts keeps
        // every separating direction consistent with the current configuration.
        let mut starts: Vec<DVector<f64>> = Vec::with_capacity(3);
        if let Some(w) = warm.filter(|w| w.len() == na) {
            let mut x = DVector::zeros(n);
            for (a, t) in w.iter().enumerate() {
                x.rows_mut(a * nb, nb).copy_from(&t.to_decision());
            }
            starts.push(x);
        }
        starts.push(line(&|_| 0.0));
        starts.push(line(&|k| k as f64 / kn as f64));
        starts.reverse();
        let mut x = starts.pop().expect("at least one start");
        // The linearisation point need not satisfy the dynamics, so the first step is taken in full.
        let mut feasible_start = false;
        let mut objectives = Vec::new();
        let mut warm_qp: Option<WarmStart> = None;
        let settings = SolverSettings::default();
        let mut converged = false;
        let mut iterations = 0;
        let merit = |x: &DVector<f64>| self.objective(x, &g, constant) + MERIT_WEIGHT * self.violation(x, d);

        for it in 0..MAX_SQP_ITER {
            iterations = it + 1;
            let mut rr = collision_row0;
            for &(i, j, k) in &pairs {
                let diff = self.position(&x, i, k) - self.position(&x, j, k);
                let dist = diff.norm();
                let nhat = if dist > 1e-12 { diff / dist } else { Vector2::x() };
                let (si, sj) = (self.pos_index(i, k), self.pos_index(j, k));
                // −n̂ᵀp_i + n̂ᵀp_j ≤ −d
                for ax in 0..2 {
                    in_a[(rr, si + ax)] = -nhat[ax];
                    in_a[(rr, sj + ax)] = nhat[ax];
                }
                in_b[rr] = -d;
                rr += 1;
            }
            let report = self.prepared.solve(
                &QcqpData {
                    g: &g,
                    eq_b: &eq_b,
                    in_a: &in_a,
                    in_b: &in_b,
                    balls: &balls,
                },
                &settings,
                warm_qp.as_ref(),
            );
            let usable = match report.status {
                SolveStatus::Optimal => true,
                SolveStatus::MaxIter => report.kkt_feasibility <= 1e-6,
                SolveStatus::Infeasible => false,
            };
            if !usable {
                if objectives.is_empty() {
                    if let Some(next) = starts.pop() {
                        x = next;
                        warm_qp = None;
                        continue;
                    }
                    return Err(PlanError::Solver {
                        agent: 0,
                        stage: "centralised step",
                        detail: format!(
                            "{:?} on the first convexification (feasibility {:.3e})",
                            report.status, report.kkt_feasibility
                        ),
                    });
                }
                log::debug!("centralised SQP stalled at iteration {it}");
                break;
            }
            warm_qp = Some(WarmStart::from_report(&report));
            let step = &report.x - &x;
            let mut alpha = 1.0;
            if feasible_start {
                let m0 = merit(&x);
                while alpha > 1e-4 && merit(&(&x + &step * alpha)) > m0 + 1e-12 * m0.abs().max(1.0) {
                    alpha *= 0.5;
                }
                if alpha <= 1e-4 {
                    log::debug!("centralised SQP line search failed at iteration {it}");
                    break;
                }
            }
            let moved = step.amax() * alpha;
            x += &step * alpha;
            feasible_start = true;
            objectives.push(self.objective(&x, &g, constant));
            if moved < STEP_TOL {
                converged = true;
                break;
            }
        }

        let trajectories: Vec<KnotTrajectory> = (0..na)
            .map(|a| KnotTrajectory::from_decision(&x.rows(a * nb, nb).into_owned(), kn, self.dynamics.dt))
            .collect();
        let mut min_distance = f64::INFINITY;
        for k in 1..=kn {
            for i in 0..na {
                for j in i + 1..na {
                    min_distance = min_distance.min((self.position(&x, i, k) - self.position(&x, j, k)).norm());
                }
            }
        }
        Ok(CentralSolution {
            trajectories,
            objectives,
            iterations,
            converged,
            unsafe_step: d - min_distance > 0.5 * margin,
            min_distance,
        })
    }
}

/// One-shot convenience wrapper around [`CentralProblem`].
#[allow(clippy::too_many_arguments)]
pub fn solve_centralized_step(
    x0s: &[AgentState],
    targets: &[AgentState],
    params: &AgentParams,
    horizon: Horizon,
    q: Matrix4<f64>,
    rw: Matrix2<f64>,
    margin: f64,
    warm: Option<&[KnotTrajectory]>,
) -> Result<CentralSolution, PlanError> {
    let problem = CentralProblem::new(x0s.len(), horizon, q, rw)?;
    problem.solve_step(x0s, targets, &vec![None; x0s.len()], params, margin, warm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::admm::AdmmConfig;

    fn weights() -> (Matrix4<f64>, Matrix2<f64>) {
        let c = AdmmConfig::default();
        (c.q, c.rw)
    }

    #[test]
    fn agents_at_rest_on_targets_stay_put() {
        let (q, rw) = weights();
        let x0 = [AgentState::at_rest(0.0, 0.0), AgentState::at_rest(1.0, 0.0)];
        let sol = solve_centralized_step(&x0, &x0, &AgentParams::default(), Horizon::default(), q, rw, DEFAULT_MARGIN, None)
            .unwrap();
        for t in &sol.trajectories {
            for u in &t.inputs {
                assert!(u.norm() < 1e-8, "{u:?}");
            }
        }
        assert!(sol.objective().abs() < 1e-10);
        assert!(sol.converged);
    }

    #[test]
    fn stacked_dimension() {
        let (q, rw) = weights();
        let p = CentralProblem::new(3, Horizon::default(), q, rw).unwrap();
        assert_eq!(p.prepared.dim(), 3 * (6 * 10 + 4));
    }
}
