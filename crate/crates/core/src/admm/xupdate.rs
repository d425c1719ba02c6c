//! Per-agent tracking OCP with augmented-Lagrangian consensus terms.
//!
//! Decision vector: knot states `x_0..x_K` at `4k`, then inputs `u_0..u_{K-1}` at
//! `4(K+1) + 2k`.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix4, Vector2};

use crate::arena::{braking_envelope, PositionBounds};
use crate::error::PlanError;
use crate::model::{AgentParams, AgentState, ControlInput, DiscreteDynamics};
use crate::qsolve::{BallConstraint, PreparedQcqp, QcqpData, SolveReport, SolveStatus, SolverSettings, WarmStart};

use super::KnotTrajectory;

/// Position copies and duals of one consensus term, one entry per knot.
#[derive(Debug, Clone, Copy)]
pub struct CopyTerm<'a> {
    pub z: &'a [Vector2<f64>],
    pub lam: &'a [Vector2<f64>],
}

/// Structure shared by every agent's X-update for fixed horizon, weights and copy count.
#[derive(Debug, Clone)]
pub struct XUpdateProblem {
    knots: usize,
    dynamics: DiscreteDynamics,
    mu: f64,
    q: Matrix4<f64>,
    prepared: PreparedQcqp,
    rect_rows: DMatrix<f64>,
}

impl XUpdateProblem {
    pub fn new(
        knots: usize,
        dynamics: DiscreteDynamics,
        mu: f64,
        copies: usize,
        q: Matrix4<f64>,
        rw: Matrix2<f64>,
    ) -> Result<Self, PlanError> {
        let n = Self::dim_for(knots);
        let mut h = DMatrix::zeros(n, n);
        for k in 0..=knots {
            let s = 4 * k;
            h.view_mut((s, s), (4, 4)).copy_from(&(q * 2.0));
            for a in 0..2 {
                h[(s + a, s + a)] += mu * copies as f64;
            }
        }
        for k in 0..knots {
            let s = Self::input_index(knots, k);
            h.view_mut((s, s), (2, 2)).copy_from(&(rw * 2.0));
        }
        let mut eq_a = DMatrix::zeros(4 * (knots + 1), n);
        for a in 0..4 {
            eq_a[(a, a)] = 1.0;
        }
        for k in 0..knots {
            let row = 4 * (k + 1);
            let ui = Self::input_index(knots, k);
            for r in 0..4 {
                eq_a[(row + r, 4 * (k + 1) + r)] = 1.0;
                for c in 0..4 {
                    eq_a[(row + r, 4 * k + c)] = -dynamics.ad[(r, c)];
                }
                for c in 0..2 {
                    eq_a[(row + r, ui + c)] = -dynamics.bd[(r, c)];
                }
            }
        }
        let prepared = PreparedQcqp::new(h, &eq_a)?;
        let mut rect_rows = DMatrix::zeros(4 * knots, n);
        for k in 1..=knots {
            let row = 4 * (k - 1);
            for a in 0..2 {
                rect_rows[(row + a, 4 * k + a)] = 1.0;
                rect_rows[(row + 2 + a, 4 * k + a)] = -1.0;
            }
        }
        Ok(Self {
            knots,
            dynamics,
            mu,
            q,
            prepared,
            rect_rows,
        })
    }

    pub fn dim_for(knots: usize) -> usize {
        6 * knots + 4
    }

    pub fn input_index(knots: usize, k: usize) -> usize {
        4 * (knots + 1) + 2 * k
    }

    pub fn knots(&self) -> usize {
        self.knots
    }

    pub fn prepared(&self) -> &PreparedQcqp {
        &self.prepared
    }

    /// Velocity radius at knot `k`. Above `v_max` only while an initial overspeed
    /// is being braked off at `a_max`.
    pub fn velocity_radius(params: &AgentParams, v0: f64, k: usize, dt: f64) -> f64 {
        params.v_max.max(v0 - k as f64 * params.a_max * dt)
    }

    /// Limit balls: velocity at knots `1..=K`, then acceleration at inputs `0..K`.
    pub fn limit_balls(knots: usize, params: &AgentParams, x0: &AgentState, dt: f64) -> Vec<BallConstraint> {
        let v0 = x0.velocity().norm();
        let mut balls = Vec::with_capacity(2 * knots);
        for k in 1..=knots {
            balls.push(BallConstraint::centered(
                vec![4 * k + 2, 4 * k + 3],
                Self::velocity_radius(params, v0, k, dt),
            ));
        }
        for k in 0..knots {
            let s = Self::input_index(knots, k);
            balls.push(BallConstraint::centered(vec![s, s + 1], params.a_max));
        }
        balls
    }

    pub fn solve(
        &self,
        x0: &AgentState,
        target: &AgentState,
        copies: &[CopyTerm<'_>],
        bounds: Option<&PositionBounds>,
        params: &AgentParams,
        warm: Option<&WarmStart>,
    ) -> Result<(KnotTrajectory, SolveReport), String> {
        let kn = self.knots;
        let n = Self::dim_for(kn);
        let mut g = DVector::zeros(n);
        let qxf = self.q * target.to_vector() * -2.0;
        for k in 0..=kn {
            for a in 0..4 {
                g[4 * k + a] = qxf[a];
            }
            for c in copies {
                let pull = c.lam[k] - c.z[k] * self.mu;
                g[4 * k] += pull[0];
                g[4 * k + 1] += pull[1];
            }
        }
        let mut eq_b = DVector::zeros(4 * (kn + 1));
        eq_b.rows_mut(0, 4).copy_from(&x0.to_vector());

        let empty_rows = DMatrix::zeros(0, n);
        let (in_a, in_b) = match bounds {
            Some(b) => {
                let mut rhs = DVector::zeros(4 * kn);
                let envelope = braking_envelope(b, x0, params.a_max, self.dynamics.dt, kn);
                for (k, b) in envelope.iter().enumerate() {
                    rhs[4 * k] = b.hi[0];
                    rhs[4 * k + 1] = b.hi[1];
                    rhs[4 * k + 2] = -b.lo[0];
                    rhs[4 * k + 3] = -b.lo[1];
                }
                (&self.rect_rows, rhs)
            }
            None => (&empty_rows, DVector::zeros(0)),
        };
        let balls = Self::limit_balls(kn, params, x0, self.dynamics.dt);
        let data = QcqpData {
            g: &g,
            eq_b: &eq_b,
            in_a,
            in_b: &in_b,
            balls: &balls,
        };
        let report = self.prepared.solve(&data, &SolverSettings::default(), warm);
        match report.status {
            SolveStatus::Optimal => {}
            SolveStatus::MaxIter if report.kkt_feasibility <= 1e-6 => {
                log::debug!("x-update stopped at iteration cap, residual {:.2e}", report.max_residual());
            }
            status => {
                return Err(format!(
                    "{status:?} (feasibility {:.3e}, stationarity {:.3e})",
                    report.kkt_feasibility, report.kkt_stationarity
                ))
            }
        }
        Ok((KnotTrajectory::from_decision(&report.x, kn, self.dynamics.dt), report))
    }
}

impl KnotTrajectory {
    /// Unpacks a decision vector in the X-update layout.
    pub fn from_decision(x: &DVector<f64>, knots: usize, dt: f64) -> Self {
        let states = (0..=knots)
            .map(|k| AgentState::new(x[4 * k], x[4 * k + 1], x[4 * k + 2], x[4 * k + 3]))
            .collect();
        let inputs = (0..knots)
            .map(|k| {
                let s = XUpdateProblem::input_index(knots, k);
                ControlInput::new(x[s], x[s + 1])
            })
            .collect();
        Self { dt, states, inputs }
    }

    /// Packs into the X-update decision layout.
    pub fn to_decision(&self) -> DVector<f64> {
        let kn = self.inputs.len();
        let mut x = DVector::zeros(XUpdateProblem::dim_for(kn));
        for (k, s) in self.states.iter().enumerate() {
            x.rows_mut(4 * k, 4).copy_from(&s.to_vector());
        }
        for (k, u) in self.inputs.iter().enumerate() {
            let s = XUpdateProblem::input_index(kn, k);
            x[s] = u.ax;
            x[s + 1] = u.ay;
        }
        x
    }
}

/// Moves a warm start one knot forward in time, duplicating the last knot.
pub fn shift_warm_start(warm: &WarmStart, knots: usize, has_rect: bool) -> WarmStart {
    let x = warm.x.as_ref().map(|x| {
        let traj = KnotTrajectory::from_decision(x, knots, 0.0);
        traj.shifted().to_decision()
    });
    let rect_rows = if has_rect { 4 * knots } else { 0 };
    let linear = warm
        .working_set
        .linear
        .iter()
        .filter(|&&j| j >= 4 && j < rect_rows)
        .map(|j| j - 4)
        .collect();
    let shift_block = |b: usize| -> Option<usize> {
        let (base, off) = if b < knots { (0, b) } else { (knots, b - knots) };
        (off >= 1).then(|| base + off - 1)
    };
    let balls = warm.working_set.balls.iter().filter_map(|&b| shift_block(b)).collect();
    let mut mult = vec![0.0; warm.ball_multipliers.len()];
    if mult.len() == 2 * knots {
        for b in 0..2 * knots {
            if let Some(t) = shift_block(b) {
                mult[t] = warm.ball_multipliers[b];
            }
        }
        // the duplicated last knot keeps its own multiplier
        mult[knots - 1] = warm.ball_multipliers[knots - 1];
        mult[2 * knots - 1] = warm.ball_multipliers[2 * knots - 1];
    }
    WarmStart {
        x,
        working_set: crate::qsolve::WorkingSet { linear, balls },
        ball_multipliers: mult,
    }
}
