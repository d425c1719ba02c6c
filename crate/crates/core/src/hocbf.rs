//! Second-order barrier constraints between agent pairs and the centralised safety filter.
//!
//! For a pair `(i, j)` with `h = ‖p_i − p_j‖² − (2R+ε)²` the filter enforces
//!
//! ```text
//!     ḧ + (K1 + K2) ḣ + K1 K2 h ≥ 0,    ḧ = c0 + ciᵀu_i + cjᵀu_j,
//! ```
//!
//! which is affine in the inputs of both agents.

use nalgebra::{DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::arena::InputBounds;
use crate::error::PlanError;
use crate::model::{AgentParams, AgentState, ControlInput};
use crate::qsolve::{BallConstraint, PreparedQcqp, QcqpData, SolveStatus, SolverSettings};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub k1: f64,
    pub k2: f64,
    pub a_peak: f64,
    pub soft_penalty: f64,
    pub dt: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            k1: 8.0,
            k2: 7.0,
            a_peak: 8.0,
            soft_penalty: 1e6,
            dt: 0.1,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), PlanError> {
        let checks = [
            ("filter.K1", self.k1),
            ("filter.K2", self.k2),
            ("filter.soft_penalty", self.soft_penalty),
            ("params.a_peak", self.a_peak),
        ];
        for (field, v) in checks {
            if !(v > 0.0) || !v.is_finite() {
                return Err(PlanError::scenario(field, "must be positive"));
            }
        }
        Ok(())
    }
}

/// Barrier value, its rate, and the parts of its second derivative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairBarrier {
    pub i: usize,
    pub j: usize,
    pub h: f64,
    pub hdot: f64,
    /// Input-independent part of `ḧ`.
    pub c0: f64,
    pub ci: Vector2<f64>,
    pub cj: Vector2<f64>,
}

impl PairBarrier {
    pub fn new(i: usize, j: usize, si: &AgentState, sj: &AgentState, params: &AgentParams) -> Self {
        let h = barrier_value(&si.position(), &sj.position(), params);
        let (hdot, c0, ci, cj) = barrier_rates(si, sj);
        Self {
            i,
            j,
            h,
            hdot,
            c0,
            ci,
            cj,
        }
    }

    /// `ψ₁ = ḣ + K1 h`.
    pub fn psi1(&self, cfg: &FilterConfig) -> f64 {
        self.hdot + cfg.k1 * self.h
    }

    /// Constant part of `ψ₂ = ḧ + (K1+K2)ḣ + K1K2 h`.
    pub fn constant(&self, cfg: &FilterConfig) -> f64 {
        self.c0 + (cfg.k1 + cfg.k2) * self.hdot + cfg.k1 * cfg.k2 * self.h
    }

    /// `ψ₂` under the given inputs.
    pub fn psi2(&self, cfg: &FilterConfig, ui: &ControlInput, uj: &ControlInput) -> f64 {
        self.constant(cfg) + self.ci.dot(&ui.to_vector()) + self.cj.dot(&uj.to_vector())
    }

    /// True when no inputs within `‖u‖ ≤ a_peak` can violate the constraint by a wide margin.
    pub fn is_slack(&self, cfg: &FilterConfig) -> bool {
        self.constant(cfg) > 10.0 * (self.ci.norm() + self.cj.norm()) * cfg.a_peak
    }
}

/// `‖p_i − p_j‖² − (2R+ε)²`.
pub fn barrier_value(pi: &Vector2<f64>, pj: &Vector2<f64>, params: &AgentParams) -> f64 {
    let d = params.safe_distance();
    (pi - pj).norm_squared() - d * d
}

/// `(ḣ, c0, ci, cj)` with `ḣ = 2Δpᵀ Δv`, `c0 = 2‖Δv‖²`, `ci = 2Δp = −cj`.
pub fn barrier_rates(si: &AgentState, sj: &AgentState) -> (f64, f64, Vector2<f64>, Vector2<f64>) {
    let dp = si.position() - sj.position();
    let dv = si.velocity() - sj.velocity();
    let ci = dp * 2.0;
    (2.0 * dp.dot(&dv), 2.0 * dv.norm_squared(), ci, -ci)
}

/// One barrier per unordered pair `i < j`.
pub fn assemble_constraints(states: &[AgentState], params: &AgentParams) -> Vec<PairBarrier> {
    let n = states.len();
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            out.push(PairBarrier::new(i, j, &states[i], &states[j], params));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    /// Some input moved by more than `1e-9`.
    pub active: bool,
    /// `‖u_i − u_i*‖` per agent.
    pub corrections: Vec<f64>,
    pub soft: bool,
    pub max_slack: f64,
    /// Pair constraints handed to the solver after pruning.
    pub pair_constraints: usize,
    pub pruned: usize,
}

impl FilterReport {
    pub fn max_correction(&self) -> f64 {
        self.corrections.iter().copied().fold(0.0, f64::max)
    }

    pub fn total_correction(&self) -> f64 {
        self.corrections.iter().sum()
    }
}

const ACTIVE_TOL: f64 = 1e-9;

/// Row form `a·u ≤ b` of every pair and arena constraint.
struct Rows {
    a: Vec<Vec<(usize, f64)>>,
    b: Vec<f64>,
}

impl Rows {
    fn push(&mut self, coefs: Vec<(usize, f64)>, rhs: f64) {
        self.a.push(coefs);
        self.b.push(rhs);
    }

    fn violated(&self, u: &DVector<f64>) -> bool {
        self.a
            .iter()
            .zip(&self.b)
            .any(|(row, &b)| row.iter().map(|&(k, c)| c * u[k]).sum::<f64>() > b)
    }
}

/// Closest inputs to `u_star` that satisfy every pair barrier, `‖u_i‖ ≤ a_peak` and the
/// optional per-agent arena bounds. Falls back to slack on the linear rows when the
/// hard problem is infeasible.
pub fn safety_filter(
    u_star: &[ControlInput],
    states: &[AgentState],
    params: &AgentParams,
    cfg: &FilterConfig,
    arena: Option<&[InputBounds]>,
) -> Result<(Vec<ControlInput>, FilterReport), PlanError> {
    let n = states.len();
    let nu = 2 * n;
    let barriers = assemble_constraints(states, params);
    let mut rows = Rows {
        a: Vec::new(),
        b: Vec::new(),
    };
    let mut pruned = 0;
    for pb in &barriers {
        if pb.is_slack(cfg) {
            pruned += 1;
            continue;
        }
        // −ciᵀu_i − cjᵀu_j ≤ constant
        rows.push(
            vec![
                (2 * pb.i, -pb.ci[0]),
                (2 * pb.i + 1, -pb.ci[1]),
                (2 * pb.j, -pb.cj[0]),
                (2 * pb.j + 1, -pb.cj[1]),
            ],
            pb.constant(cfg),
        );
    }
    let pair_rows = rows.b.len();
    if let Some(bounds) = arena {
        for (i, b) in bounds.iter().enumerate() {
            for a in 0..2 {
                rows.push(vec![(2 * i + a, 1.0)], b.hi[a]);
                rows.push(vec![(2 * i + a, -1.0)], -b.lo[a]);
            }
        }
    }

    let u0 = DVector::from_iterator(nu, u_star.iter().flat_map(|u| [u.ax, u.ay]));
    let within_peak = u_star.iter().all(|u| u.norm() <= cfg.a_peak);
    let mut report = FilterReport {
        active: false,
        corrections: vec![0.0; n],
        soft: false,
        max_slack: 0.0,
        pair_constraints: pair_rows,
        pruned,
    };
    if within_peak && !rows.violated(&u0) {
        return Ok((u_star.to_vec(), report));
    }

    let hard = solve_filter(&u0, &rows, cfg, None);
    let x = match hard {
        Some(x) => x,
        None => {
            report.soft = true;
            let x = solve_filter(&u0, &rows, cfg, Some(cfg.soft_penalty)).ok_or_else(|| PlanError::Solver {
                agent: 0,
                stage: "safety filter",
                detail: "soft problem failed".into(),
            })?;
            report.max_slack = x.rows(nu, rows.b.len()).iter().copied().fold(0.0, f64::max);
            x
        }
    };
    let out: Vec<ControlInput> = (0..n).map(|i| ControlInput::new(x[2 * i], x[2 * i + 1])).collect();
    for i in 0..n {
        report.corrections[i] = (out[i].to_vector() - u_star[i].to_vector()).norm();
    }
    report.active = report.corrections.iter().any(|&c| c > ACTIVE_TOL);
    Ok((out, report))
}

/// Solves the filter problem; with `penalty` every row gets its own non-negative slack.
fn solve_filter(u0: &DVector<f64>, rows: &Rows, cfg: &FilterConfig, penalty: Option<f64>) -> Option<DVector<f64>> {
    let nu = u0.len();
    let m = rows.b.len();
    let ns = if penalty.is_some() { m } else { 0 };
    let dim = nu + ns;
    let mut h = DMatrix::zeros(dim, dim);
    let mut g = DVector::zeros(dim);
    for k in 0..nu {
        h[(k, k)] = 2.0;
        g[k] = -2.0 * u0[k];
    }
    let extra = if penalty.is_some() { m } else { 0 };
    let mut in_a = DMatrix::zeros(m + extra, dim);
    let mut in_b = DVector::zeros(m + extra);
    for (r, (row, &b)) in rows.a.iter().zip(&rows.b).enumerate() {
        for &(k, c) in row {
            in_a[(r, k)] = c;
        }
        in_b[r] = b;
    }
    if let Some(w) = penalty {
        for s in 0..m {
            h[(nu + s, nu + s)] = 2.0 * w;
            in_a[(s, nu + s)] = -1.0;
            in_a[(m + s, nu + s)] = -1.0;
        }
    }
    let balls: Vec<BallConstraint> = (0..nu / 2)
        .map(|i| BallConstraint::centered(vec![2 * i, 2 * i + 1], cfg.a_peak))
        .collect();
    let prepared = PreparedQcqp::new(h, &DMatrix::zeros(0, dim)).ok()?;
    let eq_b = DVector::zeros(0);
    let report = prepared.solve(
        &QcqpData {
            g: &g,
            eq_b: &eq_b,
            in_a: &in_a,
            in_b: &in_b,
            balls: &balls,
        },
        &SolverSettings::default(),
        None,
    );
    match report.status {
        SolveStatus::Optimal => Some(report.x),
        SolveStatus::MaxIter if report.kkt_feasibility <= 1e-7 => Some(report.x),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn params() -> AgentParams {
        AgentParams {
            radius: 0.1,
            margin: 0.005,
            ..AgentParams::default()
        }
    }

    #[test]
    fn barrier_value_examples() {
        let p = params();
        let h = barrier_value(&Vector2::new(0.0, 0.0), &Vector2::new(0.5, 0.0), &p);
        assert_abs_diff_eq!(h, 0.207975, epsilon = 1e-15);
        let touch = barrier_value(&Vector2::new(0.0, 0.0), &Vector2::new(0.205, 0.0), &p);
        assert_abs_diff_eq!(touch, 0.0, epsilon = 1e-15);
        let same = barrier_value(&Vector2::new(0.3, 0.3), &Vector2::new(0.3, 0.3), &p);
        assert_abs_diff_eq!(same, -0.205 * 0.205, epsilon = 1e-15);
    }

    #[test]
    fn barrier_rate_examples() {
        let (hdot, c0, _, _) = barrier_rates(&AgentState::new(0.0, 0.0, 0.3, 0.1), &AgentState::new(1.0, 0.0, 0.3, 0.1));
        assert_eq!((hdot, c0), (0.0, 0.0));

        let si = AgentState::new(0.0, 0.0, 1.0, 0.0);
        let sj = AgentState::new(0.5, 0.0, -1.0, 0.0);
        let (hdot, c0, ci, cj) = barrier_rates(&si, &sj);
        assert_abs_diff_eq!(hdot, -2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(c0, 8.0, epsilon = 1e-15);
        assert_eq!(ci, -cj);
        assert_eq!(ci, Vector2::new(-1.0, 0.0));
    }

    #[test]
    fn assembly_examples() {
        let p = params();
        let cfg = FilterConfig::default();
        let far = assemble_constraints(&[AgentState::at_rest(0.0, 0.0), AgentState::at_rest(2.0, 0.0)], &p);
        assert_eq!(far.len(), 1);
        assert!(far[0].constant(&cfg) > 0.0);
        assert!(far[0].psi2(&cfg, &ControlInput::ZERO, &ControlInput::ZERO) > 0.0);

        let three = assemble_constraints(&[AgentState::default(); 3], &p);
        assert_eq!(three.len(), 3);

        // Closing at 2 m/s with 0.25 m between centres:
        // h = 0.0625 − 0.042025, ḣ = 2·(−0.25)·2, ḧ(0) = 8,
        // ψ₂(0) = 8 + 15·(−1) + 56·0.020475 = −5.8534.
        let s = [AgentState::new(0.0, 0.0, 1.0, 0.0), AgentState::new(0.25, 0.0, -1.0, 0.0)];
        let pb = assemble_constraints(&s, &p)[0];
        let psi2 = pb.psi2(&cfg, &ControlInput::ZERO, &ControlInput::ZERO);
        assert_abs_diff_eq!(psi2, -5.8534, epsilon = 1e-12);
        assert!(psi2 < 0.0);
    }

    #[test]
    fn swapping_pair_order_negates_coefficients() {
        let p = params();
        let a = AgentState::new(0.1, 0.2, 0.3, -0.4);
        let b = AgentState::new(-0.5, 0.6, 0.7, 0.1);
        let ab = PairBarrier::new(0, 1, &a, &b, &p);
        let ba = PairBarrier::new(1, 0, &b, &a, &p);
        assert_eq!(ab.h, ba.h);
        assert_eq!(ab.hdot, ba.hdot);
        assert_eq!(ab.c0, ba.c0);
        assert_eq!(ab.ci, ba.cj);
        assert_eq!(ab.ci, -ba.ci);
    }

    #[test]
    fn feasible_input_passes_through() {
        let p = params();
        let s = [AgentState::at_rest(0.0, 0.0), AgentState::at_rest(1.0, 0.0)];
        let u = [ControlInput::new(1.0, 0.5), ControlInput::new(-0.3, 0.2)];
        let (out, rep) = safety_filter(&u, &s, &p, &FilterConfig::default(), None).unwrap();
        assert_eq!(out, u.to_vec());
        assert!(!rep.active);
    }

    #[test]
    fn overpeak_input_is_clipped_radially() {
        let p = params();
        let s = [AgentState::at_rest(0.0, 0.0)];
        let (out, rep) = safety_filter(&[ControlInput::new(10.0, 0.0)], &s, &p, &FilterConfig::default(), None).unwrap();
        assert_abs_diff_eq!(out[0].ax, 8.0, epsilon = 1e-8);
        assert!(rep.active);
    }
}
