//! Dense solver for small convex QCQPs:
//!
//! ```text
//!     minimize    ½ xᵀ H x + gᵀ x
//!     subject to  A_eq x = b_eq,   A_in x ≤ b_in,   ‖x_S − c‖ ≤ r  (per ball)
//! ```
//!
//! Equalities are eliminated once through a null-space basis. The remaining
//! problem is solved by SQP: each ball is linearised about the current iterate
//! and the resulting QP goes to a dual active-set solver. The Lagrangian
//! Hessian carries the ball curvature, so convergence is locally quadratic, and
//! problems without balls finish after a single QP.
//!
//! Ball multipliers refer to the smooth form `½(‖x_S − c‖² − r²) ≤ 0`.

mod dual;
mod reduce;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::QcqpError;
use dual::{DualQp, DualStatus};
pub use reduce::EqualityReduction;

/// `‖x[indices] − center‖ ≤ radius`.
#[derive(Debug, Clone, PartialEq)]
pub struct BallConstraint {
    pub indices: Vec<usize>,
    pub center: DVector<f64>,
    pub radius: f64,
}

impl BallConstraint {
    pub fn new(indices: Vec<usize>, center: DVector<f64>, radius: f64) -> Self {
        Self {
            indices,
            center,
            radius,
        }
    }

    /// Ball of the given radius centred at the origin of the selected coordinates.
    pub fn centered(indices: Vec<usize>, radius: f64) -> Self {
        let n = indices.len();
        Self::new(indices, DVector::zeros(n), radius)
    }

    fn offset(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.indices.len(),
            self.indices.iter().zip(self.center.iter()).map(|(&i, c)| x[i] - c),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseQcqp {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub eq_a: DMatrix<f64>,
    pub eq_b: DVector<f64>,
    /// Rows of `in_a x ≤ in_b`.
    pub in_a: DMatrix<f64>,
    pub in_b: DVector<f64>,
    pub balls: Vec<BallConstraint>,
}

impl DenseQcqp {
    /// Unconstrained problem with the given objective.
    pub fn new(h: DMatrix<f64>, g: DVector<f64>) -> Self {
        let n = g.len();
        Self {
            h,
            g,
            eq_a: DMatrix::zeros(0, n),
            eq_b: DVector::zeros(0),
            in_a: DMatrix::zeros(0, n),
            in_b: DVector::zeros(0),
            balls: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn with_equalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.eq_a = a;
        self.eq_b = b;
        self
    }

    pub fn with_inequalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.in_a = a;
        self.in_b = b;
        self
    }

    pub fn with_ball(mut self, ball: BallConstraint) -> Self {
        self.balls.push(ball);
        self
    }

    pub fn validate(&self) -> Result<(), QcqpError> {
        let n = self.dim();
        let shape_err = |what: &str| Err(QcqpError::Dimension(what.to_string()));
        if self.h.shape() != (n, n) {
            return shape_err("H must be n x n");
        }
        if self.eq_a.ncols() != n || self.eq_a.nrows() != self.eq_b.len() {
            return shape_err("equality block");
        }
        if self.in_a.ncols() != n || self.in_a.nrows() != self.in_b.len() {
            return shape_err("inequality block");
        }
        for (index, b) in self.balls.iter().enumerate() {
            if b.indices.len() != b.center.len() || b.indices.iter().any(|&i| i >= n) {
                return shape_err("ball index set");
            }
            if !(b.radius > 0.0) || !b.radius.is_finite() {
                return Err(QcqpError::BadRadius {
                    index,
                    radius: b.radius,
                });
            }
        }
        fn finite<'a>(mut it: impl Iterator<Item = &'a f64>) -> bool {
            it.all(|v| v.is_finite())
        }
        if !finite(self.h.iter())
            || !finite(self.g.iter())
            || !finite(self.eq_a.iter())
            || !finite(self.eq_b.iter())
            || !finite(self.in_a.iter())
            || !finite(self.in_b.iter())
            || self.balls.iter().any(|b| !finite(b.center.iter()))
        {
            return Err(QcqpError::NonFinite);
        }
        check_hessian(&self.h)
    }
}

fn check_hessian(h: &DMatrix<f64>) -> Result<(), QcqpError> {
    let n = h.nrows();
    let asym = (h - h.transpose()).amax();
    if asym > 1e-10 {
        return Err(QcqpError::NotSymmetric(asym));
    }
    let sym = (h + h.transpose()) * 0.5 + DMatrix::identity(n, n) * 1e-8;
    if sym.cholesky().is_none() {
        return Err(QcqpError::NotPsd);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

/// Constraints active at a solution, used to warm-start the next solve.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WorkingSet {
    pub linear: Vec<usize>,
    pub balls: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub x: DVector<f64>,
    pub status: SolveStatus,
    pub kkt_stationarity: f64,
    pub kkt_feasibility: f64,
    pub kkt_complementarity: f64,
    pub iterations: usize,
    pub eq_multipliers: DVector<f64>,
    pub ineq_multipliers: DVector<f64>,
    pub ball_multipliers: DVector<f64>,
    pub working_set: WorkingSet,
    pub objective: f64,
}

impl SolveReport {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }

    pub fn max_residual(&self) -> f64 {
        self.kkt_stationarity
            .max(self.kkt_feasibility)
            .max(self.kkt_complementarity)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 200,
        }
    }
}

/// Starting point and working set carried over from a previous, similar solve.
#[derive(Debug, Clone, Default)]
pub struct WarmStart {
    pub x: Option<DVector<f64>>,
    pub working_set: WorkingSet,
    pub ball_multipliers: Vec<f64>,
}

impl WarmStart {
    pub fn from_report(report: &SolveReport) -> Self {
        Self {
            x: Some(report.x.clone()),
            working_set: report.working_set.clone(),
            ball_multipliers: report.ball_multipliers.iter().copied().collect(),
        }
    }
}

/// Euclidean projection onto the ball `‖x − c‖ ≤ r`.
pub fn project_ball(x: &DVector<f64>, c: &DVector<f64>, r: f64) -> DVector<f64> {
    let d = x - c;
    let norm = d.norm();
    if norm <= r {
        x.clone()
    } else {
        c + d * (r / norm)
    }
}

/// Stationary point of an equality-constrained QP from one KKT solve.
pub fn solve_eq_qp(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    eq_a: &DMatrix<f64>,
    eq_b: &DVector<f64>,
) -> SolveReport {
    let n = g.len();
    let m = eq_b.len();
    let mut kkt = DMatrix::zeros(n + m, n + m);
    kkt.view_mut((0, 0), (n, n)).copy_from(h);
    kkt.view_mut((0, n), (n, m)).copy_from(&eq_a.transpose());
    kkt.view_mut((n, 0), (m, n)).copy_from(eq_a);
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(0, n).copy_from(&(-g));
    rhs.rows_mut(n, m).copy_from(eq_b);

    let infeasible = |x: DVector<f64>| SolveReport {
        objective: f64::NAN,
        x,
        status: SolveStatus::Infeasible,
        kkt_stationarity: f64::INFINITY,
        kkt_feasibility: f64::INFINITY,
        kkt_complementarity: 0.0,
        iterations: 1,
        eq_multipliers: DVector::zeros(m),
        ineq_multipliers: DVector::zeros(0),
        ball_multipliers: DVector::zeros(0),
        working_set: WorkingSet::default(),
    };
    let Some(sol) = kkt.clone().lu().solve(&rhs) else {
        return infeasible(DVector::zeros(n));
    };
    let scale = 1.0 + kkt.amax() * sol.amax() + rhs.amax();
    if !sol.iter().all(|v| v.is_finite()) || (&kkt * &sol - &rhs).amax() > 1e-9 * scale {
        return infeasible(DVector::zeros(n));
    }
    let x = sol.rows(0, n).into_owned();
    let nu = sol.rows(n, m).into_owned();
    let stat = (h * &x + g + eq_a.tr_mul(&nu)).norm();
    let feas = if m > 0 { (eq_a * &x - eq_b).amax() } else { 0.0 };
    SolveReport {
        objective: 0.5 * x.dot(&(h * &x)) + g.dot(&x),
        x,
        status: SolveStatus::Optimal,
        kkt_stationarity: stat,
        kkt_feasibility: feas,
        kkt_complementarity: 0.0,
        iterations: 1,
        eq_multipliers: nu,
        ineq_multipliers: DVector::zeros(0),
        ball_multipliers: DVector::zeros(0),
        working_set: WorkingSet::default(),
    }
}

/// Validates and solves a standalone problem.
pub fn solve_convex_qcqp(p: &DenseQcqp, tol: f64, max_iter: usize) -> Result<SolveReport, QcqpError> {
    p.validate()?;
    let prepared = PreparedQcqp::new(p.h.clone(), &p.eq_a)?;
    Ok(prepared.solve(
        &QcqpData {
            g: &p.g,
            eq_b: &p.eq_b,
            in_a: &p.in_a,
            in_b: &p.in_b,
            balls: &p.balls,
        },
        &SolverSettings { tol, max_iter },
        None,
    ))
}

/// Per-solve data of a [`PreparedQcqp`].
#[derive(Debug, Clone, Copy)]
pub struct QcqpData<'a> {
    pub g: &'a DVector<f64>,
    pub eq_b: &'a DVector<f64>,
    pub in_a: &'a DMatrix<f64>,
    pub in_b: &'a DVector<f64>,
    pub balls: &'a [BallConstraint],
}

/// Hessian and equality structure factored once, reused across many right-hand sides.
#[derive(Debug, Clone)]
pub struct PreparedQcqp {
    h: DMatrix<f64>,
    eq_a: DMatrix<f64>,
    reduction: EqualityReduction,
    /// `Zᵀ H Z`, regularised when singular.
    reduced_h: DMatrix<f64>,
}

impl PreparedQcqp {
    pub fn new(h: DMatrix<f64>, eq_a: &DMatrix<f64>) -> Result<Self, QcqpError> {
        let reduction = EqualityReduction::new(eq_a);
        Self::with_reduction(h, eq_a.clone(), reduction)
    }

    /// Uses a reduction assembled by the caller, e.g. block-diagonally.
    pub fn with_reduction(
        h: DMatrix<f64>,
        eq_a: DMatrix<f64>,
        reduction: EqualityReduction,
    ) -> Result<Self, QcqpError> {
        let n = h.nrows();
        if h.ncols() != n || eq_a.ncols() != n || reduction.dim() != n {
            return Err(QcqpError::Dimension("prepared problem".into()));
        }
        let z = reduction.null_basis();
        let mut reduced_h = z.tr_mul(&(&h * z));
        reduced_h = (&reduced_h + reduced_h.transpose()) * 0.5;
        let nr = reduced_h.nrows();
        let well_posed = reduced_h.clone().cholesky().is_some_and(|c| {
            let diag = c.l_dirty().diagonal();
            let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), d| (lo.min(*d), hi.max(*d)));
            lo * lo > 1e-12 * hi * hi
        });
        if !well_posed {
            reduced_h += DMatrix::identity(nr, nr) * 1e-10;
            if reduced_h.clone().cholesky().is_none() {
                return Err(QcqpError::NotPsd);
            }
        }
        Ok(Self {
            h,
            eq_a,
            reduction,
            reduced_h,
        })
    }

    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn reduction(&self) -> &EqualityReduction {
        &self.reduction
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn eq_matrix(&self) -> &DMatrix<f64> {
        &self.eq_a
    }

    pub fn solve(&self, data: &QcqpData<'_>, settings: &SolverSettings, warm: Option<&WarmStart>) -> SolveReport {
        Sqp::new(self, data, settings).run(warm)
    }
}

struct ReducedBall {
    /// Rows of the null basis selected by the ball, restricted to the columns
    /// `col0..col0 + m.ncols()` outside of which they vanish.
    m: DMatrix<f64>,
    col0: usize,
    /// Ball offset at `y = 0`.
    e: DVector<f64>,
    radius: f64,
}

impl ReducedBall {
    fn new(z: &DMatrix<f64>, indices: &[usize], e: DVector<f64>, radius: f64) -> Self {
        let nr = z.ncols();
        let nonzero = |c: usize| indices.iter().any(|&i| z[(i, c)] != 0.0);
        let col0 = (0..nr).find(|&c| nonzero(c)).unwrap_or(0);
        let col1 = (0..nr).rev().find(|&c| nonzero(c)).map_or(col0, |c| c + 1);
        Self {
            m: DMatrix::from_fn(indices.len(), col1 - col0, |r, c| z[(indices[r], col0 + c)]),
            col0,
            e,
            radius,
        }
    }

    fn offset(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.m * y.rows(self.col0, self.m.ncols()) + &self.e
    }

    /// `Mᵀ v` in the full reduced space.
    fn tr_mul(&self, v: &DVector<f64>, nr: usize) -> DVector<f64> {
        let mut out = DVector::zeros(nr);
        out.rows_mut(self.col0, self.m.ncols()).copy_from(&self.m.tr_mul(v));
        out
    }

    fn value(&self, y: &DVector<f64>) -> f64 {
        0.5 * (self.offset(y).norm_squared() - self.radius * self.radius)
    }
}

struct Sqp<'a> {
    prep: &'a PreparedQcqp,
    data: &'a QcqpData<'a>,
    settings: &'a SolverSettings,
    xp: Option<DVector<f64>>,
    gr: DVector<f64>,
    /// Reduced linear rows `C Z` and right-hand sides `d − C x_p`.
    cr: DMatrix<f64>,
    dr: DVector<f64>,
    balls: Vec<ReducedBall>,
}

#[derive(Clone)]
struct Iterate {
    y: DVector<f64>,
    lam: DVector<f64>,
    mu: DVector<f64>,
}

impl<'a> Sqp<'a> {
    fn new(prep: &'a PreparedQcqp, data: &'a QcqpData<'a>, settings: &'a SolverSettings) -> Self {
        let red = &prep.reduction;
        let z = red.null_basis();
        let nr = red.reduced_dim();
        let xp = red.particular(data.eq_b);
        let x0 = xp.clone().unwrap_or_else(|| DVector::zeros(prep.dim()));
        let gr = z.tr_mul(&(&prep.h * &x0 + data.g));

        let m = data.in_b.len();
        let mut cr = DMatrix::zeros(m, nr);
        let mut dr = data.in_b.clone();
        for i in 0..m {
            for j in 0..prep.dim() {
                let a = data.in_a[(i, j)];
                if a != 0.0 {
                    dr[i] -= a * x0[j];
                    for k in 0..nr {
                        cr[(i, k)] += a * z[(j, k)];
                    }
                }
            }
        }
        let balls = data
            .balls
            .iter()
            .map(|b| ReducedBall::new(z, &b.indices, b.offset(&x0), b.radius))
            .collect();
        Self {
            prep,
            data,
            settings,
            xp,
            gr,
            cr,
            dr,
            balls,
        }
    }

    fn full_x(&self, y: &DVector<f64>) -> DVector<f64> {
        let z = self.prep.reduction.null_basis();
        match &self.xp {
            Some(xp) => xp + z * y,
            None => z * y,
        }
    }

    fn reduced_y(&self, x: &DVector<f64>) -> DVector<f64> {
        let z = self.prep.reduction.null_basis();
        match &self.xp {
            Some(xp) => z.tr_mul(&(x - xp)),
            None => z.tr_mul(x),
        }
    }

    fn objective(&self, y: &DVector<f64>) -> f64 {
        0.5 * y.dot(&(&self.prep.reduced_h * y)) + self.gr.dot(y)
    }

    /// KKT residuals of the original problem in full space.
    fn residuals(&self, it: &Iterate) -> (f64, f64, f64, DVector<f64>) {
        let d = self.data;
        let x = self.full_x(&it.y);
        let mut r = &self.prep.h * &x + d.g;
        if !d.in_b.is_empty() {
            r += d.in_a.tr_mul(&it.lam);
        }
        let mut feas: f64 = 0.0;
        let mut comp: f64 = 0.0;
        for (b, (ball, &mu)) in d.balls.iter().zip(it.mu.iter()).enumerate() {
            let off = ball.offset(&x);
            for (k, &i) in ball.indices.iter().enumerate() {
                r[i] += mu * off[k];
            }
            let norm = off.norm();
            feas = feas.max(norm - ball.radius);
            comp = comp.max((mu * self.balls[b].value(&it.y)).abs());
        }
        if !d.in_b.is_empty() {
            let slack = d.in_b - d.in_a * &x;
            for (s, l) in slack.iter().zip(it.lam.iter()) {
                feas = feas.max(-s);
                comp = comp.max((s * l).abs());
            }
        }
        if self.prep.reduction.has_equalities() {
            let eq = &self.prep.eq_a * &x - d.eq_b;
            feas = feas.max(eq.amax());
        }
        let nu = self.prep.reduction.multipliers(&r);
        let stat = self.prep.reduction.project_null(&r).norm();
        (stat, feas.max(0.0), comp, nu)
    }

    fn converged(&self, it: &Iterate) -> bool {
        let (s, f, c, _) = self.residuals(it);
        let tol = self.settings.tol;
        s <= tol && f <= tol && c <= tol
    }

    fn report(&self, it: &Iterate, status: SolveStatus, iterations: usize) -> SolveReport {
        let (stat, feas, comp, nu) = self.residuals(it);
        let x = self.full_x(&it.y);
        let tol = self.settings.tol;
        let ws_lin: Vec<usize> = (0..it.lam.len()).filter(|&k| it.lam[k] > 0.0).collect();
        let ws_ball: Vec<usize> = (0..it.mu.len()).filter(|&k| it.mu[k] > 0.0).collect();
        let status = match status {
            SolveStatus::Optimal if stat > tol || feas > tol || comp > tol => SolveStatus::MaxIter,
            s => s,
        };
        SolveReport {
            objective: 0.5 * x.dot(&(&self.prep.h * &x)) + self.data.g.dot(&x),
            x,
            status,
            kkt_stationarity: stat,
            kkt_feasibility: feas,
            kkt_complementarity: comp,
            iterations,
            eq_multipliers: nu,
            ineq_multipliers: it.lam.clone(),
            ball_multipliers: it.mu.clone(),
            working_set: WorkingSet {
                linear: ws_lin,
                balls: ws_ball,
            },
        }
    }

    fn infeasible(&self, y: DVector<f64>, iterations: usize) -> SolveReport {
        let it = Iterate {
            y,
            lam: DVector::zeros(self.dr.len()),
            mu: DVector::zeros(self.balls.len()),
        };
        self.report(&it, SolveStatus::Infeasible, iterations)
    }

    /// Builds the QP at `y` over linear rows and cuts and solves it for the step.
    fn subproblem(&self, y: &DVector<f64>, mu: &DVector<f64>, cuts: &Cuts, hint: &[usize]) -> Option<Step> {
        let ml = self.dr.len();
        let nr = y.len();
        let mut w = self.prep.reduced_h.clone();
        for (b, ball) in self.balls.iter().enumerate() {
            if mu[b] > 0.0 {
                let span = ball.m.ncols();
                let mut blk = w.view_mut((ball.col0, ball.col0), (span, span));
                blk += ball.m.tr_mul(&ball.m) * mu[b];
            }
        }
        let mut normals = DMatrix::zeros(nr, ml + cuts.len());
        let mut rhs = DVector::zeros(ml + cuts.len());
        if ml > 0 {
            normals.columns_mut(0, ml).copy_from(&(-self.cr.transpose()));
            let lin = &self.cr * y - &self.dr;
            rhs.rows_mut(0, ml).copy_from(&lin);
        }
        let nb = self.balls.len();
        let mut enabled = vec![false; cuts.len()];
        for (c, cut) in cuts.iter().enumerate() {
            let Some(cut) = cut else { continue };
            // Accumulated cuts almost parallel to the ball's current cut only make the
            // active set degenerate.
            let shadowed = c >= nb
                && cuts[cut.ball]
                    .as_ref()
                    .is_some_and(|slot| slot.dir.dot(&cut.dir) > 1.0 - 1e-6);
            if shadowed {
                continue;
            }
            enabled[c] = true;
            normals.set_column(ml + c, &(-&cut.row));
            rhs[ml + c] = cut.row.dot(y) - cut.bound;
        }
        for (c, on) in enabled.iter().enumerate() {
            if !on {
                // disabled row: 0 ≥ −1
                rhs[ml + c] = -1.0;
            }
        }
        let grad = &self.prep.reduced_h * y + &self.gr;
        let qp = DualQp {
            hessian: &w,
            linear: &grad,
            normals: &normals,
            rhs: &rhs,
        };
        let sol = qp.solve(hint);
        if sol.status != DualStatus::Optimal {
            return None;
        }
        let y_new = y + &sol.x;
        let mut mu_new = DVector::zeros(self.balls.len());
        let mut nu_max: f64 = 0.0;
        for (c, cut) in cuts.iter().enumerate() {
            let nu = sol.multipliers[ml + c];
            if let Some(cut) = cut {
                if nu > 0.0 {
                    nu_max = nu_max.max(nu);
                    // ν·dir expressed as a multiple of the ball offset.
                    let off = self.balls[cut.ball].offset(&y_new);
                    let o2 = off.norm_squared();
                    if o2 > 0.0 {
                        mu_new[cut.ball] += nu * cut.dir.dot(&off) / o2;
                    }
                }
            }
        }
        Some(Step {
            d: sol.x,
            lam: sol.multipliers.rows(0, ml).into_owned(),
            mu: mu_new.map(|v: f64| v.max(0.0)),
            nu_max,
            active: sol.active,
        })
    }

    /// Norm-form shortfall `‖o‖ − r` of ball `b` at `y`.
    fn ball_excess(&self, b: usize, y: &DVector<f64>) -> f64 {
        let ball = &self.balls[b];
        ball.offset(y).norm() - ball.radius
    }

    fn cut_at(&self, b: usize, y: &DVector<f64>) -> Option<Cut> {
        let ball = &self.balls[b];
        let off = ball.offset(y);
        let norm = off.norm();
        if norm <= 1e-14 * ball.radius {
            return None;
        }
        let dir = off / norm;
        Some(Cut {
            ball: b,
            row: ball.tr_mul(&dir, self.prep.reduction.reduced_dim()),
            bound: ball.radius - dir.dot(&ball.e),
            dir,
        })
    }

    /// Refreshes the per-ball cut slots at the current point: a ball gets the supporting
    /// hyperplane through the radial projection of `y` once `y` is near its boundary.
    fn refresh_slots(&self, y: &DVector<f64>, cuts: &mut Cuts) {
        for b in 0..self.balls.len() {
            let near = self.ball_excess(b, y) >= -0.5 * self.balls[b].radius;
            cuts[b] = if near { self.cut_at(b, y) } else { None };
        }
    }

    /// Appends cuts for balls that `y` overshoots by more than `slack`; returns how many.
    fn add_overshoot_cuts(&self, y: &DVector<f64>, slack: f64, cuts: &mut Cuts) -> usize {
        let mut added = 0;
        for b in 0..self.balls.len() {
            if self.ball_excess(b, y) <= slack * self.balls[b].radius {
                continue;
            }
            let Some(cut) = self.cut_at(b, y) else { continue };
            let duplicate = cuts
                .iter()
                .flatten()
                .any(|c| c.ball == b && c.dir.dot(&cut.dir) > 1.0 - 1e-12);
            if !duplicate {
                cuts.push(Some(cut));
                added += 1;
            }
        }
        added
    }

    fn norm_violation(&self, y: &DVector<f64>) -> f64 {
        let lin = &self.cr * y - &self.dr;
        let lin_v: f64 = lin.iter().map(|v| v.max(0.0)).sum();
        let ball_v: f64 = (0..self.balls.len()).map(|b| self.ball_excess(b, y).max(0.0)).sum();
        lin_v + ball_v
    }

    /// Solves the subproblem, tightening the outer approximation while the step
    /// overshoots some ball by more than 1% of its radius.
    fn refined_step(&self, y: &DVector<f64>, mu: &DVector<f64>, cuts: &mut Cuts, hint: &[usize]) -> Option<Step> {
        let mut step = self.subproblem(y, mu, cuts, hint)?;
        for _ in 0..MAX_CUT_ROUNDS {
            if self.add_overshoot_cuts(&(y + &step.d), 1e-2, cuts) == 0 {
                break;
            }
            step = self.subproblem(y, mu, cuts, &step.active)?;
        }
        Some(step)
    }

    fn run(&self, warm: Option<&WarmStart>) -> SolveReport {
        let nr = self.prep.reduction.reduced_dim();
        let ml = self.dr.len();
        let nb = self.balls.len();
        if self.xp.is_none() {
            return self.infeasible(DVector::zeros(nr), 0);
        }
        let mut it = Iterate {
            y: DVector::zeros(nr),
            lam: DVector::zeros(ml),
            mu: DVector::zeros(nb),
        };
        let mut hint: Vec<usize> = Vec::new();
        if let Some(w) = warm {
            if let Some(x) = &w.x {
                if x.len() == self.prep.dim() && x.iter().all(|v| v.is_finite()) {
                    it.y = self.reduced_y(x);
                }
            }
            if w.ball_multipliers.len() == nb {
                it.mu = DVector::from_iterator(nb, w.ball_multipliers.iter().map(|m| m.max(0.0)));
            }
            hint.extend(w.working_set.linear.iter().filter(|&&k| k < ml));
            hint.extend(w.working_set.balls.iter().filter(|&&k| k < nb).map(|k| ml + k));
        }

        // Slots 0..nb hold the cut at the current point of each ball; later entries
        // accumulate. Every cut is implied by its ball, so none can cut off the optimum.
        let mut cuts: Cuts = vec![None; nb];
        let mut rho = 1.0f64;
        let mut best: Option<(f64, Iterate)> = None;
        let mut stalled = 0;
        let mut iterations = self.settings.max_iter;
        for iter in 1..=self.settings.max_iter {
            self.refresh_slots(&it.y, &mut cuts);
            let Some(step) = self.refined_step(&it.y, &it.mu, &mut cuts, &hint) else {
                return self.infeasible(it.y.clone(), iter);
            };
            hint = step.active.clone();
            let full = Iterate {
                y: &it.y + &step.d,
                lam: step.lam.clone(),
                mu: step.mu.clone(),
            };
            if self.converged(&full) {
                return self.report(&full, SolveStatus::Optimal, iter);
            }
            if nb == 0 {
                // Linear problems are solved exactly by one QP.
                it = full;
                break;
            }

            let mult_max = step.lam.amax().max(step.nu_max);
            rho = rho.max(1.5 * mult_max + 1e-3);
            let merit = |y: &DVector<f64>| self.objective(y) + rho * self.norm_violation(y);
            let phi0 = merit(&it.y);
            let grad = &self.prep.reduced_h * &it.y + &self.gr;
            let slope = grad.dot(&step.d) - rho * self.norm_violation(&it.y);
            let armijo = |y: &DVector<f64>, alpha: f64| slope >= 0.0 || merit(y) <= phi0 + 1e-4 * alpha * slope;

            let mut next: Option<(DVector<f64>, Step)> = None;
            if armijo(&full.y, 1.0) {
                next = Some((full.y.clone(), step.clone()));
            } else if self.add_overshoot_cuts(&full.y, 0.0, &mut cuts) > 0 {
                // Second try with the overshoot cut away.
                if let Some(corr) = self.subproblem(&it.y, &it.mu, &cuts, &step.active) {
                    let yc = &it.y + &corr.d;
                    if armijo(&yc, 1.0) {
                        hint = corr.active.clone();
                        next = Some((yc, corr));
                    }
                }
            }
            let (y_next, used) = next.unwrap_or_else(|| {
                let mut alpha = 0.5;
                loop {
                    let y = &it.y + &step.d * alpha;
                    if armijo(&y, alpha) || alpha < 1e-10 {
                        break (y, step.clone());
                    }
                    alpha *= 0.5;
                }
            });
            let moved = (&y_next - &it.y).amax();
            it = Iterate {
                y: y_next,
                lam: used.lam,
                mu: used.mu,
            };
            if self.converged(&it) {
                return self.report(&it, SolveStatus::Optimal, iter);
            }
            // Steps at rounding level cannot improve the residuals further.
            stalled = if moved <= 1e-14 * (1.0 + it.y.amax()) { stalled + 1 } else { 0 };
            let (s, f, c, _) = self.residuals(&it);
            let score = s.max(f).max(c);
            if best.as_ref().is_none_or(|(b, _)| score < *b) {
                best = Some((score, it.clone()));
            }
            if stalled >= 3 {
                iterations = iter;
                break;
            }
        }
        let last = match best {
            Some((score, b)) if score < self.residuals(&it).0.max(self.residuals(&it).1) => b,
            _ => it,
        };
        self.report(&last, SolveStatus::MaxIter, iterations)
    }
}

const MAX_CUT_ROUNDS: usize = 4;

/// Supporting halfspace `dirᵀ(M y + e) ≤ r` of one ball, stored as `rowᵀ y ≤ bound`.
#[derive(Clone)]
struct Cut {
    ball: usize,
    dir: DVector<f64>,
    row: DVector<f64>,
    bound: f64,
}

type Cuts = Vec<Option<Cut>>;

#[derive(Clone)]
struct Step {
    d: DVector<f64>,
    lam: DVector<f64>,
    /// Ball multipliers recovered from the cut multipliers.
    mu: DVector<f64>,
    nu_max: f64,
    active: Vec<usize>,
}
