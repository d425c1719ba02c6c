//! Projected-gradient reference solver for QCQPs with a few halfspaces and one ball.
//!
//! The projection onto the feasible set is exact: every combination of active
//! halfspaces, with and without the ball, is solved by direct KKT solves (LU),
//! and the closest feasible candidate wins.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use swarmplan::qsolve::{BallConstraint, DenseQcqp};

pub struct OracleProblem {
    pub qcqp: DenseQcqp,
    pub feasible_point: DVector<f64>,
}

/// Strictly convex objective, three halfspaces and one ball over a random index subset.
pub fn random_problem(rng: &mut ChaCha8Rng) -> OracleProblem {
    let n = rng.gen_range(2..=6);
    let b = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let h = b.tr_mul(&b) + DMatrix::identity(n, n) * rng.gen_range(0.3..1.0);
    let h = (&h + h.transpose()) * 0.5;
    let x_feas = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    let target = DVector::from_fn(n, |_, _| rng.gen_range(-4.0..4.0));
    let g = -(&h * target);

    let mut in_a = DMatrix::zeros(3, n);
    let mut in_b = DVector::zeros(3);
    for j in 0..3 {
        let a = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        in_b[j] = a.dot(&x_feas) + rng.gen_range(0.0..0.5);
        in_a.set_row(j, &a.transpose());
    }
    let s = rng.gen_range(1..=n);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..n {
        let k = rng.gen_range(i..n);
        idx.swap(i, k);
    }
    let mut indices: Vec<usize> = idx[..s].to_vec();
    indices.sort_unstable();
    let center = DVector::from_fn(s, |i, _| x_feas[indices[i]] + rng.gen_range(-0.3..0.3));
    let dist = DVector::from_fn(s, |i, _| x_feas[indices[i]] - center[i]).norm();
    let radius = dist + rng.gen_range(0.05..1.0);
    let qcqp = DenseQcqp::new(h, g)
        .with_inequalities(in_a, in_b)
        .with_ball(BallConstraint::new(indices, center, radius));
    OracleProblem {
        qcqp,
        feasible_point: x_feas,
    }
}

struct Projector<'a> {
    a: &'a DMatrix<f64>,
    b: &'a DVector<f64>,
    ball: &'a BallConstraint,
}

impl Projector<'_> {
    fn feasible(&self, x: &DVector<f64>) -> bool {
        let lin = self.a * x - self.b;
        let off = self.offset(x);
        lin.iter().all(|&v| v <= 1e-12) && off.norm() <= self.ball.radius * (1.0 + 1e-12)
    }

    fn offset(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.ball.indices.len(), |i, _| x[self.ball.indices[i]] - self.ball.center[i])
    }

    /// Minimiser of ½‖x − v‖² + ½μ‖x_S − c‖² on `{a_j x = b_j, j ∈ rows}` and its μ-derivative.
    fn weighted(&self, v: &DVector<f64>, rows: &[usize], mu: f64) -> Option<(DVector<f64>, DVector<f64>)> {
        let n = v.len();
        let m = rows.len();
        let mut k = DMatrix::zeros(n + m, n + m);
        let mut rhs = DVector::zeros(n + m);
        for i in 0..n {
            k[(i, i)] = 1.0;
            rhs[i] = v[i];
        }
        for (s, &i) in self.ball.indices.iter().enumerate() {
            k[(i, i)] += mu;
            rhs[i] += mu * self.ball.center[s];
        }
        for (r, &j) in rows.iter().enumerate() {
            for i in 0..n {
                k[(i, n + r)] = self.a[(j, i)];
                k[(n + r, i)] = self.a[(j, i)];
            }
            rhs[n + r] = self.b[j];
        }
        let lu = k.lu();
        let sol = lu.solve(&rhs)?;
        let x = sol.rows(0, n).into_owned();
        let mut drhs = DVector::zeros(n + m);
        for (s, &i) in self.ball.indices.iter().enumerate() {
            drhs[i] = -(x[i] - self.ball.center[s]);
        }
        let dx = lu.solve(&drhs)?.rows(0, n).into_owned();
        Some((x, dx))
    }

    /// Projection onto `{a_j x = b_j, j ∈ rows} ∩ {‖x_S − c‖ = r}` via a safeguarded
    /// Newton iteration on `1/‖x_S(μ) − c‖ − 1/r`.
    fn on_sphere(&self, v: &DVector<f64>, rows: &[usize]) -> Option<DVector<f64>> {
        let r = self.ball.radius;
        let dist = |x: &DVector<f64>| self.offset(x).norm();
        let (x0, _) = self.weighted(v, rows, 0.0)?;
        if dist(&x0) <= r {
            return None;
        }
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        loop {
            let (x, _) = self.weighted(v, rows, hi)?;
            if dist(&x) <= r {
                break;
            }
            lo = hi;
            hi *= 4.0;
            if hi > 1e12 {
                return None;
            }
        }
        let mut mu = 0.5 * (lo + hi);
        for _ in 0..200 {
            let (x, dx) = self.weighted(v, rows, mu)?;
            let off = self.offset(&x);
            let d = off.norm();
            if (d - r).abs() <= 1e-15 * r {
                return Some(x);
            }
            if d > r {
                lo = mu;
            } else {
                hi = mu;
            }
            let dxs = DVector::from_fn(off.len(), |i, _| dx[self.ball.indices[i]]);
            let phi = 1.0 / d - 1.0 / r;
            let dphi = -off.dot(&dxs) / (d * d * d);
            let newton = mu - phi / dphi;
            mu = if dphi != 0.0 && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if hi - lo <= 1e-16 * hi {
                break;
            }
        }
        let (x, _) = self.weighted(v, rows, mu)?;
        Some(x)
    }

    fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        if self.feasible(v) {
            return v.clone();
        }
        let m = self.a.nrows();
        let mut best: Option<(f64, DVector<f64>)> = None;
        for mask in 0..(1u32 << m) {
            let rows: Vec<usize> = (0..m).filter(|j| mask & (1 << j) != 0).collect();
            let mut candidates = Vec::new();
            if let Some((x, _)) = self.weighted(v, &rows, 0.0) {
                candidates.push(x);
            }
            if let Some(x) = self.on_sphere(v, &rows) {
                candidates.push(x);
            }
            for x in candidates {
                if self.feasible(&x) {
                    let d = (&x - v).norm();
                    if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
                        best = Some((d, x));
                    }
                }
            }
        }
        best.expect("feasible set is nonempty").1
    }
}

/// Projected gradient with step `1/λ_max(H)` until the iterate stops moving.
pub fn projected_gradient(p: &OracleProblem, max_iter: usize) -> DVector<f64> {
    let q = &p.qcqp;
    let proj = Projector {
        a: &q.in_a,
        b: &q.in_b,
        ball: &q.balls[0],
    };
    let lmax = q.h.clone().symmetric_eigen().eigenvalues.max();
    let step = 1.0 / lmax;
    let mut x = proj.project(&p.feasible_point);
    for _ in 0..max_iter {
        let grad = &q.h * &x + &q.g;
        let next = proj.project(&(&x - grad * step));
        let moved = (&next - &x).norm();
        x = next;
        if moved <= 1e-14 {
            break;
        }
    }
    x
}
