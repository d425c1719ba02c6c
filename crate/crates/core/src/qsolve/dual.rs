//! Goldfarb–Idnani dual active-set method for strictly convex QPs
//!
//! ```text
//!     minimize    ½ xᵀ G x + cᵀ x
//!     subject to  n_jᵀ x ≥ b_j,   j = 0..m
//! ```
//!
//! The method starts from the unconstrained minimiser and adds violated
//! constraints one at a time, keeping the factorisation `Jᵀ N = [R; 0]`
//! with `J Jᵀ = G⁻¹` up to date through Givens rotations.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum DualStatus {
    Optimal,
    Infeasible,
    IterationLimit,
}

#[derive(Debug, Clone)]
pub(crate) struct DualSolution {
    pub x: DVector<f64>,
    /// One multiplier per constraint, zero when inactive.
    pub multipliers: DVector<f64>,
    pub active: Vec<usize>,
    pub status: DualStatus,
}

/// Constraint data in column form: column `j` of `normals` is `n_j`.
pub(crate) struct DualQp<'a> {
    pub hessian: &'a DMatrix<f64>,
    pub linear: &'a DVector<f64>,
    pub normals: &'a DMatrix<f64>,
    pub rhs: &'a DVector<f64>,
}

struct Factor {
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    q: usize,
}

impl Factor {
    fn rotation(a: f64, b: f64) -> Option<(f64, f64, f64)> {
        if b == 0.0 {
            return None;
        }
        let h = a.hypot(b);
        Some((a / h, b / h, h))
    }

    /// `J ← J Pᵀ` for the plane rotation acting on coordinates `(i, k)`.
    fn rotate_columns(j: &mut DMatrix<f64>, i: usize, k: usize, c: f64, s: f64) {
        let n = j.nrows();
        for row in 0..n {
            let a = j[(row, i)];
            let b = j[(row, k)];
            j[(row, i)] = c * a + s * b;
            j[(row, k)] = -s * a + c * b;
        }
    }

    /// Appends the constraint whose transformed normal is `d = Jᵀ n`.
    fn add(&mut self, mut d: DVector<f64>) {
        let n = d.len();
        let q = self.q;
        for i in (q + 1..n).rev() {
            if let Some((c, s, h)) = Self::rotation(d[i - 1], d[i]) {
                d[i - 1] = h;
                d[i] = 0.0;
                Self::rotate_columns(&mut self.j, i - 1, i, c, s);
            }
        }
        for i in 0..=q {
            self.r[(i, q)] = d[i];
        }
        self.q += 1;
    }

    /// Removes active column `l` and restores the triangular form of `R`.
    fn drop(&mut self, l: usize) {
        let q = self.q;
        for col in l..q - 1 {
            for row in 0..q {
                self.r[(row, col)] = self.r[(row, col + 1)];
            }
        }
        for row in 0..q {
            self.r[(row, q - 1)] = 0.0;
        }
        for i in l..q - 1 {
            if let Some((c, s, h)) = Self::rotation(self.r[(i, i)], self.r[(i + 1, i)]) {
                self.r[(i, i)] = h;
                self.r[(i + 1, i)] = 0.0;
                for col in i + 1..q - 1 {
                    let a = self.r[(i, col)];
                    let b = self.r[(i + 1, col)];
                    self.r[(i, col)] = c * a + s * b;
                    self.r[(i + 1, col)] = -s * a + c * b;
                }
                Self::rotate_columns(&mut self.j, i, i + 1, c, s);
            }
        }
        self.q -= 1;
    }

    fn back_substitute(&self, d: &DVector<f64>) -> DVector<f64> {
        let q = self.q;
        let mut r = DVector::zeros(q);
        for i in (0..q).rev() {
            let mut acc = d[i];
            for k in i + 1..q {
                acc -= self.r[(i, k)] * r[k];
            }
            r[i] = acc / self.r[(i, i)];
        }
        r
    }
}

impl DualQp<'_> {
    fn dim(&self) -> usize {
        self.hessian.nrows()
    }

    fn count(&self) -> usize {
        self.normals.ncols()
    }

    fn slack(&self, x: &DVector<f64>, j: usize) -> f64 {
        self.normals.column(j).dot(x) - self.rhs[j]
    }

    /// Solves the QP. Constraints in `hint` are loaded as equalities first; when their
    /// multipliers come out non-negative the dual iteration continues from there instead
    /// of from the unconstrained minimiser.
    pub fn solve(&self, hint: &[usize]) -> DualSolution {
        let n = self.dim();
        let chol = match self.hessian.clone().cholesky() {
            Some(c) => c,
            None => {
                return DualSolution {
                    x: DVector::zeros(n),
                    multipliers: DVector::zeros(self.count()),
                    active: Vec::new(),
                    status: DualStatus::Infeasible,
                }
            }
        };
        let l = chol.l();
        // J = L⁻ᵀ
        let j = l
            .transpose()
            .solve_upper_triangular(&DMatrix::identity(n, n))
            .expect("cholesky factor is nonsingular");
        let x0 = -chol.solve(self.linear);

        let start = if hint.is_empty() {
            None
        } else {
            self.load_hint(&j, &x0, hint)
        };
        let start = start.unwrap_or_else(|| State {
            f: self.fresh_factor(j),
            x: x0,
            active: Vec::new(),
            u: Vec::new(),
        });
        self.iterate(start)
    }

    fn fresh_factor(&self, j: DMatrix<f64>) -> Factor {
        let n = self.dim();
        Factor {
            j,
            r: DMatrix::zeros(n, n),
            q: 0,
        }
    }

    /// Equality QP on the hinted set, kept only if it is dual feasible.
    fn load_hint(&self, j: &DMatrix<f64>, x0: &DVector<f64>, hint: &[usize]) -> Option<State> {
        let n = self.dim();
        let mut f = self.fresh_factor(j.clone());
        let mut x = x0.clone();
        let mut active: Vec<usize> = Vec::new();
        let mut u: Vec<f64> = Vec::new();
        for &p in hint {
            if p >= self.count() || active.contains(&p) || f.q >= n {
                continue;
            }
            let np = self.normals.column(p);
            if np.norm() == 0.0 {
                continue;
            }
            let d = f.j.tr_mul(&np);
            let d2 = d.rows(f.q, n - f.q).norm_squared();
            if d2 <= 1e-20 * d.norm_squared().max(f64::MIN_POSITIVE) {
                continue;
            }
            let z = f.j.columns(f.q, n - f.q) * d.rows(f.q, n - f.q);
            let r = f.back_substitute(&d);
            let t = -self.slack(&x, p) / d2;
            x += &z * t;
            for (k, uk) in u.iter_mut().enumerate() {
                *uk -= t * r[k];
            }
            u.push(t);
            active.push(p);
            f.add(d);
        }
        let mult_tol = 1e-10 * (1.0 + u.iter().fold(0.0f64, |a, b| a.max(b.abs())));
        if u.iter().any(|&v| v < -mult_tol) {
            return None;
        }
        for v in &mut u {
            *v = v.max(0.0);
        }
        Some(State { f, x, active, u })
    }

    fn iterate(&self, state: State) -> DualSolution {
        let n = self.dim();
        let m = self.count();
        let State {
            mut f,
            mut x,
            mut active,
            mut u,
        } = state;
        let norms: Vec<f64> = (0..m).map(|k| self.normals.column(k).norm()).collect();
        let mut is_active = vec![false; m];
        for &p in &active {
            is_active[p] = true;
        }
        let max_iter = 50 + 10 * (n + m);
        let mut iterations = 0;

        let finish = |x: DVector<f64>, active: Vec<usize>, u: Vec<f64>, status| {
            let mut multipliers = DVector::zeros(m);
            for (k, &p) in active.iter().enumerate() {
                multipliers[p] = u[k];
            }
            DualSolution {
                x,
                multipliers,
                active,
                status,
            }
        };

        loop {
            // Step 1: most violated constraint, scaled by its normal.
            let values = self.normals.tr_mul(&x);
            let xmax = x.amax();
            let mut chosen: Option<(usize, f64)> = None;
            for k in 0..m {
                if is_active[k] || norms[k] == 0.0 {
                    continue;
                }
                let s = values[k] - self.rhs[k];
                let tol = 1e-12 * (1.0 + self.rhs[k].abs() + norms[k] * xmax);
                if s < -tol {
                    let score = s / norms[k];
                    if chosen.is_none_or(|(_, best)| score < best) {
                        chosen = Some((k, score));
                    }
                }
            }
            let Some((p, _)) = chosen else {
                return finish(x, active, u, DualStatus::Optimal);
            };
            let np = self.normals.column(p);
            let mut up = 0.0;

            // Step 2: move towards feasibility of constraint p.
            loop {
                iterations += 1;
                if iterations > max_iter {
                    return finish(x, active, u, DualStatus::IterationLimit);
                }
                let d = f.j.tr_mul(&np);
                let q = f.q;
                let d2 = d.rows(q, n - q).norm_squared();
                let dependent = q >= n || d2 <= 1e-24 * d.norm_squared().max(f64::MIN_POSITIVE);
                let z = if dependent {
                    DVector::zeros(n)
                } else {
                    f.j.columns(q, n - q) * d.rows(q, n - q)
                };
                let r = f.back_substitute(&d);

                let mut t1 = f64::INFINITY;
                let mut drop_at = None;
                for k in 0..q {
                    if r[k] > 0.0 {
                        let ratio = u[k] / r[k];
                        if ratio < t1 {
                            t1 = ratio;
                            drop_at = Some(k);
                        }
                    }
                }
                let sp = self.slack(&x, p);
                let t2 = if dependent { f64::INFINITY } else { -sp / d2 };

                if t1.is_infinite() && t2.is_infinite() {
                    // n_p is a non-negative combination of active normals pointing the
                    // wrong way: Farkas certificate of infeasibility.
                    return finish(x, active, u, DualStatus::Infeasible);
                }
                if t2.is_infinite() {
                    for (k, uk) in u.iter_mut().enumerate() {
                        *uk -= t1 * r[k];
                    }
                    up += t1;
                    let l = drop_at.expect("finite t1 has an index");
                    f.drop(l);
                    is_active[active.remove(l)] = false;
                    u.remove(l);
                    continue;
                }
                let t = t1.min(t2);
                x += &z * t;
                for (k, uk) in u.iter_mut().enumerate() {
                    *uk -= t * r[k];
                }
                up += t;
                if t2 <= t1 {
                    f.add(d);
                    active.push(p);
                    is_active[p] = true;
                    u.push(up);
                    break;
                }
                let l = drop_at.expect("partial step has an index");
                f.drop(l);
                is_active[active.remove(l)] = false;
                u.remove(l);
            }
        }
    }
}

struct State {
    f: Factor,
    x: DVector<f64>,
    active: Vec<usize>,
    u: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solve(g: &[f64], c: &[f64], cols: &[&[f64]], b: &[f64]) -> DualSolution {
        let n = c.len();
        let hessian = DMatrix::from_row_slice(n, n, g);
        let linear = DVector::from_row_slice(c);
        let mut normals = DMatrix::zeros(n, cols.len());
        for (k, col) in cols.iter().enumerate() {
            normals.set_column(k, &DVector::from_row_slice(col));
        }
        let rhs = DVector::from_row_slice(b);
        DualQp {
            hessian: &hessian,
            linear: &linear,
            normals: &normals,
            rhs: &rhs,
        }
        .solve(&[])
    }

    #[test]
    fn quadprog_reference_problem() {
        // minimize ½x² + ½y² + x  s.t.  x + 2y ≥ 1  →  (-0.6, 0.8)
        let s = solve(&[1.0, 0.0, 0.0, 1.0], &[1.0, 0.0], &[&[1.0, 2.0]], &[1.0]);
        assert_eq!(s.status, DualStatus::Optimal);
        assert!((s.x[0] + 0.6).abs() < 1e-12 && (s.x[1] - 0.8).abs() < 1e-12);
        assert!((s.multipliers[0] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn drops_constraints_that_become_inactive() {
        // minimize ½‖x - (2, 2)‖²  s.t.  x ≤ 1, y ≤ 1, x + y ≤ 1.5
        let s = solve(
            &[1.0, 0.0, 0.0, 1.0],
            &[-2.0, -2.0],
            &[&[-1.0, 0.0], &[0.0, -1.0], &[-1.0, -1.0]],
            &[-1.0, -1.0, -1.5],
        );
        assert_eq!(s.status, DualStatus::Optimal);
        assert!((s.x[0] - 0.75).abs() < 1e-12 && (s.x[1] - 0.75).abs() < 1e-12);
        assert_eq!(s.active, vec![2]);
    }

    #[test]
    fn detects_infeasibility() {
        let s = solve(
            &[1.0, 0.0, 0.0, 1.0],
            &[0.0, 0.0],
            &[&[1.0, 0.0], &[-1.0, 0.0]],
            &[1.0, 0.0],
        );
        assert_eq!(s.status, DualStatus::Infeasible);
    }

    #[test]
    fn hint_shortcut_agrees_with_cold_start() {
        let hessian = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let linear = DVector::from_row_slice(&[-4.0, -3.0]);
        let normals = DMatrix::from_row_slice(2, 3, &[-1.0, 0.0, -1.0, 0.0, -1.0, -1.0]);
        let rhs = DVector::from_row_slice(&[-1.0, -1.0, -1.5]);
        let qp = DualQp {
            hessian: &hessian,
            linear: &linear,
            normals: &normals,
            rhs: &rhs,
        };
        let cold = qp.solve(&[]);
        let warm = qp.solve(&cold.active);
        assert!((&cold.x - &warm.x).amax() < 1e-12);
        // a wrong hint is repaired by the dual iteration or discarded
        for hint in [vec![0, 1], vec![0], vec![1, 2], vec![2, 0, 1]] {
            let other = qp.solve(&hint);
            assert_eq!(other.status, DualStatus::Optimal);
            assert!((&cold.x - &other.x).amax() < 1e-12, "{hint:?}");
        }
    }
}
