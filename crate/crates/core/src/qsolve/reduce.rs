//! Null-space elimination of linear equality constraints.

use nalgebra::{DMatrix, DVector};

/// Orthonormal split of `R^n` into the row space of `A` and its null space, from a
/// column-pivoted Householder QR of `Aᵀ`.
///
/// Every `x` with `A x = b` is `x_p + Z y` for the particular solution returned by
/// [`EqualityReduction::particular`] and the basis [`EqualityReduction::null_basis`].
#[derive(Debug, Clone)]
pub struct EqualityReduction {
    n: usize,
    m: usize,
    rank: usize,
    /// First `rank` columns of Q.
    range: DMatrix<f64>,
    /// Remaining `n - rank` columns of Q.
    null: DMatrix<f64>,
    /// `rank x m` upper-trapezoidal factor, columns in pivot order.
    r: DMatrix<f64>,
    /// `perm[k]` is the equality row placed at pivot position `k`.
    perm: Vec<usize>,
}

impl EqualityReduction {
    /// Reduction for a problem without equality constraints.
    pub fn identity(n: usize) -> Self {
        Self {
            n,
            m: 0,
            rank: 0,
            range: DMatrix::zeros(n, 0),
            null: DMatrix::identity(n, n),
            r: DMatrix::zeros(0, 0),
            perm: Vec::new(),
        }
    }

    pub fn new(eq_a: &DMatrix<f64>) -> Self {
        let (m, n) = eq_a.shape();
        if m == 0 {
            return Self::identity(n);
        }
        let mut a = eq_a.transpose();
        let mut q = DMatrix::<f64>::identity(n, n);
        let mut perm: Vec<usize> = (0..m).collect();
        let steps = n.min(m);
        let mut v = DVector::<f64>::zeros(n);
        let mut scratch = DVector::<f64>::zeros(n.max(m));
        let mut first_diag = 0.0f64;
        let mut rank = 0;
        for k in 0..steps {
            let (best, best_norm) = (k..m)
                .map(|j| (j, a.view((k, j), (n - k, 1)).norm()))
                .fold((k, -1.0), |acc, c| if c.1 > acc.1 { c } else { acc });
            if k == 0 {
                first_diag = best_norm;
            }
            if best_norm <= 1e-12 * first_diag.max(f64::MIN_POSITIVE) {
                break;
            }
            a.swap_columns(k, best);
            perm.swap(k, best);

            let x0 = a[(k, k)];
            let alpha = if x0 >= 0.0 { -best_norm } else { best_norm };
            for i in k..n {
                v[i] = a[(i, k)];
            }
            v[k] -= alpha;
            let vnorm = v.rows(k, n - k).norm();
            if vnorm > 0.0 {
                for i in k..n {
                    v[i] /= vnorm;
                }
                // A[k.., k..] -= 2 v (vᵀ A[k.., k..])
                for j in k..m {
                    let mut dot = 0.0;
                    for i in k..n {
                        dot += v[i] * a[(i, j)];
                    }
                    scratch[j] = dot;
                }
                for j in k..m {
                    let s = 2.0 * scratch[j];
                    for i in k..n {
                        a[(i, j)] -= s * v[i];
                    }
                }
                // Q[:, k..] -= 2 (Q[:, k..] v) vᵀ
                for row in 0..n {
                    let mut dot = 0.0;
                    for i in k..n {
                        dot += q[(row, i)] * v[i];
                    }
                    scratch[row] = dot;
                }
                for i in k..n {
                    let s = 2.0 * v[i];
                    for row in 0..n {
                        q[(row, i)] -= s * scratch[row];
                    }
                }
            }
            a[(k, k)] = alpha;
            for i in k + 1..n {
                a[(i, k)] = 0.0;
            }
            rank = k + 1;
        }
        let range = q.columns(0, rank).into_owned();
        let null = q.columns(rank, n - rank).into_owned();
        let r = a.rows(0, rank).into_owned();
        Self {
            n,
            m,
            rank,
            range,
            null,
            r,
            perm,
        }
    }

    /// Block-diagonal reduction for `blkdiag(A_1, ..., A_k)`.
    pub fn block_diagonal(blocks: &[&EqualityReduction]) -> Self {
        let n: usize = blocks.iter().map(|b| b.n).sum();
        let m: usize = blocks.iter().map(|b| b.m).sum();
        let rank: usize = blocks.iter().map(|b| b.rank).sum();
        let nulls: usize = blocks.iter().map(|b| b.n - b.rank).sum();
        let mut range = DMatrix::zeros(n, rank);
        let mut null = DMatrix::zeros(n, nulls);
        let mut r = DMatrix::zeros(rank, m);
        let mut perm = Vec::with_capacity(m);
        let (mut row0, mut rank0, mut null0, mut m0) = (0, 0, 0, 0);
        for b in blocks {
            range
                .view_mut((row0, rank0), (b.n, b.rank))
                .copy_from(&b.range);
            null.view_mut((row0, null0), (b.n, b.n - b.rank))
                .copy_from(&b.null);
            r.view_mut((rank0, m0), (b.rank, b.m)).copy_from(&b.r);
            perm.extend(b.perm.iter().map(|p| p + m0));
            row0 += b.n;
            rank0 += b.rank;
            null0 += b.n - b.rank;
            m0 += b.m;
        }
        // Pivot positions must list full-rank columns first.
        let mut order: Vec<usize> = Vec::with_capacity(m);
        let mut deficient = Vec::new();
        let mut m0 = 0;
        for b in blocks {
            order.extend((0..b.rank).map(|k| m0 + k));
            deficient.extend((b.rank..b.m).map(|k| m0 + k));
            m0 += b.m;
        }
        order.extend(deficient);
        let r = DMatrix::from_fn(rank, m, |i, j| r[(i, order[j])]);
        let perm = order.iter().map(|&k| perm[k]).collect();
        Self {
            n,
            m,
            rank,
            range,
            null,
            r,
            perm,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn constraint_count(&self) -> usize {
        self.m
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn reduced_dim(&self) -> usize {
        self.n - self.rank
    }

    pub fn null_basis(&self) -> &DMatrix<f64> {
        &self.null
    }

    pub fn has_equalities(&self) -> bool {
        self.m > 0
    }

    /// Minimum-norm solution of `A x = b`, or `None` when the system is inconsistent.
    pub fn particular(&self, b: &DVector<f64>) -> Option<DVector<f64>> {
        if self.m == 0 {
            return Some(DVector::zeros(self.n));
        }
        let mut w = DVector::zeros(self.rank);
        for k in 0..self.rank {
            let mut acc = b[self.perm[k]];
            for i in 0..k {
                acc -= self.r[(i, k)] * w[i];
            }
            w[k] = acc / self.r[(k, k)];
        }
        let scale = 1.0 + b.amax();
        for k in self.rank..self.m {
            let mut acc = 0.0;
            for i in 0..self.rank {
                acc += self.r[(i, k)] * w[i];
            }
            if (acc - b[self.perm[k]]).abs() > 1e-9 * scale {
                return None;
            }
        }
        Some(&self.range * w)
    }

    /// Component of `v` orthogonal to the row space of `A`.
    pub fn project_null(&self, v: &DVector<f64>) -> DVector<f64> {
        if self.rank == 0 {
            return v.clone();
        }
        v - &self.range * self.range.tr_mul(v)
    }

    /// Least-squares multipliers `ν` minimising `‖v + Aᵀν‖`.
    pub fn multipliers(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut nu = DVector::zeros(self.m);
        if self.rank == 0 {
            return nu;
        }
        // Aᵀ restricted to pivot columns is range * R[:, ..rank].
        let rhs = -self.range.tr_mul(v);
        let mut w = DVector::zeros(self.rank);
        for k in (0..self.rank).rev() {
            let mut acc = rhs[k];
            for j in k + 1..self.rank {
                acc -= self.r[(k, j)] * w[j];
            }
            w[k] = acc / self.r[(k, k)];
        }
        for k in 0..self.rank {
            nu[self.perm[k]] = w[k];
        }
        nu
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check(a: &DMatrix<f64>, b: &DVector<f64>) {
        let red = EqualityReduction::new(a);
        let xp = red.particular(b).expect("consistent");
        assert!((a * &xp - b).amax() < 1e-10);
        let z = red.null_basis();
        assert!((a * z).amax() < 1e-10);
        let ztz = z.tr_mul(z);
        assert!((ztz - DMatrix::identity(z.ncols(), z.ncols())).amax() < 1e-12);
    }

    #[test]
    fn reduction_properties() {
        let a = DMatrix::from_row_slice(2, 4, &[1.0, 2.0, 0.0, -1.0, 0.0, 1.0, 3.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, -2.0]);
        check(&a, &b);
        let red = EqualityReduction::new(&a);
        assert_eq!(red.rank(), 2);
        assert_eq!(red.reduced_dim(), 2);
    }

    #[test]
    fn dependent_rows_detected() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 0.0, 2.0, 2.0, 0.0, 0.0, 0.0, 1.0]);
        let red = EqualityReduction::new(&a);
        assert_eq!(red.rank(), 2);
        let consistent = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        check(&a, &consistent);
        let inconsistent = DVector::from_vec(vec![1.0, 3.0, 3.0]);
        assert!(red.particular(&inconsistent).is_none());
    }

    #[test]
    fn multipliers_recover_row_combination() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0]);
        let red = EqualityReduction::new(&a);
        let nu_true = DVector::from_vec(vec![0.5, -2.0]);
        let v = -a.transpose() * &nu_true;
        let nu = red.multipliers(&v);
        assert!((nu - nu_true).amax() < 1e-12);
    }

    #[test]
    fn block_diagonal_matches_direct() {
        let a1 = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let a2 = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 2.0, 0.0, 3.0, 1.0]);
        let r1 = EqualityReduction::new(&a1);
        let r2 = EqualityReduction::new(&a2);
        let blk = EqualityReduction::block_diagonal(&[&r1, &r2]);
        let mut a = DMatrix::zeros(3, 5);
        a.view_mut((0, 0), (1, 2)).copy_from(&a1);
        a.view_mut((1, 2), (2, 3)).copy_from(&a2);
        let b = DVector::from_vec(vec![2.0, 1.0, -1.0]);
        let xp = blk.particular(&b).unwrap();
        assert!((&a * &xp - &b).amax() < 1e-12);
        assert!((&a * blk.null_basis()).amax() < 1e-12);
        let nu_true = DVector::from_vec(vec![1.0, -1.0, 0.25]);
        let nu = blk.multipliers(&(-a.transpose() * &nu_true));
        assert!((nu - nu_true).amax() < 1e-12);
    }
}
