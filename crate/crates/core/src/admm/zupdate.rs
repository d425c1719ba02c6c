//! Collision-feasible projection of position copies, one knot at a time.

use std::cmp::Ordering;

use nalgebra::Vector2;

pub const SWEEP_TOL: f64 = 1e-9;
pub const MAX_SWEEPS: usize = 50;

/// Splits a violating pair symmetrically to distance `d`; coincident points separate along +x.
fn split(zi: &mut Vector2<f64>, zj: &mut Vector2<f64>, d: f64) -> f64 {
    let diff = *zj - *zi;
    let dist = diff.norm();
    if dist >= d {
        return 0.0;
    }
    let dir = if dist > 0.0 { diff / dist } else { Vector2::x() };
    let mid = (*zi + *zj) * 0.5;
    let new_i = mid - dir * (0.5 * d);
    let new_j = mid + dir * (0.5 * d);
    let change = (new_i - *zi).norm().max((new_j - *zj).norm());
    *zi = new_i;
    *zj = new_j;
    change
}

/// Label-free processing order: nearest copy first, then by coordinates.
fn order(own: &Vector2<f64>, others: &[Vector2<f64>]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..others.len()).collect();
    let key = |j: usize| ((others[j] - own).norm(), others[j][0], others[j][1]);
    idx.sort_by(|&a, &b| {
        let (ka, kb) = (key(a), key(b));
        ka.0.partial_cmp(&kb.0)
            .unwrap_or(Ordering::Equal)
            .then(ka.1.partial_cmp(&kb.1).unwrap_or(Ordering::Equal))
            .then(ka.2.partial_cmp(&kb.2).unwrap_or(Ordering::Equal))
    });
    idx
}

/// Approximately minimises `‖z_i − a‖² + Σ_j ‖z_ij − b_j‖²` subject to `‖z_i − z_ij‖ ≥ d`,
/// starting from the unconstrained optimum. Exact when at most one pair is active.
pub fn separate_knot(a: Vector2<f64>, b: &[Vector2<f64>], d: f64) -> (Vector2<f64>, Vec<Vector2<f64>>) {
    let mut zi = a;
    let mut zj = b.to_vec();
    let seq = order(&a, b);
    for _ in 0..MAX_SWEEPS {
        let mut change: f64 = 0.0;
        for &j in &seq {
            change = change.max(split(&mut zi, &mut zj[j], d));
        }
        if change < SWEEP_TOL {
            break;
        }
    }
    // Any pair still short after the sweeps is fixed by moving the copy alone.
    for &j in &seq {
        let diff = zj[j] - zi;
        let dist = diff.norm();
        if dist < d {
            let dir = if dist > 0.0 { diff / dist } else { Vector2::x() };
            zj[j] = zi + dir * d;
        }
    }
    (zi, zj)
}
