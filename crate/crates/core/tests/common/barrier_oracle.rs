//! Independent references for the barrier module: finite differences in exact rational
//! arithmetic, and brute-force grid search over one pair's inputs.

use num::{BigInt, BigRational, ToPrimitive};

fn q(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite")
}

/// `‖p_i(t) − p_j(t)‖² − d²` with each agent under a constant input, evaluated exactly.
fn h_at(s: &[[f64; 4]; 2], u: &[[f64; 2]; 2], d: f64, t: &BigRational) -> BigRational {
    let half = BigRational::new(BigInt::from(1), BigInt::from(2));
    let mut dist2 = BigRational::from_integer(BigInt::from(0));
    for ax in 0..2 {
        let pos = |a: usize| q(s[a][ax]) + q(s[a][2 + ax]) * t + &half * q(u[a][ax]) * t * t;
        let diff = pos(0) - pos(1);
        dist2 += &diff * &diff;
    }
    dist2 - q(d) * q(d)
}

/// Central differences of the barrier with step `1e-5 s`, exact up to truncation.
/// States are `[px, py, vx, vy]`; returns `(ḣ, ḧ)`.
pub fn finite_difference_rates(si: [f64; 4], sj: [f64; 4], ui: [f64; 2], uj: [f64; 2], d: f64) -> (f64, f64) {
    let s = [si, sj];
    let u = [ui, uj];
    let dt = BigRational::new(BigInt::from(1), BigInt::from(100_000));
    let zero = BigRational::from_integer(BigInt::from(0));
    let plus = h_at(&s, &u, d, &dt);
    let mid = h_at(&s, &u, d, &zero);
    let minus = h_at(&s, &u, d, &(-dt.clone()));
    let two = BigRational::from_integer(BigInt::from(2));
    let first = (&plus - &minus) / (&two * &dt);
    let second = (plus - &two * mid + minus) / (&dt * &dt);
    (first.to_f64().unwrap(), second.to_f64().unwrap())
}

/// Minimises `f` over `[-half_width, half_width]⁴` restricted to `feasible` by nested grids, each
/// refining a window around the previous best. The final spacing is below `1e-3`.
/// Windows are four cells wide, which covers the optimum when the active boundaries
/// are aligned with the grid axes or their diagonals.
pub fn grid_minimise(half_width: f64, f: impl Fn(&[f64; 4]) -> f64, feasible: impl Fn(&[f64; 4]) -> bool) -> [f64; 4] {
    let mut center = [0.0; 4];
    let mut step = 0.5;
    let mut reach = half_width;
    let mut best: Option<([f64; 4], f64)> = None;
    while step > 5e-4 {
        let k = (reach / step).round() as i64;
        let mut level_best: Option<([f64; 4], f64)> = None;
        for a in -k..=k {
            for b in -k..=k {
                for c in -k..=k {
                    for e in -k..=k {
                        let x = [
                            center[0] + a as f64 * step,
                            center[1] + b as f64 * step,
                            center[2] + c as f64 * step,
                            center[3] + e as f64 * step,
                        ];
                        if !feasible(&x) {
                            continue;
                        }
                        let v = f(&x);
                        if level_best.is_none_or(|(_, bv)| v < bv) {
                            level_best = Some((x, v));
                        }
                    }
                }
            }
        }
        let (x, v) = level_best.expect("grid found no feasible point");
        if best.is_none_or(|(_, bv)| v <= bv) {
            best = Some((x, v));
        }
        center = best.unwrap().0;
        reach = 4.0 * step;
        step /= 5.0;
    }
    best.unwrap().0
}

/// Grid reference for the filter on a single pair: minimise `‖u − u*‖²` over both inputs
/// with `‖u_a‖ ≤ a_peak` and `constant + ciᵀu_i + cjᵀu_j ≥ 0`; with a penalty the pair row
/// is softened to `penalty·max(0, −ψ₂)²`.
pub fn grid_pair_filter(
    u_star: [f64; 4],
    ci: [f64; 2],
    cj: [f64; 2],
    constant: f64,
    a_peak: f64,
    penalty: Option<f64>,
) -> [f64; 4] {
    let psi = |x: &[f64; 4]| constant + ci[0] * x[0] + ci[1] * x[1] + cj[0] * x[2] + cj[1] * x[3];
    let in_balls = |x: &[f64; 4]| x[0].hypot(x[1]) <= a_peak && x[2].hypot(x[3]) <= a_peak;
    let dev = |x: &[f64; 4]| (0..4).map(|k| (x[k] - u_star[k]).powi(2)).sum::<f64>();
    match penalty {
        None => grid_minimise(a_peak, dev, |x| in_balls(x) && psi(x) >= 0.0),
        Some(w) => grid_minimise(a_peak, |x| dev(x) + w * (-psi(x)).max(0.0).powi(2), in_balls),
    }
}
