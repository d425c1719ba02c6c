//! Planar double-integrator agents and their exact zero-order-hold discretisation.

use nalgebra::{Matrix4, Matrix4x2, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::ModelError;

/// Position and velocity of one agent, SI units.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AgentState {
    pub px: f64,
    pub py: f64,
    pub vx: f64,
    pub vy: f64,
}

impl AgentState {
    pub const fn new(px: f64, py: f64, vx: f64, vy: f64) -> Self {
        Self { px, py, vx, vy }
    }

    /// State at rest at `(x, y)`.
    pub const fn at_rest(x: f64, y: f64) -> Self {
        Self::new(x, y, 0.0, 0.0)
    }

    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.px, self.py)
    }

    pub fn velocity(&self) -> Vector2<f64> {
        Vector2::new(self.vx, self.vy)
    }

    pub fn to_vector(self) -> Vector4<f64> {
        Vector4::new(self.px, self.py, self.vx, self.vy)
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.px, self.py, self.vx, self.vy]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Squared Euclidean distance in the full 4-d state space.
    pub fn squared_error(&self, other: &AgentState) -> f64 {
        (self.to_vector() - other.to_vector()).norm_squared()
    }
}

/// Acceleration command of one agent.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub ax: f64,
    pub ay: f64,
}

impl ControlInput {
    pub const ZERO: ControlInput = ControlInput { ax: 0.0, ay: 0.0 };

    pub const fn new(ax: f64, ay: f64) -> Self {
        Self { ax, ay }
    }

    pub fn to_vector(self) -> Vector2<f64> {
        Vector2::new(self.ax, self.ay)
    }

    pub fn from_vector(v: &Vector2<f64>) -> Self {
        Self::new(v[0], v[1])
    }

    pub fn norm(&self) -> f64 {
        self.ax.hypot(self.ay)
    }

    pub fn is_finite(&self) -> bool {
        self.ax.is_finite() && self.ay.is_finite()
    }
}

/// Geometry and actuation limits shared by every agent of a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentParams {
    /// Collision radius of the circular agent model (m).
    pub radius: f64,
    /// Side length of the square mover footprint (m).
    pub width: f64,
    /// Safety margin added to separation and arena constraints (m).
    pub margin: f64,
    pub v_max: f64,
    pub a_max: f64,
    /// Acceleration bound available to the safety filter (m/s²).
    pub a_peak: f64,
}

impl Default for AgentParams {
    fn default() -> Self {
        Self {
            radius: 0.08,
            width: 0.115,
            margin: 0.005,
            v_max: 1.0,
            a_max: 5.0,
            a_peak: 8.0,
        }
    }
}

impl AgentParams {
    /// Minimum centre distance enforced by the separation constraints, `2R + ε`.
    pub fn safe_distance(&self) -> f64 {
        2.0 * self.radius + self.margin
    }

    /// Physical contact distance `2R`.
    pub fn contact_distance(&self) -> f64 {
        2.0 * self.radius
    }

    /// Distance the arena walls are pulled in by, `w/2 + ε`.
    pub fn wall_clearance(&self) -> f64 {
        0.5 * self.width + self.margin
    }

    pub fn with_margin(mut self, margin: f64) -> Self {
        self.margin = margin;
        self
    }

    /// Checks the parameter invariants, naming the first offending field.
    pub fn validate(&self) -> Result<(), ModelError> {
        let checks: [(&'static str, f64, bool); 6] = [
            ("R", self.radius, self.radius > 0.0),
            ("w", self.width, self.width > 0.0),
            ("eps", self.margin, self.margin >= 0.0),
            ("v_max", self.v_max, self.v_max > 0.0),
            ("a_max", self.a_max, self.a_max > 0.0),
            ("a_peak", self.a_peak, self.a_peak >= self.a_max),
        ];
        for (field, value, ok) in checks {
            if !value.is_finite() || !ok {
                return Err(ModelError::InvalidParam { field, value });
            }
        }
        Ok(())
    }
}

/// Prediction horizon `T_f` sampled every `dt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Horizon {
    pub tf: f64,
    pub dt: f64,
}

impl Default for Horizon {
    fn default() -> Self {
        Self { tf: 1.0, dt: 0.1 }
    }
}

impl Horizon {
    /// Knot count `K = T_f / dt`; `T_f` must be a whole multiple of `dt`.
    pub fn knots(&self) -> Result<usize, ModelError> {
        if !self.dt.is_finite() || self.dt <= 0.0 {
            return Err(ModelError::InvalidHorizon { field: "dt", value: self.dt });
        }
        let k = (self.tf / self.dt).round();
        if !self.tf.is_finite() || k < 1.0 || (k * self.dt - self.tf).abs() > 1e-9 * self.tf.max(1.0) {
            return Err(ModelError::InvalidHorizon { field: "Tf", value: self.tf });
        }
        Ok(k as usize)
    }
}

/// Exact discretisation of the planar double integrator for a fixed step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscreteDynamics {
    pub dt: f64,
    pub ad: Matrix4<f64>,
    pub bd: Matrix4x2<f64>,
}

/// Zero-order-hold discretisation of `ẋ = Ax + Bu` with `A = [[0, I], [0, 0]]`, `B = [0; I]`.
pub fn discretize(dt: f64) -> Result<DiscreteDynamics, ModelError> {
    if !dt.is_finite() || dt < 0.0 {
        return Err(ModelError::InvalidStep(dt));
    }
    let mut ad = Matrix4::identity();
    ad[(0, 2)] = dt;
    ad[(1, 3)] = dt;
    let half = 0.5 * dt * dt;
    let mut bd = Matrix4x2::zeros();
    bd[(0, 0)] = half;
    bd[(1, 1)] = half;
    bd[(2, 0)] = dt;
    bd[(3, 1)] = dt;
    Ok(DiscreteDynamics { dt, ad, bd })
}

/// Advances one agent by one sample under a constant input.
pub fn step(x: &AgentState, u: &ControlInput, dynamics: &DiscreteDynamics) -> AgentState {
    let next = dynamics.ad * x.to_vector() + dynamics.bd * u.to_vector();
    AgentState::from_vector(&next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn discretize_closed_form() {
        let d = discretize(0.1).unwrap();
        assert_abs_diff_eq!(d.ad[(0, 2)], 0.1);
        assert_abs_diff_eq!(d.ad[(1, 3)], 0.1);
        assert_abs_diff_eq!(d.bd[(0, 0)], 0.005, epsilon = 1e-15);
        assert_abs_diff_eq!(d.bd[(1, 1)], 0.005, epsilon = 1e-15);
        assert_abs_diff_eq!(d.bd[(2, 0)], 0.1);
        assert_abs_diff_eq!(d.bd[(0, 1)], 0.0);

        let zero = discretize(0.0).unwrap();
        assert_eq!(zero.ad, Matrix4::identity());
        assert_eq!(zero.bd, Matrix4x2::zeros());

        let d2 = discretize(0.2).unwrap();
        assert_abs_diff_eq!(d2.bd[(0, 0)], 0.02, epsilon = 1e-15);
    }

    #[test]
    fn discretize_rejects_bad_steps() {
        assert!(discretize(f64::NAN).is_err());
        assert!(discretize(f64::INFINITY).is_err());
        assert!(discretize(-0.1).is_err());
    }

    #[test]
    fn step_examples() {
        let d = discretize(0.1).unwrap();
        let drift = step(&AgentState::new(0.0, 0.0, 1.0, 0.0), &ControlInput::ZERO, &d);
        assert_abs_diff_eq!(drift.px, 0.1);
        assert_abs_diff_eq!(drift.vx, 1.0);

        let push = step(&AgentState::default(), &ControlInput::new(1.0, 0.0), &d);
        assert_abs_diff_eq!(push.px, 0.005, epsilon = 1e-15);
        assert_abs_diff_eq!(push.vx, 0.1, epsilon = 1e-15);

        let x = AgentState::new(1.0, 1.0, -1.0, 2.0);
        let u = ControlInput::new(0.5, -0.5);
        let got = step(&x, &u, &d);
        // Oracle: explicit row-by-row product with the ZOH matrices.
        let (dt, h) = (0.1, 0.5 * 0.1 * 0.1);
        let want = [
            1.0 + dt * -1.0 + h * 0.5,
            1.0 + dt * 2.0 + h * -0.5,
            -1.0 + dt * 0.5,
            2.0 + dt * -0.5,
        ];
        assert_abs_diff_eq!(want[0], 0.9025, epsilon = 1e-12);
        assert_abs_diff_eq!(want[1], 1.1975, epsilon = 1e-12);
        assert_abs_diff_eq!(want[2], -0.95, epsilon = 1e-12);
        assert_abs_diff_eq!(want[3], 1.95, epsilon = 1e-12);
        for (g, w) in got.to_array().iter().zip(want) {
            assert_abs_diff_eq!(*g, w, epsilon = 1e-12);
        }
    }

    #[test]
    fn params_validation_names_field() {
        let mut p = AgentParams::default();
        assert!(p.validate().is_ok());
        p.radius = -0.1;
        match p.validate() {
            Err(ModelError::InvalidParam { field, .. }) => assert_eq!(field, "R"),
            other => panic!("unexpected {other:?}"),
        }
        let p = AgentParams { a_peak: 4.0, ..AgentParams::default() };
        assert!(p.validate().is_err());
    }

    #[test]
    fn horizon_knots() {
        assert_eq!(Horizon::default().knots(), Ok(10));
        assert_eq!(Horizon { tf: 0.5, dt: 0.1 }.knots(), Ok(5));
        assert!(Horizon { tf: 0.25, dt: 0.1 }.knots().is_err());
        assert!(Horizon { tf: 1.0, dt: 0.0 }.knots().is_err());
        assert!(Horizon { tf: 0.0, dt: 0.1 }.knots().is_err());
    }

    fn finite() -> impl Strategy<Value = f64> {
        -10.0f64..10.0
    }

    proptest! {
        #[test]
        fn step_is_linear(
            x1 in prop::array::uniform4(finite()), x2 in prop::array::uniform4(finite()),
            u1 in prop::array::uniform2(finite()), u2 in prop::array::uniform2(finite()),
            a in finite(), b in finite(), dt in 0.0f64..1.0,
        ) {
            let d = discretize(dt).unwrap();
            let s = |x: [f64; 4]| AgentState::new(x[0], x[1], x[2], x[3]);
            let c = |u: [f64; 2]| ControlInput::new(u[0], u[1]);
            let mixed_x = s(x1).to_vector() * a + s(x2).to_vector() * b;
            let mixed_u = c(u1).to_vector() * a + c(u2).to_vector() * b;
            let lhs = step(&AgentState::from_vector(&mixed_x), &ControlInput::from_vector(&mixed_u), &d).to_vector();
            let rhs = step(&s(x1), &c(u1), &d).to_vector() * a + step(&s(x2), &c(u2), &d).to_vector() * b;
            prop_assert!((lhs - rhs).amax() <= 1e-9);
        }

        #[test]
        fn step_matches_analytic_integration(
            x in prop::array::uniform4(finite()), u in prop::array::uniform2(finite()), dt in 0.0f64..0.5,
        ) {
            let d = discretize(dt).unwrap();
            let got = step(&AgentState::new(x[0], x[1], x[2], x[3]), &ControlInput::new(u[0], u[1]), &d);
            // p(t) = p + v t + a t²/2, v(t) = v + a t
            let want = [
                x[0] + x[2] * dt + u[0] * dt * dt / 2.0,
                x[1] + x[3] * dt + u[1] * dt * dt / 2.0,
                x[2] + u[0] * dt,
                x[3] + u[1] * dt,
            ];
            for (g, w) in got.to_array().iter().zip(want) {
                prop_assert!((g - w).abs() <= 1e-12);
            }
        }

        #[test]
        fn axes_are_decoupled(
            x in prop::array::uniform4(finite()), u in prop::array::uniform2(finite()),
            dpx in finite(), dvx in finite(), dax in finite(),
        ) {
            let d = discretize(0.1).unwrap();
            let base = step(&AgentState::new(x[0], x[1], x[2], x[3]), &ControlInput::new(u[0], u[1]), &d);
            let bumped = step(
                &AgentState::new(x[0] + dpx, x[1], x[2] + dvx, x[3]),
                &ControlInput::new(u[0] + dax, u[1]),
                &d,
            );
            prop_assert_eq!(base.py, bumped.py);
            prop_assert_eq!(base.vy, bumped.vy);
        }
    }
}
