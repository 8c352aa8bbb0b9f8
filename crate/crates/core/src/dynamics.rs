//! Longitudinal car model, control-affine model abstraction and Lie derivatives.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("time step must be positive, got {0}")]
    NonPositiveStep(f64),
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid car parameters: {0}")]
    InvalidParams(String),
}

/// Physical parameters of one car.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CarParams {
    pub mass_kg: f64,
    pub gravity_mps2: f64,
    /// Constant drag term f0 (N).
    pub drag_f0_n: f64,
    /// Linear drag term f1 (N·s/m).
    pub drag_f1_ns_per_m: f64,
    /// Quadratic drag term f2 (N·s²/m²).
    pub drag_f2_ns2_per_m2: f64,
    pub rolling_coefficient: f64,
    pub accel_cap: f64,
    pub decel_cap: f64,
    pub v_max_mps: f64,
}

impl CarParams {
    /// Accurate parameters used by the simulated world.
    pub const fn accurate() -> Self {
        Self {
            mass_kg: 1650.0,
            gravity_mps2: 9.81,
            drag_f0_n: 0.1,
            drag_f1_ns_per_m: 5.0,
            drag_f2_ns2_per_m2: 0.25,
            rolling_coefficient: 0.015,
            accel_cap: 0.3,
            decel_cap: 0.3,
            v_max_mps: 40.0,
        }
    }

    /// Crude prior model known to the autonomous car: no drag, f_f = 0.2.
    pub const fn crude_nominal() -> Self {
        Self {
            drag_f0_n: 0.0,
            drag_f1_ns_per_m: 0.0,
            drag_f2_ns2_per_m2: 0.0,
            rolling_coefficient: 0.2,
            ..Self::accurate()
        }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        let all = [
            self.mass_kg,
            self.gravity_mps2,
            self.drag_f0_n,
            self.drag_f1_ns_per_m,
            self.drag_f2_ns2_per_m2,
            self.rolling_coefficient,
            self.accel_cap,
            self.decel_cap,
            self.v_max_mps,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::InvalidParams("non-finite coefficient".into()));
        }
        if self.mass_kg <= 0.0 || self.gravity_mps2 <= 0.0 {
            return Err(DynamicsError::InvalidParams(
                "mass and gravity must be positive".into(),
            ));
        }
        let cap_ok = |c: f64| c > 0.0 && c <= 1.0;
        if !cap_ok(self.accel_cap) || !cap_ok(self.decel_cap) {
            return Err(DynamicsError::InvalidParams(
                "accel/decel caps must lie in (0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Aerodynamic drag F_r = f0 + f1 v + f2 v² (N).
    pub fn drag_force(&self, v: f64) -> f64 {
        self.drag_f0_n + self.drag_f1_ns_per_m * v + self.drag_f2_ns2_per_m2 * v * v
    }

    /// Rolling resistance F_f = f_f M g (N).
    pub fn rolling_force(&self) -> f64 {
        self.rolling_coefficient * self.mass_kg * self.gravity_mps2
    }

    /// `[-c_d M g, c_a M g]` (N).
    pub fn force_bounds(&self) -> (f64, f64) {
        let mg = self.mass_kg * self.gravity_mps2;
        (-self.decel_cap * mg, self.accel_cap * mg)
    }

    pub fn clamp_force(&self, u: f64) -> f64 {
        let (lo, hi) = self.force_bounds();
        u.clamp(lo, hi)
    }

    pub fn with_rolling_coefficient(mut self, f_f: f64) -> Self {
        self.rolling_coefficient = f_f;
        self
    }
}

/// dv/dt = (-F_r - F_f)/M + grade + u/M
pub fn longitudinal_accel(v: f64, u: f64, params: &CarParams, grade_accel: f64) -> f64 {
    let resist = params.drag_force(v) + params.rolling_force();
    (-resist) / params.mass_kg + grade_accel + u / params.mass_kg
}

/// Backward-difference model-error observation: measured acceleration minus
/// what the nominal model predicts at the previous velocity and applied force.
pub fn residual_observation(
    v_prev: f64,
    v_now: f64,
    dt: f64,
    u: f64,
    nominal: &CarParams,
) -> Result<f64, DynamicsError> {
    if !(dt > 0.0) {
        return Err(DynamicsError::NonPositiveStep(dt));
    }
    Ok((v_now - v_prev) / dt - longitudinal_accel(v_prev, u, nominal, 0.0))
}

/// `ẋ = f(x) + g(x) u`
pub trait AffineModel {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn drift(&self, x: &DVector<f64>) -> DVector<f64>;
    /// n × m input map.
    fn input_map(&self, x: &DVector<f64>) -> DMatrix<f64>;

    /// Analytic ∂f/∂x when the model provides one.
    fn drift_jacobian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }

    fn has_analytic_jacobian(&self) -> bool {
        false
    }

    /// ∂f/∂x, falling back to central differences.
    fn drift_jacobian_or_fd(&self, x: &DVector<f64>) -> DMatrix<f64> {
        if let Some(j) = self.drift_jacobian(x) {
            return j;
        }
        let n = self.state_dim();
        let mut jac = DMatrix::zeros(n, n);
        for k in 0..n {
            let step = FD_STEP * (1.0 + x[k].abs());
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += step;
            xm[k] -= step;
            let col = (self.drift(&xp) - self.drift(&xm)) / (2.0 * step);
            jac.set_column(k, &col);
        }
        jac
    }
}

const FD_STEP: f64 = 1e-6;

/// A scalar function of the state with an analytic gradient, used both for
/// barrier functions and Lyapunov functions.
pub trait ScalarField {
    fn value(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;

    /// Central differences of the gradient unless overridden.
    fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let n = x.len();
        let mut h = DMatrix::zeros(n, n);
        for k in 0..n {
            let step = FD_STEP * (1.0 + x[k].abs());
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += step;
            xm[k] -= step;
            let col = (self.gradient(&xp) - self.gradient(&xm)) / (2.0 * step);
            h.set_column(k, &col);
        }
        (&h + h.transpose()) * 0.5
    }
}

/// `½ xᵀ P x + qᵀ x + r`. Covers the affine headway barriers (P = 0) and
/// the quadratic tracking Lyapunov function.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticField {
    pub quadratic: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub constant: f64,
}

impl QuadraticField {
    pub fn affine(linear: DVector<f64>, constant: f64) -> Self {
        let n = linear.len();
        Self {
            quadratic: DMatrix::zeros(n, n),
            linear,
            constant,
        }
    }

    /// `½ (x_k - target)²`
    pub fn squared_error(dim: usize, index: usize, target: f64) -> Self {
        let mut quadratic = DMatrix::zeros(dim, dim);
        quadratic[(index, index)] = 1.0;
        let mut linear = DVector::zeros(dim);
        linear[index] = -target;
        Self {
            quadratic,
            linear,
            constant: 0.5 * target * target,
        }
    }
}

impl ScalarField for QuadraticField {
    fn value(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.quadratic * x)) + self.linear.dot(x) + self.constant
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let sym = (&self.quadratic + self.quadratic.transpose()) * 0.5;
        sym * x + &self.linear
    }

    fn hessian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        (&self.quadratic + self.quadratic.transpose()) * 0.5
    }
}

/// The four Lie-derivative terms of a field along an uncertain affine model.
#[derive(Debug, Clone, PartialEq)]
pub struct LieTerms {
    /// ∇h · f(x)
    pub lf: f64,
    /// ∇h · g(x), one entry per input.
    pub lg: Vec<f64>,
    /// ∇h · μ
    pub lmu: f64,
    /// Σ_j |∂h/∂x_j| σ_j
    pub lsigma_abs: f64,
}

/// Lie derivatives of `field` along `model` at `x`, with the learned model
/// error entering through `mu` (mean) and `sigma` (standard deviation),
/// both given as full state-dimension vectors.
pub fn lie_derivatives<M, F>(
    model: &M,
    field: &F,
    x: &DVector<f64>,
    mu: &DVector<f64>,
    sigma: &DVector<f64>,
) -> Result<LieTerms, DynamicsError>
where
    M: AffineModel + ?Sized,
    F: ScalarField + ?Sized,
{
    let n = model.state_dim();
    for (what, len) in [("state", x.len()), ("mu", mu.len()), ("sigma", sigma.len())] {
        if len != n {
            return Err(DynamicsError::DimensionMismatch {
                what,
                expected: n,
                got: len,
            });
        }
    }
    let grad = field.gradient(x);
    let g = model.input_map(x);
    Ok(LieTerms {
        lf: grad.dot(&model.drift(x)),
        lg: (0..model.input_dim())
            .map(|j| grad.dot(&g.column(j)))
            .collect(),
        lmu: grad.dot(mu),
        lsigma_abs: grad
            .iter()
            .zip(sigma.iter())
            .map(|(d, s)| d.abs() * s)
            .sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TABLE: CarParams = CarParams::accurate();

    #[test]
    fn standstill_only_f0_remains() {
        let p = TABLE.with_rolling_coefficient(0.0);
        let a = longitudinal_accel(0.0, 0.0, &p, 0.0);
        assert!((a + 0.1 / 1650.0).abs() < 1e-15);
    }

    #[test]
    fn coasting_at_20() {
        let a = longitudinal_accel(20.0, 0.0, &TABLE, 0.0);
        let expected = -(0.1 + 5.0 * 20.0 + 0.25 * 400.0 + 0.015 * 1650.0 * 9.81) / 1650.0;
        assert!((a - expected).abs() < 1e-14);
        assert!((a + 0.2684).abs() < 1e-4);
    }

    #[test]
    fn grade_is_additive() {
        let g = 2.5 * (0.5f64 * 80.0).sin();
        let base = longitudinal_accel(22.0, 300.0, &TABLE, 0.0);
        let graded = longitudinal_accel(22.0, 300.0, &TABLE, g);
        assert!((graded - base - g).abs() < 1e-14);
    }

    #[test]
    fn force_bounds_match_caps() {
        let (lo, hi) = TABLE.force_bounds();
        assert!((hi - 4855.95).abs() < 1e-9);
        assert!((lo + 4855.95).abs() < 1e-9);
    }

    #[test]
    fn residual_rejects_bad_step() {
        assert_eq!(
            residual_observation(1.0, 1.0, 0.0, 0.0, &TABLE),
            Err(DynamicsError::NonPositiveStep(0.0))
        );
        assert!(residual_observation(1.0, 1.0, -0.1, 0.0, &TABLE).is_err());
    }

    #[test]
    fn residual_of_mismatched_friction() {
        // one exact Euler step of the accurate model, seen through the crude one
        let dt = 0.02;
        let v = 20.0;
        let v_next = v + dt * longitudinal_accel(v, 0.0, &TABLE, 0.0);
        let r = residual_observation(v, v_next, dt, 0.0, &CarParams::crude_nominal()).unwrap();
        let expected = (0.2 - 0.015) * 9.81 - TABLE.drag_force(v) / TABLE.mass_kg;
        assert!((r - expected).abs() < 1e-9, "{r} vs {expected}");
        assert!(((0.2 - 0.015) * 9.81 - 1.81485f64).abs() < 1e-12);
    }

    #[test]
    fn residual_when_force_cancels_resistance() {
        let nominal = CarParams::crude_nominal();
        let v = 25.0;
        let u = TABLE.drag_force(v) + TABLE.rolling_force();
        let r = residual_observation(v, v, 0.02, u, &nominal).unwrap();
        assert!((r + longitudinal_accel(v, u, &nominal, 0.0)).abs() < 1e-12);
    }

    #[test]
    fn quadratic_field_gradient_and_lyapunov_lg() {
        let v_des = 20.0;
        let field = QuadraticField::squared_error(4, 3, v_des);
        let x = DVector::from_vec(vec![100.0, 19.0, 40.0, 21.5]);
        assert!((field.value(&x) - 0.5 * 1.5 * 1.5).abs() < 1e-12);
        let g = field.gradient(&x);
        assert_eq!(g[0], 0.0);
        assert!((g[3] - 1.5).abs() < 1e-12);
    }

    struct SingleCar(CarParams);

    impl AffineModel for SingleCar {
        fn state_dim(&self) -> usize {
            2
        }
        fn input_dim(&self) -> usize {
            1
        }
        fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
            DVector::from_vec(vec![x[1], longitudinal_accel(x[1], 0.0, &self.0, 0.0)])
        }
        fn input_map(&self, _x: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_column_slice(2, 1, &[0.0, 1.0 / self.0.mass_kg])
        }
    }

    #[test]
    fn lie_terms_of_tracking_error() {
        let model = SingleCar(TABLE);
        let field = QuadraticField::squared_error(2, 1, 20.0);
        let x = DVector::from_vec(vec![0.0, 21.0]);
        let mu = DVector::from_vec(vec![0.0, 0.4]);
        let sigma = DVector::from_vec(vec![0.0, 0.1]);
        let t = lie_derivatives(&model, &field, &x, &mu, &sigma).unwrap();
        assert!((t.lg[0] - 1.0 / 1650.0).abs() < 1e-15);
        assert!((t.lf - longitudinal_accel(21.0, 0.0, &TABLE, 0.0)).abs() < 1e-12);
        assert!((t.lmu - 0.4).abs() < 1e-12);
        assert!((t.lsigma_abs - 0.1).abs() < 1e-12);
    }

    #[test]
    fn position_only_field_ignores_velocity_channels() {
        let model = SingleCar(TABLE);
        let field = QuadraticField::affine(DVector::from_vec(vec![1.0, 0.0]), -25.0);
        let x = DVector::from_vec(vec![60.0, 18.0]);
        let mu = DVector::from_vec(vec![0.0, 3.0]);
        let sigma = DVector::from_vec(vec![0.0, 2.0]);
        let t = lie_derivatives(&model, &field, &x, &mu, &sigma).unwrap();
        assert_eq!(t.lg, vec![0.0]);
        assert_eq!(t.lmu, 0.0);
        assert_eq!(t.lsigma_abs, 0.0);
        assert!((t.lf - 18.0).abs() < 1e-12);
    }

    #[test]
    fn lie_derivatives_check_dimensions() {
        let model = SingleCar(TABLE);
        let field = QuadraticField::squared_error(2, 1, 20.0);
        let x = DVector::from_vec(vec![0.0, 21.0]);
        let bad = DVector::zeros(3);
        assert!(lie_derivatives(&model, &field, &x, &bad, &DVector::zeros(2)).is_err());
    }
}
