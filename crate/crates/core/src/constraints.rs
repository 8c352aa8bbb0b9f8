//! Uncertainty-robust barrier and Lyapunov rows, linear in the input.
//!
//! A row encodes `coeff_u · u + rhs_const ≤ slack(channel)`. Safety rows are
//! built on the first-order extension `h̃ = ḣ + λ h` of a position-only
//! barrier, since force inputs do not appear in `ḣ` itself.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::dynamics::{lie_derivatives, AffineModel, DynamicsError, ScalarField};
use crate::gp::PosteriorMoment;

/// Which relaxation variable a row may borrow from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SlackChannel {
    Safety,
    Stability,
    /// Hard row, no relaxation.
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintRow {
    pub coeff_u: Vec<f64>,
    pub rhs_const: f64,
    pub slack_channel: SlackChannel,
}

impl ConstraintRow {
    /// `coeff_u · u + rhs_const`; positive means the row needs slack.
    pub fn violation(&self, u: &[f64]) -> f64 {
        self.coeff_u
            .iter()
            .zip(u)
            .map(|(a, x)| a * x)
            .sum::<f64>()
            + self.rhs_const
    }

    pub fn is_finite(&self) -> bool {
        self.rhs_const.is_finite() && self.coeff_u.iter().all(|c| c.is_finite())
    }
}

/// Learned model-error moment attached to one state coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelMoment {
    pub state_index: usize,
    pub moment: PosteriorMoment,
}

/// Mean and standard-deviation vectors over the full state.
pub fn error_vectors(n: usize, channels: &[ChannelMoment]) -> (DVector<f64>, DVector<f64>) {
    let mut mu = DVector::zeros(n);
    let mut sigma = DVector::zeros(n);
    for c in channels {
        mu[c.state_index] += c.moment.mean;
        sigma[c.state_index] += c.moment.std_dev();
    }
    (mu, sigma)
}

/// Barrier `h` plus the gains of its extension and class-K term.
#[derive(Debug, Clone, PartialEq)]
pub struct BarrierSpec<F> {
    pub field: F,
    /// λ in h̃ = ḣ + λ h (1/s).
    pub lambda: f64,
    /// α(h̃) = k_alpha · h̃ (1/s).
    pub k_alpha: f64,
}

/// Exponentially stabilizing Lyapunov function with decay rate `rate`.
#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovSpec<F> {
    pub field: F,
    pub rate: f64,
}

/// `h̃(x) = ∇h(x)·f(x) + λ h(x)`.
///
/// Equals ḣ + λh along the true dynamics whenever h depends only on
/// coordinates whose derivatives carry neither input nor learned error
/// (positions, for the headway barriers).
pub struct ExtendedBarrier<'a, F: ?Sized, M: ?Sized> {
    pub base: &'a F,
    pub model: &'a M,
    pub lambda: f64,
}

impl<F, M> ScalarField for ExtendedBarrier<'_, F, M>
where
    F: ScalarField + ?Sized,
    M: AffineModel + ?Sized,
{
    fn value(&self, x: &DVector<f64>) -> f64 {
        self.base.gradient(x).dot(&self.model.drift(x)) + self.lambda * self.base.value(x)
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let grad = self.base.gradient(x);
        let jac = self.model.drift_jacobian_or_fd(x);
        self.base.hessian(x) * self.model.drift(x) + jac.transpose() * &grad + grad * self.lambda
    }
}

impl<F> BarrierSpec<F> {
    pub fn extended<'a, M: ?Sized>(&'a self, model: &'a M) -> ExtendedBarrier<'a, F, M> {
        ExtendedBarrier {
            base: &self.field,
            model,
            lambda: self.lambda,
        }
    }
}

/// Robust safety row:
/// `-L_g h̃ u - L_f h̃ - L_μ h̃ + c_δ |L_σ h̃| - α(h̃) ≤ ε`.
pub fn safety_row<F, M>(
    spec: &BarrierSpec<F>,
    model: &M,
    x: &DVector<f64>,
    channels: &[ChannelMoment],
    c_delta: f64,
) -> Result<ConstraintRow, DynamicsError>
where
    F: ScalarField,
    M: AffineModel + ?Sized,
{
    let ext = spec.extended(model);
    let (mu, sigma) = error_vectors(model.state_dim(), channels);
    let lie = lie_derivatives(model, &ext, x, &mu, &sigma)?;
    let alpha = spec.k_alpha * ext.value(x);
    Ok(ConstraintRow {
        coeff_u: lie.lg.iter().map(|v| -v).collect(),
        rhs_const: -lie.lf - lie.lmu + c_delta * lie.lsigma_abs - alpha,
        slack_channel: SlackChannel::Safety,
    })
}

/// Robust stability row:
/// `L_g V u + L_f V + L_μ V + c_δ |L_σ V| + c V ≤ η`.
pub fn stability_row<F, M>(
    spec: &LyapunovSpec<F>,
    model: &M,
    x: &DVector<f64>,
    channels: &[ChannelMoment],
    c_delta: f64,
) -> Result<ConstraintRow, DynamicsError>
where
    F: ScalarField,
    M: AffineModel + ?Sized,
{
    let (mu, sigma) = error_vectors(model.state_dim(), channels);
    let lie = lie_derivatives(model, &spec.field, x, &mu, &sigma)?;
    Ok(ConstraintRow {
        coeff_u: lie.lg,
        rhs_const: lie.lf + lie.lmu + c_delta * lie.lsigma_abs + spec.rate * spec.field.value(x),
        slack_channel: SlackChannel::Stability,
    })
}

/// Result of a pointwise certificate check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertificateCheck {
    /// Non-negative when the condition holds.
    pub margin: f64,
    pub satisfied: bool,
}

fn closed_loop_rate<F, M>(
    field: &F,
    model: &M,
    x: &DVector<f64>,
    u: &[f64],
    d: &DVector<f64>,
) -> f64
where
    F: ScalarField + ?Sized,
    M: AffineModel + ?Sized,
{
    let g = model.input_map(x);
    let mut xdot = model.drift(x) + d;
    for (j, uj) in u.iter().enumerate() {
        xdot += g.column(j) * *uj;
    }
    field.gradient(x).dot(&xdot)
}

/// ZCBF condition on the extended barrier with a concrete model error `d`:
/// margin = dh̃/dt + α(h̃).
pub fn satisfies_zcbf<F, M>(
    spec: &BarrierSpec<F>,
    model: &M,
    x: &DVector<f64>,
    u: &[f64],
    d: &DVector<f64>,
) -> CertificateCheck
where
    F: ScalarField,
    M: AffineModel + ?Sized,
{
    let ext = spec.extended(model);
    let margin = closed_loop_rate(&ext, model, x, u, d) + spec.k_alpha * ext.value(x);
    CertificateCheck {
        margin,
        satisfied: margin >= 0.0,
    }
}

/// ES-CLF condition with a concrete model error `d`:
/// margin = -(dV/dt + c V).
pub fn satisfies_es_clf<F, M>(
    spec: &LyapunovSpec<F>,
    model: &M,
    x: &DVector<f64>,
    u: &[f64],
    d: &DVector<f64>,
) -> CertificateCheck
where
    F: ScalarField,
    M: AffineModel + ?Sized,
{
    let margin = -(closed_loop_rate(&spec.field, model, x, u, d) + spec.rate * spec.field.value(x));
    CertificateCheck {
        margin,
        satisfied: margin >= 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{longitudinal_accel, CarParams, QuadraticField};
    use nalgebra::DMatrix;

    /// Two cars, state [p_front, v_front, p_ego, v_ego], front car coasting.
    struct Pair {
        car: CarParams,
    }

    impl AffineModel for Pair {
        fn state_dim(&self) -> usize {
            4
        }
        fn input_dim(&self) -> usize {
            1
        }
        fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
            DVector::from_vec(vec![
                x[1],
                longitudinal_accel(x[1], 0.0, &self.car, 0.0),
                x[3],
                longitudinal_accel(x[3], 0.0, &self.car, 0.0),
            ])
        }
        fn input_map(&self, _x: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_column_slice(4, 1, &[0.0, 0.0, 0.0, 1.0 / self.car.mass_kg])
        }
    }

    fn headway_barrier(b_st: f64) -> BarrierSpec<QuadraticField> {
        BarrierSpec {
            field: QuadraticField::affine(DVector::from_vec(vec![1.0, 0.0, -1.0, 0.0]), -b_st),
            lambda: 1.0,
            k_alpha: 5.0,
        }
    }

    fn moments(mu: f64, var: f64) -> Vec<ChannelMoment> {
        [1, 3]
            .iter()
            .map(|&i| ChannelMoment {
                state_index: i,
                moment: PosteriorMoment {
                    mean: mu,
                    variance: var,
                },
            })
            .collect()
    }

    #[test]
    fn zero_moments_reduce_to_nominal_row() {
        let model = Pair {
            car: CarParams::accurate(),
        };
        let spec = headway_barrier(25.0);
        let x = DVector::from_vec(vec![60.0, 20.0, 0.0, 20.0]);
        let nominal = safety_row(&spec, &model, &x, &[], 3.0).unwrap();
        let zeroed = safety_row(&spec, &model, &x, &moments(0.0, 0.0), 3.0).unwrap();
        assert_eq!(nominal, zeroed);
    }

    #[test]
    fn zero_confidence_drops_the_sigma_term() {
        let model = Pair {
            car: CarParams::accurate(),
        };
        let spec = headway_barrier(25.0);
        let x = DVector::from_vec(vec![60.0, 21.0, 0.0, 19.0]);
        let with_sigma = safety_row(&spec, &model, &x, &moments(0.3, 0.4), 0.0).unwrap();
        let mean_only = safety_row(&spec, &model, &x, &moments(0.3, 0.0), 0.0).unwrap();
        assert_eq!(with_sigma, mean_only);
    }

    #[test]
    fn larger_confidence_tightens_rows() {
        let model = Pair {
            car: CarParams::accurate(),
        };
        let x = DVector::from_vec(vec![60.0, 21.0, 0.0, 23.0]);
        let spec = headway_barrier(25.0);
        let loose = safety_row(&spec, &model, &x, &moments(0.1, 0.2), 0.0).unwrap();
        let tight = safety_row(&spec, &model, &x, &moments(0.1, 0.2), 3.0).unwrap();
        assert!(tight.rhs_const > loose.rhs_const);

        let clf = LyapunovSpec {
            field: QuadraticField::squared_error(4, 3, 20.0),
            rate: 0.6,
        };
        let loose = stability_row(&clf, &model, &x, &moments(0.1, 0.2), 0.0).unwrap();
        let tight = stability_row(&clf, &model, &x, &moments(0.1, 0.2), 3.0).unwrap();
        assert!(tight.rhs_const >= loose.rhs_const);
    }

    #[test]
    fn stability_row_at_target_is_trivial() {
        let model = Pair {
            car: CarParams::accurate(),
        };
        let clf = LyapunovSpec {
            field: QuadraticField::squared_error(4, 3, 20.0),
            rate: 0.6,
        };
        let x = DVector::from_vec(vec![60.0, 21.0, 0.0, 20.0]);
        let row = stability_row(&clf, &model, &x, &moments(0.5, 0.3), 3.0).unwrap();
        assert_eq!(row.coeff_u, vec![0.0]);
        assert_eq!(row.rhs_const, 0.0);
    }

    #[test]
    fn stability_row_one_above_target() {
        let car = CarParams::accurate();
        let model = Pair { car };
        let clf = LyapunovSpec {
            field: QuadraticField::squared_error(4, 3, 20.0),
            rate: 0.6,
        };
        let x = DVector::from_vec(vec![60.0, 21.0, 0.0, 21.0]);
        let row = stability_row(&clf, &model, &x, &[], 3.0).unwrap();
        assert!((row.coeff_u[0] - 1.0 / 1650.0).abs() < 1e-15);
        let expected = longitudinal_accel(21.0, 0.0, &car, 0.0) + 0.3;
        assert!((row.rhs_const - expected).abs() < 1e-12);
    }

    #[test]
    fn violating_the_row_violates_the_certificate() {
        let model = Pair {
            car: CarParams::accurate(),
        };
        let spec = headway_barrier(25.0);
        let x = DVector::from_vec(vec![40.0, 15.0, 0.0, 25.0]);
        let row = safety_row(&spec, &model, &x, &[], 0.0).unwrap();
        // binding face: coeff u + rhs = 0
        let u_bind = -row.rhs_const / row.coeff_u[0];
        let d = DVector::zeros(4);
        let on_face = satisfies_zcbf(&spec, &model, &x, &[u_bind], &d);
        assert!(on_face.margin.abs() < 1e-9);
        // one row unit past the face
        let u_bad = u_bind + 1.0 / row.coeff_u[0];
        let off = satisfies_zcbf(&spec, &model, &x, &[u_bad], &d);
        assert!(off.margin < 0.0 && !off.satisfied);
    }
}
