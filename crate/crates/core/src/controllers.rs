//! Per-step QP assembly for the autonomous car (car 4).
//!
//! The controller sees `x = [p3, v3, p4, v4]` plus the broadcast position
//! and speed of car 2, which parameterize car 3's nominal human-driver
//! model. Two GP channels learn the acceleration residuals of car 3 and
//! car 4; they enter the rows through `v3` and `v4`.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::{
    safety_row, stability_row, BarrierSpec, ChannelMoment, ConstraintRow, LyapunovSpec,
};
use crate::dynamics::{
    longitudinal_accel, residual_observation, AffineModel, CarParams, DynamicsError,
    QuadraticField, ScalarField,
};
use crate::gp::{
    optimize_hyperparameters, GpError, GpModel, HyperBounds, KernelHyper, ObservationWindow,
    PosteriorMoment,
};
use crate::plant::{human_force_raw, DriverParams, FleetState};
use crate::qp::{solve_with, QProblem, QpError, QpStatus, SolverSettings};

/// Index of the autonomous car in the fleet.
pub const EGO: usize = 3;
/// Index of the car directly ahead of it.
pub const FRONT: usize = 2;

/// State coordinates carrying the learned channels, car 3 then car 4.
pub const CHANNEL_STATE_INDEX: [usize; 2] = [1, 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Lbsc,
    LbscN,
    CbfClfQp,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Lbsc, Variant::LbscN, Variant::CbfClfQp];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Lbsc => "lbsc",
            Variant::LbscN => "lbsc-n",
            Variant::CbfClfQp => "cbf-clf-qp",
        }
    }

    pub fn learns(self) -> bool {
        self != Variant::CbfClfQp
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s.to_ascii_lowercase().replace('_', "-"))
            .ok_or_else(|| format!("unknown controller {s:?} (expected lbsc, lbsc-n or cbf-clf-qp)"))
    }
}

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("invalid controller configuration: {0}")]
    Config(String),
    #[error("non-finite measurement: {0}")]
    NonFinite(Box<FleetState>),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub variant: Variant,
    pub c_delta: f64,
    pub k_eps: f64,
    pub k_eta: f64,
    /// ES-CLF decay rate c (1/s).
    pub clf_rate: f64,
    /// λ of the extended barriers (1/s).
    pub barrier_lambda: f64,
    /// Linear class-K gain on the extended barriers (1/s).
    pub barrier_k_alpha: f64,
    pub v_des_mps: f64,
    pub headway_min_m: f64,
    pub headway_max_m: f64,
    pub gp_window: usize,
    pub gp_noise_variance: f64,
    /// Hyperparameter re-optimization period, in observations.
    pub gp_refit_period: usize,
    /// Model the controller believes for cars 3 and 4.
    pub nominal_car: CarParams,
    pub nominal_driver: DriverParams,
    pub qp_max_iter: usize,
}

impl ControllerConfig {
    pub fn for_variant(variant: Variant) -> Self {
        let (k_eps, k_eta) = match variant {
            Variant::LbscN => (1e30, 1e30),
            _ => (1e30, 1e20),
        };
        Self {
            variant,
            c_delta: 3.0,
            k_eps,
            k_eta,
            clf_rate: 0.6,
            barrier_lambda: 0.2,
            barrier_k_alpha: 5.0,
            v_des_mps: 20.0,
            headway_min_m: 25.0,
            headway_max_m: 100.0,
            gp_window: 30,
            gp_noise_variance: crate::gp::DEFAULT_NOISE_VARIANCE,
            gp_refit_period: 50,
            nominal_car: CarParams::crude_nominal(),
            nominal_driver: DriverParams::nominal(),
            qp_max_iter: crate::qp::DEFAULT_MAX_ITER,
        }
    }

    /// Slack weights actually used: LBSC-N ties K_η to K_ε.
    pub fn penalties(&self) -> (f64, f64) {
        match self.variant {
            Variant::LbscN => (self.k_eps, self.k_eps),
            _ => (self.k_eps, self.k_eta),
        }
    }

    pub fn validate(&self) -> Result<(), ControllerError> {
        let positive = [
            ("K_eps", self.k_eps),
            ("K_eta", self.k_eta),
            ("clf rate", self.clf_rate),
            ("barrier lambda", self.barrier_lambda),
            ("barrier k_alpha", self.barrier_k_alpha),
            ("gp noise variance", self.gp_noise_variance),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(ControllerError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.c_delta.is_finite() && self.c_delta >= 0.0) {
            return Err(ControllerError::Config(format!("c_delta {}", self.c_delta)));
        }
        if !(self.headway_min_m < self.headway_max_m) {
            return Err(ControllerError::Config("headway bounds out of order".into()));
        }
        if self.gp_window == 0 || self.gp_refit_period == 0 || self.qp_max_iter == 0 {
            return Err(ControllerError::Config(
                "window, refit period and iteration cap must be ≥ 1".into(),
            ));
        }
        self.nominal_car.validate()?;
        self.nominal_driver.validate()?;
        Ok(())
    }
}

/// Nominal model of cars 3 and 4 with car 2's broadcast state frozen over
/// the step. Car 3 follows the nominal human law, car 4 takes the input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CccModel {
    pub p2: f64,
    pub v2: f64,
    pub car: CarParams,
    pub driver: DriverParams,
}

impl CccModel {
    pub fn new(state: &FleetState, config: &ControllerConfig) -> Self {
        Self {
            p2: state.p[FRONT - 1],
            v2: state.v[FRONT - 1],
            car: config.nominal_car,
            driver: config.nominal_driver,
        }
    }

    pub fn state_of(fleet: &FleetState) -> DVector<f64> {
        DVector::from_vec(vec![
            fleet.p[FRONT],
            fleet.v[FRONT],
            fleet.p[EGO],
            fleet.v[EGO],
        ])
    }

    fn human_raw(&self, p3: f64, v3: f64) -> f64 {
        let headway = self.p2 - p3 - self.driver.car_length_m;
        human_force_raw(headway, v3, self.v2, &self.driver)
    }

    /// Nominal acceleration of car 3.
    pub fn front_accel(&self, p3: f64, v3: f64) -> f64 {
        let u = self.car.clamp_force(self.human_raw(p3, v3));
        longitudinal_accel(v3, u, &self.car, 0.0)
    }
}

impl AffineModel for CccModel {
    fn state_dim(&self) -> usize {
        4
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![
            x[1],
            self.front_accel(x[0], x[1]),
            x[3],
            longitudinal_accel(x[3], 0.0, &self.car, 0.0),
        ])
    }

    fn input_map(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_column_slice(4, 1, &[0.0, 0.0, 0.0, 1.0 / self.car.mass_kg])
    }

    fn drift_jacobian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        let m = self.car.mass_kg;
        let drag_slope =
            |v: f64| self.car.drag_f1_ns_per_m + 2.0 * self.car.drag_f2_ns2_per_m2 * v;
        let d = &self.driver;
        let (lo, hi) = self.car.force_bounds();
        let raw = self.human_raw(x[0], x[1]);
        let (dp3, dv3) = if raw > lo && raw < hi {
            let headway = self.p2 - x[0] - d.car_length_m;
            let slope = if headway > d.b_st_m && headway < d.b_go_m {
                d.k_range_per_s
            } else {
                0.0
            };
            (-d.k_b * slope, -d.k_b - d.k_p)
        } else {
            (0.0, 0.0)
        };
        let mut j = DMatrix::zeros(4, 4);
        j[(0, 1)] = 1.0;
        j[(1, 0)] = dp3 / m;
        j[(1, 1)] = (dv3 - drag_slope(x[1])) / m;
        j[(2, 3)] = 1.0;
        j[(3, 3)] = -drag_slope(x[3]) / m;
        Some(j)
    }

    fn has_analytic_jacobian(&self) -> bool {
        true
    }
}

/// `h1 = p3 - p4 - B_min` and `h2 = B_max - (p3 - p4)`.
pub fn headway_barriers(config: &ControllerConfig) -> [BarrierSpec<QuadraticField>; 2] {
    let gap = DVector::from_vec(vec![1.0, 0.0, -1.0, 0.0]);
    [
        BarrierSpec {
            field: QuadraticField::affine(gap.clone(), -config.headway_min_m),
            lambda: config.barrier_lambda,
            k_alpha: config.barrier_k_alpha,
        },
        BarrierSpec {
            field: QuadraticField::affine(-gap, config.headway_max_m),
            lambda: config.barrier_lambda,
            k_alpha: config.barrier_k_alpha,
        },
    ]
}

/// `V = ½ (v4 - v_des)²`
pub fn tracking_clf(config: &ControllerConfig) -> LyapunovSpec<QuadraticField> {
    LyapunovSpec {
        field: QuadraticField::squared_error(4, 3, config.v_des_mps),
        rate: config.clf_rate,
    }
}

/// Fleet index of the car behind each channel.
pub const CHANNEL_CAR: [usize; 2] = [FRONT, EGO];

/// GP inputs for a channel: that car's speed and the time, so the window
/// can follow road effects that do not show up in the speed.
pub fn channel_features(channel: usize, fleet: &FleetState) -> Vec<f64> {
    vec![fleet.v[CHANNEL_CAR[channel]], fleet.t]
}

/// Velocity length scales below 1 m/s let a 0.6 s window overfit a jump
/// in the residual onto tiny speed differences.
const VELOCITY_LENGTH_SCALE: (f64, f64) = (1.0, 1e2);
const TIME_LENGTH_SCALE: (f64, f64) = (0.1, 1e2);

/// Hyperparameter search box matching [`channel_features`].
pub fn channel_bounds() -> HyperBounds {
    HyperBounds {
        per_feature: vec![VELOCITY_LENGTH_SCALE, TIME_LENGTH_SCALE],
        ..HyperBounds::default()
    }
}

/// Model error of each channel implied by an acceleration of cars 3 and 4.
pub fn channel_residuals(
    config: &ControllerConfig,
    fleet: &FleetState,
    accel: [f64; 2],
    u_ego: f64,
) -> [f64; 2] {
    let model = CccModel::new(fleet, config);
    [
        accel[0] - model.front_accel(fleet.p[FRONT], fleet.v[FRONT]),
        accel[1] - longitudinal_accel(fleet.v[EGO], u_ego, &config.nominal_car, 0.0),
    ]
}

/// One sliding-window GP with periodic hyperparameter refits.
#[derive(Debug, Clone)]
pub struct LearnedChannel {
    window: ObservationWindow,
    hyper: KernelHyper,
    model: GpModel,
    bounds: HyperBounds,
    observations: usize,
    refit_period: usize,
    /// Re-optimize early when an observation lands this many standard
    /// deviations away from its prediction.
    surprise: f64,
}

impl LearnedChannel {
    pub fn new(
        bounds: HyperBounds,
        capacity: usize,
        noise: f64,
        refit_period: usize,
        surprise: f64,
    ) -> Result<Self, GpError> {
        let dim = bounds.per_feature.len().max(1);
        let window = ObservationWindow::with_dim(capacity, noise, dim)?;
        let hyper = KernelHyper::default_for(dim);
        let model = GpModel::fit(&window, &hyper)?;
        Ok(Self {
            window,
            hyper,
            model,
            bounds,
            observations: 0,
            refit_period,
            surprise,
        })
    }

    pub fn observe(&mut self, input: &[f64], target: f64) -> Result<(), GpError> {
        let before = self.model.predict(input)?;
        let surprised = (target - before.mean).abs() > self.surprise * before.std_dev();
        self.window.push(input, target)?;
        self.observations += 1;
        if surprised
            || self.observations % self.refit_period == 0
            || self.observations == self.window.capacity()
        {
            self.hyper = optimize_hyperparameters(&self.window, &self.bounds)?.hyper;
        }
        self.model = GpModel::fit(&self.window, &self.hyper)?;
        Ok(())
    }

    pub fn predict(&self, input: &[f64]) -> Result<PosteriorMoment, GpError> {
        self.model.predict(input)
    }

    pub fn model(&self) -> &GpModel {
        &self.model
    }

    pub fn observations(&self) -> usize {
        self.observations
    }
}

/// What one control step produced, enough to replay the QP offline.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub eps: f64,
    pub eta: f64,
    /// Posterior mean per channel, car 3 then car 4.
    pub mu: [f64; 2],
    pub sigma: [f64; 2],
    pub h: [f64; 2],
    pub h_ext: [f64; 2],
    pub lyapunov: f64,
    pub status: QpStatus,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub qp_ms: f64,
    pub problem: QProblem,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlOutput {
    pub u: f64,
    pub diagnostics: Diagnostics,
}

/// Builds and solves the QP for given channel moments (car 3, car 4).
pub fn control_with_moments(
    state: &FleetState,
    moments: [PosteriorMoment; 2],
    config: &ControllerConfig,
) -> Result<ControlOutput, ControllerError> {
    if !state.is_finite() {
        return Err(ControllerError::NonFinite(Box::new(*state)));
    }
    let model = CccModel::new(state, config);
    let x = CccModel::state_of(state);
    let channels: Vec<ChannelMoment> = CHANNEL_STATE_INDEX
        .iter()
        .zip(moments)
        .map(|(&state_index, moment)| ChannelMoment {
            state_index,
            moment,
        })
        .collect();

    let barriers = headway_barriers(config);
    let clf = tracking_clf(config);
    let mut rows: Vec<ConstraintRow> = Vec::with_capacity(3);
    for b in &barriers {
        rows.push(safety_row(b, &model, &x, &channels, config.c_delta)?);
    }
    rows.push(stability_row(&clf, &model, &x, &channels, config.c_delta)?);

    let mass = config.nominal_car.mass_kg;
    let (u_min, u_max) = config.nominal_car.force_bounds();
    let (k_eps, k_eta) = config.penalties();
    let problem = QProblem {
        cost: DMatrix::from_element(1, 1, 1.0 / (mass * mass)),
        k_eps,
        k_eta,
        rows,
        u_min: vec![u_min],
        u_max: vec![u_max],
    };
    let start = Instant::now();
    let sol = solve_with(
        &problem,
        &SolverSettings {
            max_iter: config.qp_max_iter,
        },
    )?;
    let qp_ms = start.elapsed().as_secs_f64() * 1e3;
    if sol.status != QpStatus::Optimal {
        log::warn!("t={:.2}: QP returned {:?}", state.t, sol.status);
    }

    Ok(ControlOutput {
        u: sol.u_star[0],
        diagnostics: Diagnostics {
            eps: sol.eps,
            eta: sol.eta,
            mu: moments.map(|m| m.mean),
            sigma: moments.map(|m| m.std_dev()),
            h: [barriers[0].field.value(&x), barriers[1].field.value(&x)],
            h_ext: [
                barriers[0].extended(&model).value(&x),
                barriers[1].extended(&model).value(&x),
            ],
            lyapunov: clf.field.value(&x),
            status: sol.status,
            kkt_residual: sol.kkt_residual,
            iterations: sol.iterations,
            qp_ms,
            problem,
        },
    })
}

/// Non-learning baseline: nominal model only.
pub fn cbf_clf_qp_control(
    state: &FleetState,
    config: &ControllerConfig,
) -> Result<ControlOutput, ControllerError> {
    control_with_moments(state, [PosteriorMoment::ZERO; 2], config)
}

fn predict_channels(
    state: &FleetState,
    gp: &[LearnedChannel; 2],
) -> Result<[PosteriorMoment; 2], ControllerError> {
    Ok([
        gp[0].predict(&channel_features(0, state))?,
        gp[1].predict(&channel_features(1, state))?,
    ])
}

/// LBSC with the configured slack weights.
pub fn lbsc_control(
    state: &FleetState,
    gp: &[LearnedChannel; 2],
    config: &ControllerConfig,
) -> Result<ControlOutput, ControllerError> {
    control_with_moments(state, predict_channels(state, gp)?, config)
}

/// LBSC with K_η raised to K_ε.
pub fn lbsc_n_control(
    state: &FleetState,
    gp: &[LearnedChannel; 2],
    config: &ControllerConfig,
) -> Result<ControlOutput, ControllerError> {
    let equal = ControllerConfig {
        variant: Variant::LbscN,
        ..*config
    };
    control_with_moments(state, predict_channels(state, gp)?, &equal)
}

/// Stateful controller for car 4: keeps the GP channels and the previous
/// measurement needed for backward-difference residuals.
#[derive(Debug, Clone)]
pub struct Controller {
    config: ControllerConfig,
    channels: [LearnedChannel; 2],
    previous: Option<(FleetState, f64)>,
}

impl Controller {
    pub fn new(config: ControllerConfig) -> Result<Self, ControllerError> {
        config.validate()?;
        let make = || {
            LearnedChannel::new(
                channel_bounds(),
                config.gp_window,
                config.gp_noise_variance,
                config.gp_refit_period,
                config.c_delta,
            )
        };
        Ok(Self {
            config,
            channels: [make()?, make()?],
            previous: None,
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn channels(&self) -> &[LearnedChannel; 2] {
        &self.channels
    }

    /// Feeds the residuals observed since the previous control step.
    pub fn observe(&mut self, now: &FleetState) -> Result<(), ControllerError> {
        if !now.is_finite() {
            return Err(ControllerError::NonFinite(Box::new(*now)));
        }
        let Some((prev, u_prev)) = self.previous else {
            return Ok(());
        };
        if !self.config.variant.learns() {
            return Ok(());
        }
        let dt = now.t - prev.t;
        let a3 = (now.v[FRONT] - prev.v[FRONT]) / dt;
        let model = CccModel::new(&prev, &self.config);
        let d3 = a3 - model.front_accel(prev.p[FRONT], prev.v[FRONT]);
        let d4 = residual_observation(prev.v[EGO], now.v[EGO], dt, u_prev, &self.config.nominal_car)?;
        self.channels[0].observe(&channel_features(0, &prev), d3)?;
        self.channels[1].observe(&channel_features(1, &prev), d4)?;
        Ok(())
    }

    /// Current posterior moments at `state`, zero for the baseline.
    pub fn moments(&self, state: &FleetState) -> Result<[PosteriorMoment; 2], ControllerError> {
        if self.config.variant.learns() {
            predict_channels(state, &self.channels)
        } else {
            Ok([PosteriorMoment::ZERO; 2])
        }
    }

    /// Computes the ego force at `state` and remembers it for the next
    /// residual.
    pub fn control(&mut self, state: &FleetState) -> Result<ControlOutput, ControllerError> {
        let out = control_with_moments(state, self.moments(state)?, &self.config)?;
        self.previous = Some((*state, out.u));
        Ok(out)
    }
}
