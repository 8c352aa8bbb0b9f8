//! Closed-loop episodes: scenario files, the per-step loop, metrics and log
//! export.
//!
//! Scenario files are flat TOML with units in the key names. Every key is
//! optional; missing keys take the values of [`ScenarioConfig::default`].

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::controllers::{
    channel_residuals, ControlOutput, Controller, ControllerConfig, ControllerError, Variant, EGO,
    FRONT,
};
use crate::dynamics::{CarParams, DynamicsError};
use crate::plant::{
    DisturbanceSchedule, DriverParams, FleetState, LeadProfile, Plant, PlantConfig, PlantError,
    CAR_COUNT,
};
use crate::qp::{QProblem, QpStatus};

pub const LOG_VERSION: &str = concat!("lbsc ", env!("CARGO_PKG_VERSION"));

/// CSV and JSON column order.
pub const COLUMNS: [&str; 31] = [
    "t", "p1", "p2", "p3", "p4", "p5", "v1", "v2", "v3", "v4", "v5", "a1", "a2", "a3", "a4", "a5",
    "u1", "u2", "u3", "u4", "u5", "eps", "eta", "mu_c3", "sigma_c3", "mu_c4", "sigma_c4", "h1",
    "h2", "V", "solve_ms",
];

fn columns() -> &'static [&'static str] {
    &COLUMNS
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error(transparent)]
    Params(#[from] DynamicsError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error("{0}")]
    Metric(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ScenarioError + '_ {
    move |source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub controller: Variant,
    pub episode_length_s: f64,
    pub control_rate_hz: f64,
    pub seed: u64,
    /// Std-dev of Gaussian noise on the controller's position readings.
    pub position_noise_m: f64,
    pub velocity_noise_mps: f64,
    pub phase_boundaries_s: Vec<f64>,
    pub plant_substeps: usize,

    pub initial_positions_m: [f64; CAR_COUNT],
    pub initial_velocities_mps: [f64; CAR_COUNT],

    pub gravity_mps2: f64,
    pub accel_cap_g: f64,
    pub decel_cap_g: f64,
    pub true_mass_kg: f64,
    pub true_drag_f0_n: f64,
    pub true_drag_f1_ns_per_m: f64,
    pub true_drag_f2_ns2_per_m2: f64,
    pub nominal_mass_kg: f64,
    pub nominal_drag_f0_n: f64,
    pub nominal_drag_f1_ns_per_m: f64,
    pub nominal_drag_f2_ns2_per_m2: f64,
    pub nominal_rolling_coefficient: f64,

    pub human_k_b_ns_per_m: f64,
    pub human_k_p_ns_per_m: f64,
    pub nominal_k_b_ns_per_m: f64,
    pub nominal_k_p_ns_per_m: f64,
    pub range_stop_m: f64,
    pub range_go_m: f64,
    pub range_slope_per_s: f64,
    pub car_length_m: f64,
    pub v_max_mps: f64,

    pub rolling_initial: f64,
    pub rolling_mid: f64,
    pub rolling_final: f64,
    pub friction_change_s: f64,
    pub friction_restore_s: f64,
    pub grade_start_s: f64,
    pub grade_amplitude_mps2: f64,
    pub grade_frequency_rad_s: f64,

    pub lead_initial_mps: f64,
    pub lead_cruise_mps: f64,
    pub lead_initial_ramp_mps2: f64,
    pub lead_climb_start_s: f64,
    pub lead_high_mps: f64,
    pub lead_climb_mps2: f64,
    pub lead_brake_start_s: f64,
    pub lead_brake_mps2: f64,
    pub lead_wave_start_s: f64,
    pub lead_wave_amplitude_mps: f64,
    pub lead_wave_frequency_rad_s: f64,
    pub lead_gain_per_s: f64,

    pub c_delta: f64,
    pub k_eps: f64,
    pub k_eta: f64,
    pub clf_rate_per_s: f64,
    pub barrier_lambda_per_s: f64,
    pub barrier_k_alpha_per_s: f64,
    pub v_des_mps: f64,
    pub headway_min_m: f64,
    pub headway_max_m: f64,
    pub gp_window: usize,
    pub gp_noise_variance: f64,
    pub gp_refit_period_steps: usize,
    pub qp_max_iter: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let truth = CarParams::accurate();
        let nominal = CarParams::crude_nominal();
        let human = DriverParams::human();
        let guess = DriverParams::nominal();
        let dist = DisturbanceSchedule::standard();
        let lead = LeadProfile::standard();
        let ctrl = ControllerConfig::for_variant(Variant::Lbsc);
        let init = FleetState::initial_platoon();
        Self {
            controller: Variant::Lbsc,
            episode_length_s: 100.0,
            control_rate_hz: 50.0,
            seed: 0,
            position_noise_m: 0.0,
            velocity_noise_mps: 0.0,
            phase_boundaries_s: vec![0.0, 20.0, 70.0, 100.0],
            plant_substeps: 4,
            initial_positions_m: init.p,
            initial_velocities_mps: init.v,
            gravity_mps2: truth.gravity_mps2,
            accel_cap_g: truth.accel_cap,
            decel_cap_g: truth.decel_cap,
            true_mass_kg: truth.mass_kg,
            true_drag_f0_n: truth.drag_f0_n,
            true_drag_f1_ns_per_m: truth.drag_f1_ns_per_m,
            true_drag_f2_ns2_per_m2: truth.drag_f2_ns2_per_m2,
            nominal_mass_kg: nominal.mass_kg,
            nominal_drag_f0_n: nominal.drag_f0_n,
            nominal_drag_f1_ns_per_m: nominal.drag_f1_ns_per_m,
            nominal_drag_f2_ns2_per_m2: nominal.drag_f2_ns2_per_m2,
            nominal_rolling_coefficient: nominal.rolling_coefficient,
            human_k_b_ns_per_m: human.k_b,
            human_k_p_ns_per_m: human.k_p,
            nominal_k_b_ns_per_m: guess.k_b,
            nominal_k_p_ns_per_m: guess.k_p,
            range_stop_m: human.b_st_m,
            range_go_m: human.b_go_m,
            range_slope_per_s: human.k_range_per_s,
            car_length_m: human.car_length_m,
            v_max_mps: human.v_max_mps,
            rolling_initial: dist.rolling_initial,
            rolling_mid: dist.rolling_mid,
            rolling_final: dist.rolling_final,
            friction_change_s: dist.friction_change_s,
            friction_restore_s: dist.friction_restore_s,
            grade_start_s: dist.grade_start_s,
            grade_amplitude_mps2: dist.grade_amplitude_mps2,
            grade_frequency_rad_s: dist.grade_frequency_rad_s,
            lead_initial_mps: lead.initial_mps,
            lead_cruise_mps: lead.cruise_mps,
            lead_initial_ramp_mps2: lead.initial_ramp_mps2,
            lead_climb_start_s: lead.phase2_start_s,
            lead_high_mps: lead.high_mps,
            lead_climb_mps2: lead.climb_mps2,
            lead_brake_start_s: lead.brake_start_s,
            lead_brake_mps2: lead.brake_mps2,
            lead_wave_start_s: lead.phase3_start_s,
            lead_wave_amplitude_mps: lead.wave_amplitude_mps,
            lead_wave_frequency_rad_s: lead.wave_frequency_rad_s,
            lead_gain_per_s: 2.0,
            c_delta: ctrl.c_delta,
            k_eps: ctrl.k_eps,
            k_eta: ctrl.k_eta,
            clf_rate_per_s: ctrl.clf_rate,
            barrier_lambda_per_s: ctrl.barrier_lambda,
            barrier_k_alpha_per_s: ctrl.barrier_k_alpha,
            v_des_mps: ctrl.v_des_mps,
            headway_min_m: ctrl.headway_min_m,
            headway_max_m: ctrl.headway_max_m,
            gp_window: ctrl.gp_window,
            gp_noise_variance: ctrl.gp_noise_variance,
            gp_refit_period_steps: ctrl.gp_refit_period,
            qp_max_iter: ctrl.qp_max_iter,
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let cfg = Self::from_toml_str(&text).map_err(|message| ScenarioError::Parse {
            path: path.to_path_buf(),
            message,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.control_rate_hz
    }

    pub fn step_count(&self) -> usize {
        (self.episode_length_s * self.control_rate_hz).round() as usize
    }

    /// Phase intervals `[b_k, b_{k+1})`.
    pub fn phases(&self) -> Vec<(f64, f64)> {
        self.phase_boundaries_s.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn true_car(&self) -> CarParams {
        CarParams {
            mass_kg: self.true_mass_kg,
            gravity_mps2: self.gravity_mps2,
            drag_f0_n: self.true_drag_f0_n,
            drag_f1_ns_per_m: self.true_drag_f1_ns_per_m,
            drag_f2_ns2_per_m2: self.true_drag_f2_ns2_per_m2,
            rolling_coefficient: self.rolling_initial,
            accel_cap: self.accel_cap_g,
            decel_cap: self.decel_cap_g,
            v_max_mps: self.v_max_mps,
        }
    }

    pub fn nominal_car(&self) -> CarParams {
        CarParams {
            mass_kg: self.nominal_mass_kg,
            drag_f0_n: self.nominal_drag_f0_n,
            drag_f1_ns_per_m: self.nominal_drag_f1_ns_per_m,
            drag_f2_ns2_per_m2: self.nominal_drag_f2_ns2_per_m2,
            rolling_coefficient: self.nominal_rolling_coefficient,
            ..self.true_car()
        }
    }

    fn drivers(&self, k_b: f64, k_p: f64) -> DriverParams {
        DriverParams {
            k_b,
            k_p,
            b_st_m: self.range_stop_m,
            b_go_m: self.range_go_m,
            k_range_per_s: self.range_slope_per_s,
            car_length_m: self.car_length_m,
            v_max_mps: self.v_max_mps,
        }
    }

    pub fn plant_config(&self) -> PlantConfig {
        PlantConfig {
            cars: [self.true_car(); CAR_COUNT],
            drivers: self.drivers(self.human_k_b_ns_per_m, self.human_k_p_ns_per_m),
            schedule: DisturbanceSchedule {
                rolling_initial: self.rolling_initial,
                rolling_mid: self.rolling_mid,
                rolling_final: self.rolling_final,
                friction_change_s: self.friction_change_s,
                friction_restore_s: self.friction_restore_s,
                grade_start_s: self.grade_start_s,
                grade_amplitude_mps2: self.grade_amplitude_mps2,
                grade_frequency_rad_s: self.grade_frequency_rad_s,
            },
            lead: LeadProfile {
                initial_mps: self.lead_initial_mps,
                cruise_mps: self.lead_cruise_mps,
                initial_ramp_mps2: self.lead_initial_ramp_mps2,
                phase2_start_s: self.lead_climb_start_s,
                high_mps: self.lead_high_mps,
                climb_mps2: self.lead_climb_mps2,
                brake_start_s: self.lead_brake_start_s,
                brake_mps2: self.lead_brake_mps2,
                phase3_start_s: self.lead_wave_start_s,
                wave_amplitude_mps: self.lead_wave_amplitude_mps,
                wave_frequency_rad_s: self.lead_wave_frequency_rad_s,
                horizon_s: self.episode_length_s,
            },
            lead_gain_per_s: self.lead_gain_per_s,
            substeps: self.plant_substeps,
        }
    }

    pub fn controller_config(&self) -> ControllerConfig {
        ControllerConfig {
            variant: self.controller,
            c_delta: self.c_delta,
            k_eps: self.k_eps,
            k_eta: self.k_eta,
            clf_rate: self.clf_rate_per_s,
            barrier_lambda: self.barrier_lambda_per_s,
            barrier_k_alpha: self.barrier_k_alpha_per_s,
            v_des_mps: self.v_des_mps,
            headway_min_m: self.headway_min_m,
            headway_max_m: self.headway_max_m,
            gp_window: self.gp_window,
            gp_noise_variance: self.gp_noise_variance,
            gp_refit_period: self.gp_refit_period_steps,
            nominal_car: self.nominal_car(),
            nominal_driver: self.drivers(self.nominal_k_b_ns_per_m, self.nominal_k_p_ns_per_m),
            qp_max_iter: self.qp_max_iter,
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if !(self.control_rate_hz.is_finite() && self.control_rate_hz > 0.0) {
            return bad(format!("control rate must be positive, got {}", self.control_rate_hz));
        }
        if !(self.episode_length_s.is_finite() && self.episode_length_s > 0.0) {
            return bad(format!("episode length must be positive, got {}", self.episode_length_s));
        }
        let b = &self.phase_boundaries_s;
        if b.len() < 2 || b.windows(2).any(|w| !(w[0] < w[1])) {
            return bad(format!("phase boundaries must be strictly increasing, got {b:?}"));
        }
        if !(self.position_noise_m >= 0.0 && self.velocity_noise_mps >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        if self
            .initial_positions_m
            .windows(2)
            .any(|w| !(w[0] > w[1]))
        {
            return bad("initial positions must decrease from front to back".into());
        }
        self.plant_config().validate()?;
        self.controller_config().validate()?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogMetadata {
    pub version: String,
    pub config_hash: String,
    pub controller: Variant,
    pub seed: u64,
    pub dt_s: f64,
    pub phase_boundaries_s: Vec<f64>,
    pub headway_min_m: f64,
    pub headway_max_m: f64,
    pub v_des_mps: f64,
    /// False when `solve_ms` was zeroed for byte-reproducible output.
    pub timing_exported: bool,
}

impl LogMetadata {
    pub fn for_config(cfg: &ScenarioConfig) -> Self {
        Self {
            version: LOG_VERSION.into(),
            config_hash: cfg.hash(),
            controller: cfg.controller,
            seed: cfg.seed,
            dt_s: cfg.dt(),
            phase_boundaries_s: cfg.phase_boundaries_s.clone(),
            headway_min_m: cfg.headway_min_m,
            headway_max_m: cfg.headway_max_m,
            v_des_mps: cfg.v_des_mps,
            timing_exported: false,
        }
    }
}

/// One logged control step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub t: f64,
    pub p: [f64; CAR_COUNT],
    pub v: [f64; CAR_COUNT],
    /// Mean acceleration over the step that follows `t`.
    pub a: [f64; CAR_COUNT],
    /// Forces applied over that step.
    pub u: [f64; CAR_COUNT],
    pub eps: f64,
    pub eta: f64,
    pub mu_c3: f64,
    pub sigma_c3: f64,
    pub mu_c4: f64,
    pub sigma_c4: f64,
    pub h1: f64,
    pub h2: f64,
    pub lyapunov: f64,
    /// Controller wall time: GP predict, row build and QP solve.
    pub solve_ms: f64,
}

impl LogRow {
    pub fn values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(columns().len());
        out.push(self.t);
        for arr in [&self.p, &self.v, &self.a, &self.u] {
            out.extend_from_slice(arr);
        }
        out.extend_from_slice(&[
            self.eps,
            self.eta,
            self.mu_c3,
            self.sigma_c3,
            self.mu_c4,
            self.sigma_c4,
            self.h1,
            self.h2,
            self.lyapunov,
            self.solve_ms,
        ]);
        out
    }

    pub fn from_values(v: &[f64]) -> Option<Self> {
        if v.len() != columns().len() {
            return None;
        }
        let arr = |k: usize| -> [f64; CAR_COUNT] { v[k..k + CAR_COUNT].try_into().unwrap() };
        Some(Self {
            t: v[0],
            p: arr(1),
            v: arr(6),
            a: arr(11),
            u: arr(16),
            eps: v[21],
            eta: v[22],
            mu_c3: v[23],
            sigma_c3: v[24],
            mu_c4: v[25],
            sigma_c4: v[26],
            h1: v[27],
            h2: v[28],
            lyapunov: v[29],
            solve_ms: v[30],
        })
    }

    pub fn headway(&self) -> f64 {
        self.p[FRONT] - self.p[EGO]
    }
}

/// Per-step data kept in memory only: ground truth and QP internals.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// True model error of the two channels at the logged state.
    pub true_residual: [f64; 2],
    pub qp_ms: f64,
    pub status: QpStatus,
    pub problem: QProblem,
    pub u_ego: f64,
    pub eps: f64,
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub metadata: LogMetadata,
    pub rows: Vec<LogRow>,
    pub steps: Vec<StepRecord>,
}

impl EpisodeLog {
    pub fn new(metadata: LogMetadata) -> Self {
        Self {
            metadata,
            rows: Vec::new(),
            steps: Vec::new(),
        }
    }
}

/// Episode that stopped early; `log` holds every completed step.
#[derive(Debug, Error)]
#[error("episode aborted at t={t}: {error}")]
pub struct EpisodeFault {
    pub t: f64,
    pub log: Box<EpisodeLog>,
    pub error: ScenarioError,
}

fn measure(
    state: &FleetState,
    cfg: &ScenarioConfig,
    rng: &mut ChaCha8Rng,
) -> FleetState {
    if cfg.position_noise_m == 0.0 && cfg.velocity_noise_mps == 0.0 {
        return *state;
    }
    let pos = Normal::new(0.0, cfg.position_noise_m).expect("validated std-dev");
    let vel = Normal::new(0.0, cfg.velocity_noise_mps).expect("validated std-dev");
    let mut m = *state;
    for i in 0..CAR_COUNT {
        m.p[i] += pos.sample(rng);
        m.v[i] += vel.sample(rng);
    }
    m
}

/// Full closed-loop rollout. Deterministic for a given config (the seed
/// only drives measurement noise).
pub fn run_episode(cfg: &ScenarioConfig) -> Result<EpisodeLog, EpisodeFault> {
    let mut log = EpisodeLog::new(LogMetadata::for_config(cfg));
    let fault = |log: EpisodeLog, t: f64, error: ScenarioError| EpisodeFault {
        t,
        log: Box::new(log),
        error,
    };
    if let Err(e) = cfg.validate() {
        return Err(fault(log, 0.0, e));
    }
    let plant = match Plant::new(cfg.plant_config()) {
        Ok(p) => p,
        Err(e) => return Err(fault(log, 0.0, e.into())),
    };
    let ctrl_cfg = cfg.controller_config();
    let mut controller = match Controller::new(ctrl_cfg) {
        Ok(c) => c,
        Err(e) => return Err(fault(log, 0.0, e.into())),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dt = cfg.dt();
    let mut state = FleetState::new(cfg.initial_positions_m, cfg.initial_velocities_mps);

    for k in 0..cfg.step_count() {
        let t = state.t;
        match step_once(&plant, &mut controller, &ctrl_cfg, &state, cfg, &mut rng, dt) {
            Ok((next, row, record)) => {
                log.rows.push(row);
                log.steps.push(record);
                state = next;
                // keep t on the exact grid instead of accumulating dt
                state.t = (k + 1) as f64 * dt;
            }
            Err(e) => {
                log::error!("episode aborted at t={t}: {e}");
                return Err(fault(log, t, e));
            }
        }
    }
    Ok(log)
}

fn step_once(
    plant: &Plant,
    controller: &mut Controller,
    ctrl_cfg: &ControllerConfig,
    state: &FleetState,
    cfg: &ScenarioConfig,
    rng: &mut ChaCha8Rng,
    dt: f64,
) -> Result<(FleetState, LogRow, StepRecord), ScenarioError> {
    let measured = measure(state, cfg, rng);
    controller.observe(&measured)?;
    let start = Instant::now();
    let ControlOutput { u, diagnostics: d } = controller.control(&measured)?;
    let solve_ms = start.elapsed().as_secs_f64() * 1e3;
    if !u.is_finite() {
        return Err(ControllerError::NonFinite(Box::new(measured)).into());
    }

    let mut controls = [0.0; CAR_COUNT];
    for (i, c) in controls.iter_mut().enumerate().skip(1) {
        *c = if i == EGO { u } else { plant.human_control(i, state) };
    }
    let t = state.t;
    let accel = [
        plant.true_accel(FRONT, state.v[FRONT], controls[FRONT], t),
        plant.true_accel(EGO, state.v[EGO], plant.config().cars[EGO].clamp_force(u), t),
    ];
    let true_residual = channel_residuals(
        ctrl_cfg,
        state,
        accel,
        plant.config().cars[EGO].clamp_force(u),
    );

    let out = plant.step(state, &controls, dt)?;
    let row = LogRow {
        t,
        p: state.p,
        v: state.v,
        a: out.state.a,
        u: out.applied,
        eps: d.eps,
        eta: d.eta,
        mu_c3: d.mu[0],
        sigma_c3: d.sigma[0],
        mu_c4: d.mu[1],
        sigma_c4: d.sigma[1],
        h1: d.h[0],
        h2: d.h[1],
        lyapunov: d.lyapunov,
        solve_ms,
    };
    let record = StepRecord {
        true_residual,
        qp_ms: d.qp_ms,
        status: d.status,
        u_ego: u,
        eps: d.eps,
        eta: d.eta,
        problem: d.problem,
    };
    Ok((out.state, row, record))
}

/// Mean |v4 - v_des| over rows with `t` in `[start, end)`; the final
/// phase also takes a row sitting exactly on its end.
pub fn mae(log: &EpisodeLog, phase: (f64, f64)) -> Result<f64, ScenarioError> {
    let (start, end) = phase;
    let last_end = log
        .metadata
        .phase_boundaries_s
        .last()
        .copied()
        .unwrap_or(f64::INFINITY);
    let samples: Vec<f64> = log
        .rows
        .iter()
        .filter(|r| r.t >= start && (r.t < end || (end >= last_end && r.t <= end)))
        .map(|r| (r.v[EGO] - log.metadata.v_des_mps).abs())
        .collect();
    if samples.is_empty() {
        return Err(ScenarioError::Metric(format!(
            "no samples in phase [{start}, {end})"
        )));
    }
    Ok(samples.iter().sum::<f64>() / samples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadwayStats {
    pub min: f64,
    pub max: f64,
    pub violations: usize,
    pub first_violation_t: Option<f64>,
}

/// Headway `p3 - p4` against `[b_st, b_go]` over every row.
pub fn headway_stats(log: &EpisodeLog, bounds: (f64, f64)) -> HeadwayStats {
    let mut s = HeadwayStats {
        min: f64::INFINITY,
        max: f64::NEG_INFINITY,
        violations: 0,
        first_violation_t: None,
    };
    for r in &log.rows {
        let b = r.headway();
        s.min = s.min.min(b);
        s.max = s.max.max(b);
        if !(b >= bounds.0 && b <= bounds.1) {
            s.violations += 1;
            s.first_violation_t.get_or_insert(r.t);
        }
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

/// Shortest of fixed or scientific notation carrying 9 significant digits.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let fixed = format!("{x:.decimals$}");
        if fixed.contains('.') {
            fixed.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            fixed
        }
    } else {
        let m = mantissa.trim_end_matches('0').trim_end_matches('.');
        format!("{m}e{exp}")
    }
}

fn exported_values(row: &LogRow, timing: bool) -> Vec<f64> {
    let mut v = row.values();
    if !timing {
        *v.last_mut().unwrap() = 0.0;
    }
    v
}

pub fn to_csv(log: &EpisodeLog) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(columns()).expect("in-memory write");
    for row in &log.rows {
        w.write_record(
            exported_values(row, log.metadata.timing_exported)
                .iter()
                .map(|x| format_sig9(*x)),
        )
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii output")
}

pub fn parse_csv(text: &str) -> Result<Vec<LogRow>, String> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| e.to_string())?;
    if header.iter().ne(columns().iter().copied()) {
        return Err(format!("unexpected header {header:?}"));
    }
    r.records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec.map_err(|e| e.to_string())?;
            let vals = rec
                .iter()
                .map(|s| s.parse::<f64>().map_err(|e| format!("row {}: {s:?}: {e}", i + 1)))
                .collect::<Result<Vec<_>, _>>()?;
            LogRow::from_values(&vals).ok_or_else(|| format!("row {}: wrong field count", i + 1))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct JsonLog {
    metadata: LogMetadata,
    rows: Vec<serde_json::Map<String, serde_json::Value>>,
}

pub fn to_json(log: &EpisodeLog) -> String {
    let rows = log
        .rows
        .iter()
        .map(|row| {
            columns()
                .iter()
                .zip(exported_values(row, log.metadata.timing_exported))
                .map(|(name, x)| {
                    // same rounding as the CSV so both exports parse identically
                    let rounded: f64 = format_sig9(x).parse().expect("formatted float");
                    (name.to_string(), serde_json::json!(rounded))
                })
                .collect()
        })
        .collect();
    serde_json::to_string_pretty(&JsonLog {
        metadata: log.metadata.clone(),
        rows,
    })
    .expect("log serializes")
}

pub fn parse_json(text: &str) -> Result<(LogMetadata, Vec<LogRow>), String> {
    let doc: JsonLog = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let rows = doc
        .rows
        .iter()
        .enumerate()
        .map(|(i, obj)| {
            if obj.len() != columns().len() {
                return Err(format!("row {i}: expected {} fields", columns().len()));
            }
            let vals = columns()
                .iter()
                .map(|c| {
                    obj.get(*c)
                        .and_then(|v| v.as_f64())
                        .ok_or_else(|| format!("row {i}: missing or non-numeric {c:?}"))
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(LogRow::from_values(&vals).expect("field count checked"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((doc.metadata, rows))
}

/// Writes the log to `path`. CSV output gets a `<stem>.meta.json` sidecar
/// with the metadata.
pub fn export(log: &EpisodeLog, format: Format, path: &Path) -> Result<(), ScenarioError> {
    match format {
        Format::Csv => {
            fs::write(path, to_csv(log)).map_err(io_err(path))?;
            let meta = sidecar_path(path);
            let text = serde_json::to_string_pretty(&log.metadata).expect("metadata serializes");
            fs::write(&meta, text).map_err(io_err(&meta))
        }
        Format::Json => fs::write(path, to_json(log)).map_err(io_err(path)),
    }
}

pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    let stem = csv_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    csv_path.with_file_name(format!("{stem}.meta.json"))
}

/// Reads a CSV (with optional sidecar) or JSON log back from disk.
pub fn load_log(path: &Path) -> Result<EpisodeLog, ScenarioError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let parse = |message: String| ScenarioError::Parse {
        path: path.to_path_buf(),
        message,
    };
    let (metadata, rows) = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => parse_json(&text).map_err(parse)?,
        Some("csv") => {
            let rows = parse_csv(&text).map_err(parse)?;
            let meta = sidecar_path(path);
            let metadata = match fs::read_to_string(&meta) {
                Ok(m) => serde_json::from_str(&m).map_err(|e| ScenarioError::Parse {
                    path: meta.clone(),
                    message: e.to_string(),
                })?,
                Err(_) => LogMetadata::for_config(&ScenarioConfig::default()),
            };
            (metadata, rows)
        }
        _ => return Err(parse("expected a .csv or .json log".into())),
    };
    Ok(EpisodeLog {
        metadata,
        rows,
        steps: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(rows: usize, headway: f64, v4: f64) -> EpisodeLog {
        let mut log = EpisodeLog::new(LogMetadata::for_config(&ScenarioConfig::default()));
        for k in 0..rows {
            let mut p = [0.0; CAR_COUNT];
            p[FRONT] = headway;
            let mut v = [20.0; CAR_COUNT];
            v[EGO] = v4;
            log.rows.push(LogRow {
                t: k as f64 * 0.02,
                p,
                v,
                a: [0.0; CAR_COUNT],
                u: [0.0; CAR_COUNT],
                eps: 0.0,
                eta: 0.0,
                mu_c3: 0.0,
                sigma_c3: 0.0,
                mu_c4: 0.0,
                sigma_c4: 0.0,
                h1: headway - 25.0,
                h2: 100.0 - headway,
                lyapunov: 0.5 * (v4 - 20.0).powi(2),
                solve_ms: 0.0,
            });
        }
        log
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(0.0), "0");
        assert_eq!(format_sig9(1.0), "1");
        assert_eq!(format_sig9(240.0), "240");
        assert_eq!(format_sig9(0.1), "0.1");
        assert_eq!(format_sig9(-4855.95), "-4855.95");
        assert_eq!(format_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(format_sig9(1e30), "1e30");
        assert_eq!(format_sig9(1.234e-9), "1.234e-9");
        assert_eq!(format_sig9(123456789012.0), "1.23456789e11");
    }

    #[test]
    fn two_row_csv_has_three_lines() {
        let csv = to_csv(&synthetic(2, 60.0, 20.0));
        assert_eq!(csv.lines().count(), 3);
        assert_eq!(csv.lines().next().unwrap(), columns().join(","));
    }

    #[test]
    fn constant_headway_stats() {
        let s = headway_stats(&synthetic(50, 60.0, 20.0), (25.0, 100.0));
        assert_eq!((s.min, s.max, s.violations, s.first_violation_t), (60.0, 60.0, 0, None));
        let s = headway_stats(&synthetic(3, 20.0, 20.0), (25.0, 100.0));
        assert_eq!((s.violations, s.first_violation_t), (3, Some(0.0)));
    }

    #[test]
    fn mae_of_constants() {
        assert_eq!(mae(&synthetic(100, 60.0, 20.0), (0.0, 2.0)).unwrap(), 0.0);
        assert!((mae(&synthetic(100, 60.0, 19.5), (0.0, 2.0)).unwrap() - 0.5).abs() < 1e-12);
        assert!(mae(&synthetic(10, 60.0, 20.0), (50.0, 60.0)).is_err());
    }

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = ScenarioConfig::default();
        let back = ScenarioConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
        assert_eq!(cfg.step_count(), 5000);
    }

    #[test]
    fn bad_configs_rejected() {
        let mut cfg = ScenarioConfig::default();
        cfg.control_rate_hz = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ScenarioConfig::default();
        cfg.phase_boundaries_s = vec![0.0, 70.0, 20.0];
        assert!(cfg.validate().is_err());
        assert!(ScenarioConfig::from_toml_str("episode_length = 3").is_err());
    }
}
