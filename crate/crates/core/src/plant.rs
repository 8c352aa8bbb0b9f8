//! Ground-truth five-car world: true longitudinal dynamics, human drivers,
//! the lead car's speed profile and road disturbances.
//!
//! Cars are indexed 0..5 front to back; car `i` follows car `i - 1`, and
//! car 0 tracks the lead profile with its own internal law.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{longitudinal_accel, CarParams, DynamicsError};

pub const CAR_COUNT: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FleetState {
    pub t: f64,
    pub p: [f64; CAR_COUNT],
    pub v: [f64; CAR_COUNT],
    /// Mean acceleration over the last step (log value only).
    pub a: [f64; CAR_COUNT],
}

impl FleetState {
    pub fn new(p: [f64; CAR_COUNT], v: [f64; CAR_COUNT]) -> Self {
        Self {
            t: 0.0,
            p,
            v,
            a: [0.0; CAR_COUNT],
        }
    }

    /// 60 m spacing, everyone at 18 m/s.
    pub fn initial_platoon() -> Self {
        Self::new([240.0, 180.0, 120.0, 60.0, 0.0], [18.0; CAR_COUNT])
    }

    /// Distance from car `rear` to the car ahead of it.
    pub fn headway(&self, rear: usize) -> f64 {
        self.p[rear - 1] - self.p[rear]
    }

    pub fn is_finite(&self) -> bool {
        self.t.is_finite()
            && self
                .p
                .iter()
                .chain(&self.v)
                .chain(&self.a)
                .all(|x| x.is_finite())
    }
}

impl fmt::Display for FleetState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t={}", self.t)?;
        for i in 0..CAR_COUNT {
            write!(
                f,
                " | car{}: p={} v={} a={}",
                i + 1,
                self.p[i],
                self.v[i],
                self.a[i]
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriverParams {
    pub k_b: f64,
    pub k_p: f64,
    pub b_st_m: f64,
    pub b_go_m: f64,
    /// Range-policy slope between the two headways (1/s).
    pub k_range_per_s: f64,
    pub car_length_m: f64,
    pub v_max_mps: f64,
}

impl DriverParams {
    /// Gains of the simulated human drivers.
    pub fn human() -> Self {
        Self {
            k_b: 30.0,
            k_p: 2000.0,
            b_st_m: 25.0,
            b_go_m: 100.0,
            k_range_per_s: 40.0 / 75.0,
            car_length_m: 0.0,
            v_max_mps: 40.0,
        }
    }

    /// The autonomous car's guess of the same drivers.
    pub fn nominal() -> Self {
        Self {
            k_b: 20.0,
            k_p: 1000.0,
            ..Self::human()
        }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(0.0 < self.b_st_m && self.b_st_m < self.b_go_m) {
            return Err(DynamicsError::InvalidParams(format!(
                "need 0 < B_st < B_go, got {} and {}",
                self.b_st_m, self.b_go_m
            )));
        }
        if !(self.k_range_per_s > 0.0) {
            return Err(DynamicsError::InvalidParams(
                "range-policy slope must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Desired speed for a given headway.
pub fn range_policy(headway: f64, params: &DriverParams) -> f64 {
    if headway <= params.b_st_m {
        0.0
    } else if headway >= params.b_go_m {
        params.v_max_mps
    } else {
        params.k_range_per_s * (headway - params.b_st_m)
    }
}

/// Unclamped human force `k_b (V(B) - v) + k_p (v_front - v)`.
pub fn human_force_raw(headway: f64, v: f64, v_front: f64, params: &DriverParams) -> f64 {
    params.k_b * (range_policy(headway, params) - v) + params.k_p * (v_front - v)
}

/// Force car `i` (≥ 1) applies when driven by a human.
pub fn human_driver_control(
    i: usize,
    state: &FleetState,
    params: &DriverParams,
    car: &CarParams,
) -> f64 {
    let headway = state.p[i - 1] - state.p[i] - params.car_length_m;
    car.clamp_force(human_force_raw(headway, state.v[i], state.v[i - 1], params))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceSchedule {
    /// Rolling coefficient before `friction_change_s`.
    pub rolling_initial: f64,
    /// Rolling coefficient on `[friction_change_s, friction_restore_s)`.
    pub rolling_mid: f64,
    /// Rolling coefficient from `friction_restore_s` on.
    pub rolling_final: f64,
    pub friction_change_s: f64,
    pub friction_restore_s: f64,
    pub grade_start_s: f64,
    pub grade_amplitude_mps2: f64,
    pub grade_frequency_rad_s: f64,
}

impl DisturbanceSchedule {
    pub fn standard() -> Self {
        Self {
            rolling_initial: 0.015,
            rolling_mid: 0.03,
            rolling_final: 0.015,
            friction_change_s: 10.0,
            friction_restore_s: 70.0,
            grade_start_s: 70.0,
            grade_amplitude_mps2: 2.5,
            grade_frequency_rad_s: 0.5,
        }
    }

    /// Fixed rolling coefficient, flat road.
    pub fn constant(rolling: f64) -> Self {
        Self {
            rolling_initial: rolling,
            rolling_mid: rolling,
            rolling_final: rolling,
            grade_amplitude_mps2: 0.0,
            ..Self::standard()
        }
    }

    pub fn rolling_coefficient(&self, t: f64) -> f64 {
        if t < self.friction_change_s {
            self.rolling_initial
        } else if t < self.friction_restore_s {
            self.rolling_mid
        } else {
            self.rolling_final
        }
    }

    /// Grade disturbance as an acceleration (m/s²), added to dv/dt.
    pub fn grade_accel(&self, t: f64) -> f64 {
        if t < self.grade_start_s {
            0.0
        } else {
            self.grade_amplitude_mps2 * (self.grade_frequency_rad_s * t).sin()
        }
    }
}

/// Target speed of the lead car over the three phases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeadProfile {
    pub initial_mps: f64,
    pub cruise_mps: f64,
    pub initial_ramp_mps2: f64,
    pub phase2_start_s: f64,
    pub high_mps: f64,
    pub climb_mps2: f64,
    pub brake_start_s: f64,
    /// Deceleration magnitude from `high_mps` back to `cruise_mps`.
    pub brake_mps2: f64,
    pub phase3_start_s: f64,
    pub wave_amplitude_mps: f64,
    pub wave_frequency_rad_s: f64,
    pub horizon_s: f64,
}

impl LeadProfile {
    pub fn standard() -> Self {
        Self {
            initial_mps: 18.0,
            cruise_mps: 20.0,
            initial_ramp_mps2: 0.4,
            phase2_start_s: 20.0,
            high_mps: 30.0,
            climb_mps2: 2.0,
            brake_start_s: 40.0,
            brake_mps2: 2.5,
            phase3_start_s: 70.0,
            wave_amplitude_mps: 1.5,
            wave_frequency_rad_s: 0.5,
            horizon_s: 100.0,
        }
    }

    pub fn velocity(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, self.horizon_s);
        if t < self.phase2_start_s {
            (self.initial_mps + self.initial_ramp_mps2 * t).min(self.cruise_mps)
        } else if t < self.brake_start_s {
            (self.cruise_mps + self.climb_mps2 * (t - self.phase2_start_s)).min(self.high_mps)
        } else if t < self.phase3_start_s {
            (self.high_mps - self.brake_mps2 * (t - self.brake_start_s)).max(self.cruise_mps)
        } else {
            self.cruise_mps
                + self.wave_amplitude_mps
                    * (self.wave_frequency_rad_s * (t - self.phase3_start_s)).sin()
        }
    }

    /// Largest slope of the profile (m/s²).
    pub fn max_rate(&self) -> f64 {
        self.initial_ramp_mps2
            .max(self.climb_mps2)
            .max(self.brake_mps2)
            .max(self.wave_amplitude_mps * self.wave_frequency_rad_s)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("time step must be positive, got {0}")]
    NonPositiveStep(f64),
    #[error("non-finite fleet state after step: {0}")]
    NonFinite(Box<FleetState>),
    #[error(transparent)]
    Params(#[from] DynamicsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantConfig {
    pub cars: [CarParams; CAR_COUNT],
    pub drivers: DriverParams,
    pub schedule: DisturbanceSchedule,
    pub lead: LeadProfile,
    /// Proportional gain of the lead car's speed law (1/s).
    pub lead_gain_per_s: f64,
    pub substeps: usize,
}

impl PlantConfig {
    pub fn standard() -> Self {
        Self {
            cars: [CarParams::accurate(); CAR_COUNT],
            drivers: DriverParams::human(),
            schedule: DisturbanceSchedule::standard(),
            lead: LeadProfile::standard(),
            lead_gain_per_s: 2.0,
            substeps: 4,
        }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        for c in &self.cars {
            c.validate()?;
        }
        self.drivers.validate()?;
        if self.substeps == 0 {
            return Err(DynamicsError::InvalidParams("substeps must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub state: FleetState,
    /// Forces actually applied over the step, after clamping.
    pub applied: [f64; CAR_COUNT],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plant {
    config: PlantConfig,
}

impl Plant {
    pub fn new(config: PlantConfig) -> Result<Self, PlantError> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &PlantConfig {
        &self.config
    }

    /// True car parameters of car `i` at time `t`.
    pub fn car_at(&self, i: usize, t: f64) -> CarParams {
        self.config.cars[i].with_rolling_coefficient(self.config.schedule.rolling_coefficient(t))
    }

    /// True acceleration of car `i` at speed `v` under force `u`.
    pub fn true_accel(&self, i: usize, v: f64, u: f64, t: f64) -> f64 {
        longitudinal_accel(v, u, &self.car_at(i, t), self.config.schedule.grade_accel(t))
    }

    /// Lead car force: speed tracking plus resistance compensation.
    pub fn lead_control(&self, state: &FleetState) -> f64 {
        let t = state.t;
        let car = self.car_at(0, t);
        let m = car.mass_kg;
        let v = state.v[0];
        let raw = self.config.lead_gain_per_s * m * (self.config.lead.velocity(t) - v)
            + car.drag_force(v)
            + car.rolling_force()
            - m * self.config.schedule.grade_accel(t);
        car.clamp_force(raw)
    }

    /// Human force for follower `i` from the true state.
    pub fn human_control(&self, i: usize, state: &FleetState) -> f64 {
        human_driver_control(i, state, &self.config.drivers, &self.config.cars[i])
    }

    /// Advances the fleet by `dt` with zero-order-hold forces. Entry 0 of
    /// `controls` is ignored; the lead car runs its own law.
    pub fn step(
        &self,
        state: &FleetState,
        controls: &[f64; CAR_COUNT],
        dt: f64,
    ) -> Result<StepOutcome, PlantError> {
        if !(dt > 0.0) {
            return Err(PlantError::NonPositiveStep(dt));
        }
        let mut applied = [0.0; CAR_COUNT];
        applied[0] = self.lead_control(state);
        for i in 1..CAR_COUNT {
            applied[i] = self.config.cars[i].clamp_force(controls[i]);
        }

        let n = self.config.substeps;
        let h = dt / n as f64;
        let mut y = pack(state);
        for k in 0..n {
            let t = state.t + k as f64 * h;
            let k1 = self.rhs(t, &y, &applied);
            let k2 = self.rhs(t + 0.5 * h, &axpy(&y, 0.5 * h, &k1), &applied);
            let k3 = self.rhs(t + 0.5 * h, &axpy(&y, 0.5 * h, &k2), &applied);
            let k4 = self.rhs(t + h, &axpy(&y, h, &k3), &applied);
            for j in 0..2 * CAR_COUNT {
                y[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
            }
        }

        let mut next = FleetState {
            t: state.t + dt,
            p: [0.0; CAR_COUNT],
            v: [0.0; CAR_COUNT],
            a: [0.0; CAR_COUNT],
        };
        for i in 0..CAR_COUNT {
            next.p[i] = y[i];
            next.v[i] = y[CAR_COUNT + i];
            next.a[i] = (next.v[i] - state.v[i]) / dt;
        }
        if !next.is_finite() {
            return Err(PlantError::NonFinite(Box::new(next)));
        }
        Ok(StepOutcome {
            state: next,
            applied,
        })
    }

    fn rhs(&self, t: f64, y: &[f64; 2 * CAR_COUNT], u: &[f64; CAR_COUNT]) -> [f64; 2 * CAR_COUNT] {
        let mut d = [0.0; 2 * CAR_COUNT];
        for i in 0..CAR_COUNT {
            d[i] = y[CAR_COUNT + i];
            d[CAR_COUNT + i] = self.true_accel(i, y[CAR_COUNT + i], u[i], t);
        }
        d
    }
}

fn pack(state: &FleetState) -> [f64; 2 * CAR_COUNT] {
    let mut y = [0.0; 2 * CAR_COUNT];
    y[..CAR_COUNT].copy_from_slice(&state.p);
    y[CAR_COUNT..].copy_from_slice(&state.v);
    y
}

fn axpy(y: &[f64; 2 * CAR_COUNT], a: f64, x: &[f64; 2 * CAR_COUNT]) -> [f64; 2 * CAR_COUNT] {
    let mut out = *y;
    for j in 0..2 * CAR_COUNT {
        out[j] += a * x[j];
    }
    out
}
