//! Scenario configuration, loaded from JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::estimator::{EstimatorConfig, MeasurementNoise};
use crate::guidance::{GuidanceParams, Phase, ReplanThresholds};
use crate::innerloop::{InnerLoopConfig, SyntheticPropeller};
use crate::mpc::MpcConfig;
use crate::quatkin::UnitQuat;
use crate::vehicle::{VehicleParams, VehicleState};
use crate::{GncError, Result, Vec3};

/// Nominal pack voltage, V.
pub const NOMINAL_VOLTAGE: f64 = 14.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LegMode {
    /// Fly a guidance trajectory to the target.
    #[default]
    Guidance,
    /// Hand the target to the MPC directly as a step set-point.
    Setpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub target: [f64; 3],
    #[serde(default = "default_phase")]
    pub phase: Phase,
    #[serde(default)]
    pub mode: LegMode,
    /// Time to hold at the target after arrival before the next leg starts, s.
    #[serde(default)]
    pub hold_s: f64,
}

fn default_phase() -> Phase {
    Phase::Ascent
}

impl Waypoint {
    pub fn target(&self) -> Vec3 {
        Vec3::from(self.target)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialState {
    pub p: [f64; 3],
    pub v: [f64; 3],
    /// Scalar-first attitude; normalised on load.
    pub q: [f64; 4],
    pub omega: [f64; 3],
}

impl Default for InitialState {
    fn default() -> Self {
        Self { p: [0.0; 3], v: [0.0; 3], q: [1.0, 0.0, 0.0, 0.0], omega: [0.0; 3] }
    }
}

impl InitialState {
    /// Full state with the thrust at its hover value.
    pub fn to_state(&self, params: &VehicleParams) -> Result<VehicleState> {
        let [w, x, y, z] = self.q;
        let q = UnitQuat::normalize(w, x, y, z)?;
        Ok(VehicleState {
            p: Vec3::from(self.p),
            v: Vec3::from(self.v),
            q,
            omega: Vec3::from(self.omega),
            thrust: Vec3::new(params.mass * params.gravity_magnitude(), 0.0, 0.0),
        })
    }
}

/// Standard deviations of the simulated sensors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorNoise {
    pub pos: f64,
    pub att: f64,
    pub accel: f64,
    pub ang_accel: f64,
    /// Gyro used by the rate loop, rad/s.
    pub gyro: f64,
}

impl Default for SensorNoise {
    fn default() -> Self {
        let m = MeasurementNoise::default();
        Self { pos: m.pos, att: m.att, accel: m.accel, ang_accel: m.ang_accel, gyro: 0.002 }
    }
}

impl SensorNoise {
    pub fn zero() -> Self {
        Self { pos: 0.0, att: 0.0, accel: 0.0, ang_accel: 0.0, gyro: 0.0 }
    }
}

/// Piecewise-linear pack voltage over time, held constant outside the listed points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatteryProfile {
    pub nominal_v: f64,
    /// `(t, V)` pairs with increasing `t`.
    pub points: Vec<(f64, f64)>,
}

impl Default for BatteryProfile {
    fn default() -> Self {
        Self { nominal_v: NOMINAL_VOLTAGE, points: vec![] }
    }
}

impl BatteryProfile {
    pub fn linear_drop(from_v: f64, to_v: f64, duration_s: f64) -> Self {
        Self { nominal_v: NOMINAL_VOLTAGE, points: vec![(0.0, from_v), (duration_s, to_v)] }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nominal_v > 0.0) {
            return Err(GncError::Config("battery nominal voltage must be positive".into()));
        }
        if self.points.windows(2).any(|w| !(w[1].0 > w[0].0)) || self.points.iter().any(|p| !(p.1 > 0.0)) {
            return Err(GncError::Config("battery profile needs increasing times and positive voltages".into()));
        }
        Ok(())
    }
}

/// Pack voltage and the resulting thrust gain at time `t`.
pub fn battery_model(t: f64, profile: &BatteryProfile) -> (f64, f64) {
    let pts = &profile.points;
    let v = match pts.len() {
        0 => profile.nominal_v,
        _ if t <= pts[0].0 => pts[0].1,
        n if t >= pts[n - 1].0 => pts[n - 1].1,
        _ => {
            let i = pts.partition_point(|p| p.0 <= t);
            let (a, b) = (pts[i - 1], pts[i]);
            a.1 + (b.1 - a.1) * (t - a.0) / (b.0 - a.0)
        }
    };
    (v, v / profile.nominal_v)
}

/// World-frame acceleration switched on at `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccelStep {
    pub t: f64,
    pub accel: [f64; 3],
}

/// Differences between the truth plant and the control model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Mismatch {
    /// Centre-of-gravity displacement in body axes, m.
    pub cog_offset: [f64; 3],
    /// Constant scale on realised thrust and roll torque.
    pub thrust_gain: f64,
    /// Constant world-frame acceleration, m/s².
    pub wind_accel: [f64; 3],
    pub accel_steps: Vec<AccelStep>,
    pub battery: BatteryProfile,
}

impl Default for Mismatch {
    fn default() -> Self {
        Self { cog_offset: [0.0; 3], thrust_gain: 1.0, wind_accel: [0.0; 3], accel_steps: vec![], battery: BatteryProfile::default() }
    }
}

impl Mismatch {
    /// External world-frame acceleration at time `t`.
    pub fn external_accel(&self, t: f64) -> Vec3 {
        let mut a = Vec3::from(self.wind_accel);
        for s in &self.accel_steps {
            if t >= s.t {
                a += Vec3::from(s.accel);
            }
        }
        a
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Rates {
    pub physics_hz: u32,
    pub rate_hz: u32,
    pub attitude_hz: u32,
    pub estimator_hz: u32,
    pub mpc_hz: u32,
    pub disturbance_hz: u32,
}

impl Default for Rates {
    fn default() -> Self {
        Self { physics_hz: 2000, rate_hz: 1000, attitude_hz: 250, estimator_hz: 250, mpc_hz: 25, disturbance_hz: 25 }
    }
}

impl Rates {
    pub fn validate(&self) -> Result<()> {
        let chain = [
            ("physics", self.physics_hz, "rate", self.rate_hz),
            ("rate", self.rate_hz, "attitude", self.attitude_hz),
            ("attitude", self.attitude_hz, "mpc", self.mpc_hz),
            ("physics", self.physics_hz, "estimator", self.estimator_hz),
            ("estimator", self.estimator_hz, "disturbance", self.disturbance_hz),
            ("estimator", self.estimator_hz, "mpc", self.mpc_hz),
        ];
        for (hi_name, hi, lo_name, lo) in chain {
            if lo == 0 || hi < lo || hi % lo != 0 {
                return Err(GncError::Config(format!(
                    "{hi_name} rate {hi} Hz must be an integer multiple of {lo_name} rate {lo} Hz"
                )));
            }
        }
        Ok(())
    }

    /// Physics ticks per tick of a loop running at `hz`.
    pub fn divider(&self, hz: u32) -> u64 {
        (self.physics_hz / hz) as u64
    }
}

/// Synthetic load-cell run used to identify the allocation maps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub dc_min: f64,
    pub dc_max: f64,
    pub step_us: f64,
    /// Standard deviation of the thrust readings, N.
    pub thrust_noise: f64,
    /// Standard deviation of the torque readings, N·m.
    pub torque_noise: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { dc_min: 1100.0, dc_max: 1900.0, step_us: 100.0, thrust_noise: 0.0, torque_noise: 0.0 }
    }
}

/// Mission logic tuning. Values are engineering estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MissionConfig {
    /// Simulated delay between a guidance request and its trajectory going live, s.
    pub guidance_latency_s: f64,
    /// Near-end replans are skipped when the estimate is this close to the target, m.
    pub near_end_guard_m: f64,
    /// Shortest interval between two replans of the same leg, s.
    pub min_replan_interval_s: f64,
    /// Distance to the target counted as arrival, m.
    pub arrival_tol_m: f64,
    /// Sink rate commanded after a descent trajectory ends, m/s.
    pub landing_creep_mps: f64,
    pub touchdown_altitude_m: f64,
    pub touchdown_speed_mps: f64,
    /// Consecutive guidance failures tolerated before the mission aborts.
    pub max_guidance_failures: usize,
}

impl Default for MissionConfig {
    fn default() -> Self {
        Self {
            guidance_latency_s: 0.12,
            near_end_guard_m: 0.4,
            min_replan_interval_s: 1.0,
            arrival_tol_m: 0.3,
            landing_creep_mps: 0.3,
            touchdown_altitude_m: 0.02,
            touchdown_speed_mps: 0.5,
            max_guidance_failures: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub duration_s: f64,
    pub vehicle: VehicleParams,
    pub initial: InitialState,
    pub mission: Vec<Waypoint>,
    pub sensors: SensorNoise,
    pub mismatch: Mismatch,
    pub rates: Rates,
    pub guidance: GuidanceParams,
    pub replan: ReplanThresholds,
    pub mission_config: MissionConfig,
    pub mpc: MpcConfig,
    pub estimator: EstimatorConfig,
    pub innerloop: InnerLoopConfig,
    pub propeller: SyntheticPropeller,
    pub bench: BenchConfig,
    /// Solve guidance on the simulation thread instead of a worker thread.
    pub sync_guidance: bool,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            name: "hover".into(),
            seed: 0,
            duration_s: 10.0,
            vehicle: VehicleParams::default(),
            initial: InitialState::default(),
            mission: vec![],
            sensors: SensorNoise::default(),
            mismatch: Mismatch::default(),
            rates: Rates::default(),
            guidance: GuidanceParams::default(),
            replan: ReplanThresholds::default(),
            mission_config: MissionConfig::default(),
            mpc: MpcConfig::default(),
            estimator: EstimatorConfig::default(),
            innerloop: InnerLoopConfig::default(),
            propeller: SyntheticPropeller::default(),
            bench: BenchConfig::default(),
            sync_guidance: false,
        }
    }
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| GncError::Config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.rates.validate()?;
        self.mismatch.battery.validate()?;
        self.guidance.validate().map_err(|e| GncError::Config(e.to_string()))?;
        self.mpc.weights.validate().map_err(|e| GncError::Config(e.to_string()))?;
        self.innerloop.gains.validate().map_err(|e| GncError::Config(e.to_string()))?;
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(GncError::Config("duration must be positive".into()));
        }
        if !(self.mismatch.thrust_gain > 0.0) {
            return Err(GncError::Config("thrust gain must be positive".into()));
        }
        let mpc_dt = 1.0 / self.rates.mpc_hz as f64;
        if (self.mpc.weights.dt - mpc_dt).abs() > 1e-12 {
            return Err(GncError::Config(format!(
                "MPC model step {} s must equal the MPC period {mpc_dt} s",
                self.mpc.weights.dt
            )));
        }
        for (i, w) in self.mission.iter().enumerate() {
            if w.target.iter().any(|v| !v.is_finite()) || w.hold_s < 0.0 {
                return Err(GncError::Config(format!("waypoint {i} is malformed")));
            }
        }
        self.initial.to_state(&self.vehicle).map_err(|e| GncError::Config(e.to_string()))?;
        Ok(())
    }

    /// Estimator tuning with the measurement noise matched to the simulated sensors, floored
    /// so that a noise-free scenario still has a well-posed filter.
    pub fn matched_estimator(&self) -> EstimatorConfig {
        let mut c = self.estimator.clone();
        let s = &self.sensors;
        let d = MeasurementNoise::default();
        c.noise = MeasurementNoise {
            pos: s.pos.max(d.pos * 0.1),
            att: s.att.max(d.att * 0.1),
            accel: s.accel.max(d.accel * 0.1),
            ang_accel: s.ang_accel.max(d.ang_accel * 0.1),
        };
        c
    }

    /// Zero-noise, zero-mismatch hover at `p`.
    pub fn hover(p: Vec3, duration_s: f64) -> Self {
        Self {
            name: "hover".into(),
            duration_s,
            initial: InitialState { p: p.into(), ..Default::default() },
            mission: vec![Waypoint { target: p.into(), phase: Phase::Ascent, mode: LegMode::Setpoint, hold_s: 0.0 }],
            sensors: SensorNoise::zero(),
            ..Default::default()
        }
    }

    /// Outdoor mission: climb to 10 m, then a combined translation and descent of 5 m to the pad,
    /// GPS-grade position noise.
    pub fn outdoor(seed: u64) -> Self {
        Self {
            name: "outdoor".into(),
            seed,
            duration_s: 60.0,
            mission: vec![
                Waypoint { target: [10.0, 0.0, 0.0], phase: Phase::Ascent, mode: LegMode::Guidance, hold_s: 1.0 },
                Waypoint { target: [0.0, 5.0, 0.0], phase: Phase::Descent, mode: LegMode::Guidance, hold_s: 0.0 },
            ],
            sensors: SensorNoise { pos: 0.3, att: 0.01, accel: 0.1, ang_accel: 0.5, gyro: 0.005 },
            ..Default::default()
        }
    }

    /// Indoor step from A to B under motion capture, with a CoG offset.
    pub fn indoor_step(seed: u64) -> Self {
        Self {
            name: "indoor-step".into(),
            seed,
            duration_s: 20.0,
            initial: InitialState { p: [1.2, 0.0, 0.0], ..Default::default() },
            mission: vec![
                Waypoint { target: [1.2, 0.0, 0.0], phase: Phase::Ascent, mode: LegMode::Setpoint, hold_s: 5.0 },
                Waypoint { target: [1.2, 2.0, 2.0], phase: Phase::Ascent, mode: LegMode::Setpoint, hold_s: 0.0 },
            ],
            mismatch: Mismatch { cog_offset: [0.0, 0.02, 0.0], ..Default::default() },
            ..Default::default()
        }
    }

    /// Altitude hold at 1.5 m while the pack sags 0.3 V over 60 s.
    pub fn battery_decay(seed: u64) -> Self {
        let p = [1.5, 0.0, 0.0];
        Self {
            name: "battery-decay".into(),
            seed,
            duration_s: 60.0,
            initial: InitialState { p, ..Default::default() },
            mission: vec![Waypoint { target: p, phase: Phase::Ascent, mode: LegMode::Setpoint, hold_s: 0.0 }],
            mismatch: Mismatch { battery: BatteryProfile::linear_drop(14.8, 14.5, 60.0), ..Default::default() },
            ..Default::default()
        }
    }

    /// Hover with an axial external acceleration step of `da` switched on at `t_step`.
    pub fn accel_step(seed: u64, da: f64, t_step: f64) -> Self {
        let p = [1.5, 0.0, 0.0];
        Self {
            name: "accel-step".into(),
            seed,
            duration_s: t_step + 5.0,
            initial: InitialState { p, ..Default::default() },
            mission: vec![Waypoint { target: p, phase: Phase::Ascent, mode: LegMode::Setpoint, hold_s: 0.0 }],
            mismatch: Mismatch { accel_steps: vec![AccelStep { t: t_step, accel: [da, 0.0, 0.0] }], ..Default::default() },
            ..Default::default()
        }
    }
}
