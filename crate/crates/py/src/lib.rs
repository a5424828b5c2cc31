//! Python bindings: scenarios and closed-loop runs, guidance, allocation, motor maps.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use rocket_gnc::guidance::{self, GuidanceParams, GuidanceStart, GuidanceTarget, Phase};
use rocket_gnc::harness::{self, BatteryProfile, BenchConfig};
use rocket_gnc::innerloop::{self, AllocationLimits, BenchSample, GimbalGeometry, SyntheticPropeller};
use rocket_gnc::{quatkin, GncError, Vec3};

type V3 = (f64, f64, f64);

fn err(e: GncError) -> PyErr {
    match e {
        GncError::Config(_) | GncError::Json(_) | GncError::InvalidParams(_) | GncError::InvalidArgument(_) => {
            PyValueError::new_err(e.to_string())
        }
        GncError::Io(_) | GncError::Csv(_) => PyOSError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn v3(v: V3) -> Vec3 {
    Vec3::new(v.0, v.1, v.2)
}

fn tup(v: &Vec3) -> V3 {
    (v.x, v.y, v.z)
}

fn phase(name: &str) -> PyResult<Phase> {
    match name {
        "ascent" => Ok(Phase::Ascent),
        "descent" => Ok(Phase::Descent),
        _ => Err(PyValueError::new_err(format!("unknown phase {name:?}, expected 'ascent' or 'descent'"))),
    }
}

/// Simulation scenario. Build one from a preset or from JSON.
#[pyclass(module = "rocket_gnc_py")]
struct Scenario {
    inner: harness::Scenario,
}

#[pymethods]
impl Scenario {
    #[staticmethod]
    fn hover(p: V3, duration_s: f64) -> Self {
        Self { inner: harness::Scenario::hover(v3(p), duration_s) }
    }

    #[staticmethod]
    fn outdoor(seed: u64) -> Self {
        Self { inner: harness::Scenario::outdoor(seed) }
    }

    #[staticmethod]
    fn indoor_step(seed: u64) -> Self {
        Self { inner: harness::Scenario::indoor_step(seed) }
    }

    #[staticmethod]
    fn battery_decay(seed: u64) -> Self {
        Self { inner: harness::Scenario::battery_decay(seed) }
    }

    /// Hover at 1.5 m with an unmodelled vertical acceleration step `da` at `t_step`.
    #[staticmethod]
    fn accel_step(seed: u64, da: f64, t_step: f64) -> Self {
        Self { inner: harness::Scenario::accel_step(seed, da, t_step) }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: harness::Scenario::from_json(text).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: harness::Scenario::load(&path).map_err(err)? })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(json_err)
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn duration_s(&self) -> f64 {
        self.inner.duration_s
    }

    #[setter]
    fn set_duration_s(&mut self, d: f64) {
        self.inner.duration_s = d;
    }

    #[getter]
    fn sync_guidance(&self) -> bool {
        self.inner.sync_guidance
    }

    #[setter]
    fn set_sync_guidance(&mut self, on: bool) {
        self.inner.sync_guidance = on;
    }

    /// Run the closed loop and return the flight log.
    fn run(&self, py: Python<'_>) -> PyResult<FlightLog> {
        let sc = self.inner.clone();
        let log = py.detach(move || harness::run_mission(&sc)).map_err(err)?;
        Ok(FlightLog { inner: log, scenario: self.inner.clone() })
    }

    fn __repr__(&self) -> String {
        format!("Scenario(name={:?}, seed={}, duration_s={})", self.inner.name, self.inner.seed, self.inner.duration_s)
    }
}

/// Logged closed-loop run at the MPC rate.
#[pyclass(module = "rocket_gnc_py")]
struct FlightLog {
    inner: harness::FlightLog,
    scenario: harness::Scenario,
}

#[pymethods]
impl FlightLog {
    fn __len__(&self) -> usize {
        self.inner.rows.len()
    }

    #[getter]
    fn completed(&self) -> bool {
        self.inner.outcome.completed
    }

    #[getter]
    fn final_error(&self) -> f64 {
        self.inner.outcome.final_error
    }

    #[getter]
    fn touchdown_error(&self) -> Option<f64> {
        self.inner.outcome.touchdown_error
    }

    fn times(&self) -> Vec<f64> {
        self.inner.rows.iter().map(|r| r.t).collect()
    }

    /// True positions, one `(x, y, z)` per row.
    fn positions(&self) -> Vec<V3> {
        self.inner.rows.iter().map(|r| tup(&r.position())).collect()
    }

    fn velocities(&self) -> Vec<V3> {
        self.inner.rows.iter().map(|r| tup(&r.velocity())).collect()
    }

    fn setpoints(&self) -> Vec<V3> {
        self.inner.rows.iter().map(|r| tup(&r.p_sp)).collect()
    }

    /// Disturbance estimate, 9 values per row: velocity, acceleration and angular acceleration offsets.
    fn disturbance(&self) -> Vec<Vec<f64>> {
        self.inner.rows.iter().map(|r| r.w_hat.iter().copied().collect()).collect()
    }

    fn inputs(&self) -> Vec<V3> {
        self.inner.rows.iter().map(|r| tup(&r.u)).collect()
    }

    fn summary_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner.summary()).map_err(json_err)
    }

    fn to_csv(&self) -> PyResult<String> {
        self.inner.csv_string().map_err(err)
    }

    /// Write flight.csv, events.json, summary.json, timing.csv and trajectory.svg into `dir`.
    fn write(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.write(&dir).map_err(err)
    }

    /// Offline audit; returns `(name, passed, detail)` per check.
    fn check(&self) -> Vec<(String, bool, String)> {
        harness::check_flight(&self.inner.rows, Some(&self.inner.events), &self.scenario)
            .items
            .into_iter()
            .map(|i| (i.name, i.passed, i.detail))
            .collect()
    }
}

/// Minimum-fuel trajectory returned by the guidance solver.
#[pyclass(module = "rocket_gnc_py")]
struct GuidanceSolution {
    inner: guidance::GuidanceSolution,
    params: GuidanceParams,
}

#[pymethods]
impl GuidanceSolution {
    #[getter]
    fn t_f(&self) -> f64 {
        self.inner.t_f
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.report.status == rocket_gnc::nlpsolver::SolveStatus::Converged
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.report.iterations
    }

    #[getter]
    fn objective(&self) -> f64 {
        self.inner.report.objective
    }

    fn positions(&self) -> Vec<V3> {
        self.inner.knots.iter().map(|k| tup(&k.p)).collect()
    }

    fn velocities(&self) -> Vec<V3> {
        self.inner.knots.iter().map(|k| tup(&k.v)).collect()
    }

    fn thrusts(&self) -> Vec<V3> {
        self.inner.knots.iter().map(|k| tup(&k.thrust)).collect()
    }

    /// Interpolated `(position, velocity)` at time `t` from the start of the trajectory.
    fn sample(&self, t: f64) -> (V3, V3) {
        let (p, v) = guidance::sample(&self.inner, t);
        (tup(&p), tup(&v))
    }

    /// Largest constraint violation of the solution, re-evaluated independently of the solver.
    fn max_violation(&self) -> f64 {
        guidance::audit_solution(&self.inner, &self.params).max_violation
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(json_err)
    }
}

/// Solve the guidance problem from `(p0, v0, thrust0)` to `(p_target, v_target)`.
/// `params_json` overrides fields of the default parameters.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
#[pyo3(signature = (p0, v0, thrust0, p_target, v_target=(0.0, 0.0, 0.0), phase="ascent", params_json=None))]
fn solve_guidance(
    py: Python<'_>,
    p0: V3,
    v0: V3,
    thrust0: V3,
    p_target: V3,
    v_target: V3,
    phase: &str,
    params_json: Option<&str>,
) -> PyResult<GuidanceSolution> {
    let mut params: GuidanceParams = match params_json {
        Some(t) => serde_json::from_str(t).map_err(json_err)?,
        None => GuidanceParams::default(),
    };
    params.phase = self::phase(phase)?;
    let start = GuidanceStart { p: v3(p0), v: v3(v0), thrust: v3(thrust0) };
    let target = GuidanceTarget { p: v3(p_target), v: v3(v_target) };
    let p = params.clone();
    let sol = py.detach(move || guidance::solve_guidance(start, target, &p)).map_err(err)?;
    Ok(GuidanceSolution { inner: sol, params })
}

/// Fitted thrust and torque maps of the counter-rotating propeller pair.
#[pyclass(module = "rocket_gnc_py")]
struct MotorMaps {
    inner: innerloop::MotorMaps,
}

#[pymethods]
impl MotorMaps {
    #[new]
    fn new() -> Self {
        Self { inner: innerloop::default_motor_maps() }
    }

    #[getter]
    fn thrust_coefficients(&self) -> Vec<f64> {
        self.inner.thrust.to_vec()
    }

    #[getter]
    fn torque_coefficients(&self) -> Vec<f64> {
        self.inner.torque.to_vec()
    }

    fn thrust_at(&self, dc1_us: f64, dc2_us: f64) -> f64 {
        self.inner.thrust_at(dc1_us, dc2_us)
    }

    fn torque_at(&self, dc1_us: f64, dc2_us: f64) -> f64 {
        self.inner.torque_at(dc1_us, dc2_us)
    }

    /// Duty cycles `(dc1, dc2)` producing the requested roll torque and thrust.
    fn motor_commands(&self, torque: f64, thrust: f64) -> PyResult<(f64, f64)> {
        self.inner.motor_commands(torque, thrust).map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(json_err)
    }
}

/// Least-squares fit of the cubic maps to `(dc1_us, dc2_us, thrust_n, torque_nm)` rows.
#[pyfunction]
fn fit_motor_maps(rows: Vec<(f64, f64, f64, f64)>) -> PyResult<MotorMaps> {
    let bench: Vec<BenchSample> = rows
        .into_iter()
        .map(|(dc1_us, dc2_us, thrust_n, torque_nm)| BenchSample { dc1_us, dc2_us, thrust_n, torque_nm })
        .collect();
    Ok(MotorMaps { inner: innerloop::fit_motor_maps(&bench).map_err(err)? })
}

/// Bench table from the simulated propeller pair with Gaussian measurement noise.
#[pyfunction]
#[pyo3(signature = (thrust_noise=0.0, torque_noise=0.0, seed=0))]
fn synthetic_bench(thrust_noise: f64, torque_noise: f64, seed: u64) -> Vec<(f64, f64, f64, f64)> {
    let cfg = BenchConfig { thrust_noise, torque_noise, ..Default::default() };
    harness::synthetic_bench(&SyntheticPropeller::default(), &cfg, seed)
        .into_iter()
        .map(|s| (s.dc1_us, s.dc2_us, s.thrust_n, s.torque_nm))
        .collect()
}

/// Map a body torque and axial thrust to `(phi1, phi2, dc1_us, dc2_us)` with the default
/// geometry and maps. `saturate` clips to the actuator limits instead of raising.
#[pyfunction]
#[pyo3(signature = (torque, thrust_x, r_g=0.3, saturate=false, maps=None))]
fn allocate(
    torque: V3,
    thrust_x: f64,
    r_g: f64,
    saturate: bool,
    maps: Option<PyRef<'_, MotorMaps>>,
) -> PyResult<(f64, f64, f64, f64)> {
    let maps = maps.map_or_else(innerloop::default_motor_maps, |m| m.inner.clone());
    let (geom, lim) = (GimbalGeometry::default(), AllocationLimits::default());
    let c = if saturate {
        innerloop::allocate_saturated(&v3(torque), thrust_x, &geom, &maps, r_g, &lim).map_err(err)?.command
    } else {
        innerloop::allocate(&v3(torque), thrust_x, &geom, &maps, r_g, &lim).map_err(err)?
    };
    Ok((c.phi1, c.phi2, c.dc1_us, c.dc2_us))
}

/// Voltage and thrust gain at time `t` for a pack drooping linearly from `v_start` to `v_end`
/// over `duration_s`.
#[pyfunction]
fn battery_model(t: f64, v_start: f64, v_end: f64, duration_s: f64) -> (f64, f64) {
    harness::battery_model(t, &BatteryProfile::linear_drop(v_start, v_end, duration_s))
}

/// Rotate `v` by the scalar-first quaternion `q` (normalised first).
#[pyfunction]
fn rotate(q: (f64, f64, f64, f64), v: V3) -> PyResult<V3> {
    let q = quatkin::UnitQuat::normalize(q.0, q.1, q.2, q.3).map_err(err)?;
    Ok(tup(&q.rotate(&v3(v))))
}

/// Propagate attitude `q` under constant body rate `omega` for `dt` seconds.
#[pyfunction]
fn quat_step(q: (f64, f64, f64, f64), omega: V3, dt: f64) -> PyResult<(f64, f64, f64, f64)> {
    let q = quatkin::UnitQuat::normalize(q.0, q.1, q.2, q.3).map_err(err)?;
    let n = quatkin::quat_step(&q, &v3(omega), dt).as_vector();
    Ok((n[0], n[1], n[2], n[3]))
}

#[pymodule]
fn rocket_gnc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Scenario>()?;
    m.add_class::<FlightLog>()?;
    m.add_class::<GuidanceSolution>()?;
    m.add_class::<MotorMaps>()?;
    m.add_function(wrap_pyfunction!(solve_guidance, m)?)?;
    m.add_function(wrap_pyfunction!(fit_motor_maps, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_bench, m)?)?;
    m.add_function(wrap_pyfunction!(allocate, m)?)?;
    m.add_function(wrap_pyfunction!(battery_model, m)?)?;
    m.add_function(wrap_pyfunction!(rotate, m)?)?;
    m.add_function(wrap_pyfunction!(quat_step, m)?)?;
    Ok(())
}
