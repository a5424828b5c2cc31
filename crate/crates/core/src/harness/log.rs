//! Flight log rows, events and file outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::guidance::{GuidanceSolution, GuidanceStart, GuidanceTarget, Phase};
use crate::nlpsolver::SolveStatus;
use crate::vehicle::{DistVec, StateVec};
use crate::{GncError, Result, Vec3};

/// One row per MPC tick.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub t: f64,
    pub leg: usize,
    pub phase: Phase,
    pub truth: StateVec,
    pub estimate: StateVec,
    pub w_hat: DistVec,
    pub p_sp: Vec3,
    pub v_sp: Vec3,
    pub u: Vec3,
    /// Scalar-first attitude set-point.
    pub q_sp: [f64; 4],
    pub thrust_x: f64,
    pub torque: Vec3,
    pub phi1: f64,
    pub phi2: f64,
    pub dc1_us: f64,
    pub dc2_us: f64,
    pub mpc_status: SolveStatus,
    pub mpc_iterations: usize,
    pub mpc_fallback: bool,
    /// Input polytope violation of `u`.
    pub u_violation: f64,
    pub voltage: f64,
    pub thrust_gain: f64,
    /// Attitude and rate ticks since the previous row.
    pub att_ticks: u32,
    pub rate_ticks: u32,
    /// Smallest covariance eigenvalue seen by the estimator since the previous row.
    pub min_cov_eig: f64,
    /// Largest quaternion norm error of plant or estimator since the previous row.
    pub quat_norm_err: f64,
    pub on_ground: bool,
}

const STATE_NAMES: [&str; 16] =
    ["p_x", "p_y", "p_z", "v_x", "v_y", "v_z", "q_w", "q_x", "q_y", "q_z", "w_x", "w_y", "w_z", "T_x", "T_y", "T_z"];
const DIST_NAMES: [&str; 9] = ["dv_x", "dv_y", "dv_z", "da_x", "da_y", "da_z", "dalpha_x", "dalpha_y", "dalpha_z"];

/// Column names of `flight.csv`, in order.
pub fn csv_header() -> Vec<String> {
    let mut h = vec!["t".to_string(), "leg".into(), "phase".into()];
    h.extend(STATE_NAMES.iter().map(|s| s.to_string()));
    h.extend(STATE_NAMES.iter().map(|s| format!("est_{s}")));
    h.extend(DIST_NAMES.iter().map(|s| format!("what_{s}")));
    for (name, n) in [("p_sp", 3), ("v_sp", 3), ("u", 3)] {
        h.extend(["x", "y", "z"].iter().take(n).map(|c| format!("{name}_{c}")));
    }
    h.extend(["qsp_w", "qsp_x", "qsp_y", "qsp_z", "thrust_x", "tau_x", "tau_y", "tau_z"].map(String::from));
    h.extend(
        [
            "phi1", "phi2", "dc1_us", "dc2_us", "mpc_status", "mpc_iter", "mpc_fallback", "u_violation", "voltage",
            "thrust_gain", "att_ticks", "rate_ticks", "min_cov_eig", "quat_norm_err", "on_ground",
        ]
        .map(String::from),
    );
    h
}

fn status_str(s: SolveStatus) -> &'static str {
    match s {
        SolveStatus::Converged => "converged",
        SolveStatus::MaxIterations => "max-iterations",
        SolveStatus::InfeasibleQp => "infeasible-qp",
        SolveStatus::NumericalFailure => "numerical-failure",
    }
}

fn parse_status(s: &str) -> Result<SolveStatus> {
    Ok(match s {
        "converged" => SolveStatus::Converged,
        "max-iterations" => SolveStatus::MaxIterations,
        "infeasible-qp" => SolveStatus::InfeasibleQp,
        "numerical-failure" => SolveStatus::NumericalFailure,
        other => return Err(GncError::Config(format!("unknown solver status {other:?}"))),
    })
}

fn phase_str(p: Phase) -> &'static str {
    match p {
        Phase::Ascent => "ascent",
        Phase::Descent => "descent",
    }
}

impl LogRow {
    pub fn to_record(&self) -> Vec<String> {
        let f = |v: f64| format!("{v:e}");
        let mut r = vec![f(self.t), self.leg.to_string(), phase_str(self.phase).into()];
        r.extend(self.truth.iter().map(|&v| f(v)));
        r.extend(self.estimate.iter().map(|&v| f(v)));
        r.extend(self.w_hat.iter().map(|&v| f(v)));
        for v in [&self.p_sp, &self.v_sp, &self.u] {
            r.extend(v.iter().map(|&x| f(x)));
        }
        r.extend(self.q_sp.iter().map(|&v| f(v)));
        r.push(f(self.thrust_x));
        r.extend(self.torque.iter().map(|&v| f(v)));
        r.extend([self.phi1, self.phi2, self.dc1_us, self.dc2_us].map(f));
        r.push(status_str(self.mpc_status).into());
        r.push(self.mpc_iterations.to_string());
        r.push((self.mpc_fallback as u8).to_string());
        r.extend([self.u_violation, self.voltage, self.thrust_gain].map(f));
        r.push(self.att_ticks.to_string());
        r.push(self.rate_ticks.to_string());
        r.extend([self.min_cov_eig, self.quat_norm_err].map(f));
        r.push((self.on_ground as u8).to_string());
        r
    }

    pub fn from_record(rec: &csv::StringRecord) -> Result<Self> {
        let fields: Vec<&str> = rec.iter().collect();
        let mut pos = 0usize;
        let mut next = || -> Result<&str> {
            let f = fields.get(pos).copied().ok_or_else(|| GncError::Config("short flight.csv row".into()));
            pos += 1;
            f
        };
        let num = |s: &str| s.trim().parse::<f64>().map_err(|e| GncError::Config(format!("bad number {s:?}: {e}")));
        let int = |s: &str| s.trim().parse::<u64>().map_err(|e| GncError::Config(format!("bad integer {s:?}: {e}")));
        let t = num(next()?)?;
        let leg = int(next()?)? as usize;
        let phase = match next()? {
            "ascent" => Phase::Ascent,
            "descent" => Phase::Descent,
            other => return Err(GncError::Config(format!("unknown phase {other:?}"))),
        };
        let mut truth = StateVec::zeros();
        for v in truth.iter_mut() {
            *v = num(next()?)?;
        }
        let mut estimate = StateVec::zeros();
        for v in estimate.iter_mut() {
            *v = num(next()?)?;
        }
        let mut w_hat = DistVec::zeros();
        for v in w_hat.iter_mut() {
            *v = num(next()?)?;
        }
        let p_sp = Vec3::new(num(next()?)?, num(next()?)?, num(next()?)?);
        let v_sp = Vec3::new(num(next()?)?, num(next()?)?, num(next()?)?);
        let u = Vec3::new(num(next()?)?, num(next()?)?, num(next()?)?);
        let q_sp = [num(next()?)?, num(next()?)?, num(next()?)?, num(next()?)?];
        let thrust_x = num(next()?)?;
        let torque = Vec3::new(num(next()?)?, num(next()?)?, num(next()?)?);
        let (phi1, phi2, dc1_us, dc2_us) = (num(next()?)?, num(next()?)?, num(next()?)?, num(next()?)?);
        let mpc_status = parse_status(next()?)?;
        let mpc_iterations = int(next()?)? as usize;
        let mpc_fallback = int(next()?)? != 0;
        let (u_violation, voltage, thrust_gain) = (num(next()?)?, num(next()?)?, num(next()?)?);
        let att_ticks = int(next()?)? as u32;
        let rate_ticks = int(next()?)? as u32;
        let (min_cov_eig, quat_norm_err) = (num(next()?)?, num(next()?)?);
        let on_ground = int(next()?)? != 0;
        Ok(Self {
            t,
            leg,
            phase,
            truth,
            estimate,
            w_hat,
            p_sp,
            v_sp,
            u,
            q_sp,
            thrust_x,
            torque,
            phi1,
            phi2,
            dc1_us,
            dc2_us,
            mpc_status,
            mpc_iterations,
            mpc_fallback,
            u_violation,
            voltage,
            thrust_gain,
            att_ticks,
            rate_ticks,
            min_cov_eig,
            quat_norm_err,
            on_ground,
        })
    }

    pub fn position(&self) -> Vec3 {
        self.truth.fixed_rows::<3>(0).into()
    }

    pub fn velocity(&self) -> Vec3 {
        self.truth.fixed_rows::<3>(3).into()
    }
}

/// Mission events, serialised to `events.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Event {
    LegStarted {
        t: f64,
        leg: usize,
        target: Vec3,
    },
    GuidanceRequested {
        t: f64,
        leg: usize,
        reason: String,
        start: GuidanceStart,
        target: GuidanceTarget,
        phase: Phase,
    },
    /// A solve went live; the trajectory's time origin is `t_request`.
    Guidance {
        t: f64,
        t_request: f64,
        leg: usize,
        reason: String,
        status: SolveStatus,
        iterations: usize,
        wall_time_s: f64,
        t_f: f64,
        solution: Box<GuidanceSolution>,
    },
    GuidanceFailed {
        t: f64,
        t_request: f64,
        leg: usize,
        reason: String,
        error: String,
        wall_time_s: f64,
    },
    Touchdown {
        t: f64,
        p: Vec3,
        v: Vec3,
        error: f64,
    },
    Abort {
        t: f64,
        cause: String,
    },
}

impl Event {
    pub fn time(&self) -> f64 {
        match self {
            Event::LegStarted { t, .. }
            | Event::GuidanceRequested { t, .. }
            | Event::Guidance { t, .. }
            | Event::GuidanceFailed { t, .. }
            | Event::Touchdown { t, .. }
            | Event::Abort { t, .. } => *t,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    /// Final objective reached: touchdown for a descent leg, arrival otherwise.
    pub completed: bool,
    pub touchdown_error: Option<f64>,
    pub final_error: f64,
    pub aborted: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct FlightLog {
    pub scenario: String,
    pub rows: Vec<LogRow>,
    pub events: Vec<Event>,
    /// MPC wall time per row, s. Kept out of `flight.csv` so that file is reproducible.
    pub mpc_wall_s: Vec<f64>,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub scenario: String,
    pub rows: usize,
    pub sim_time_s: f64,
    pub outcome: Outcome,
    pub max_speed: f64,
    pub guidance_solves: usize,
    pub guidance_failures: usize,
    pub guidance_mean_ms: f64,
    pub mpc_mean_ms: f64,
    pub mpc_max_ms: f64,
    pub mpc_fallbacks: usize,
    pub max_u_violation: f64,
    pub min_cov_eig: f64,
    pub max_quat_norm_err: f64,
}

impl FlightLog {
    pub fn guidance_solutions(&self) -> impl Iterator<Item = (&GuidanceSolution, f64)> {
        self.events.iter().filter_map(|e| match e {
            Event::Guidance { solution, wall_time_s, .. } => Some((solution.as_ref(), *wall_time_s)),
            _ => None,
        })
    }

    pub fn summary(&self) -> Summary {
        let solves: Vec<f64> = self.guidance_solutions().map(|(_, w)| w).collect();
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        Summary {
            scenario: self.scenario.clone(),
            rows: self.rows.len(),
            sim_time_s: self.rows.last().map_or(0.0, |r| r.t),
            outcome: self.outcome.clone(),
            max_speed: self.rows.iter().map(|r| r.velocity().norm()).fold(0.0, f64::max),
            guidance_solves: solves.len(),
            guidance_failures: self.events.iter().filter(|e| matches!(e, Event::GuidanceFailed { .. })).count(),
            guidance_mean_ms: 1e3 * mean(&solves),
            mpc_mean_ms: 1e3 * mean(&self.mpc_wall_s),
            mpc_max_ms: 1e3 * self.mpc_wall_s.iter().copied().fold(0.0, f64::max),
            mpc_fallbacks: self.rows.iter().filter(|r| r.mpc_fallback).count(),
            max_u_violation: self.rows.iter().map(|r| r.u_violation).fold(0.0, f64::max),
            min_cov_eig: self.rows.iter().map(|r| r.min_cov_eig).fold(f64::INFINITY, f64::min),
            max_quat_norm_err: self.rows.iter().map(|r| r.quat_norm_err).fold(0.0, f64::max),
        }
    }

    pub fn csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(csv_header())?;
        for r in &self.rows {
            w.write_record(r.to_record())?;
        }
        let bytes = w.into_inner().map_err(|e| GncError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Write `flight.csv`, `events.json`, `timing.csv`, `summary.json` and `trajectory.svg`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("flight.csv"), self.csv_string()?)?;
        fs::write(dir.join("events.json"), serde_json::to_string_pretty(&self.events)?)?;
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&self.summary())?)?;
        let mut timing = String::from("t,mpc_wall_s\n");
        for (r, w) in self.rows.iter().zip(&self.mpc_wall_s) {
            let _ = writeln!(timing, "{:e},{:e}", r.t, w);
        }
        fs::write(dir.join("timing.csv"), timing)?;
        fs::write(dir.join("trajectory.svg"), trajectory_svg(self))?;
        Ok(())
    }
}

/// Read rows back from a `flight.csv`.
pub fn read_csv(path: &Path) -> Result<Vec<LogRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    if header != csv_header() {
        return Err(GncError::Config(format!("{} does not have the flight log columns", path.display())));
    }
    rdr.records().map(|r| LogRow::from_record(&r?)).collect()
}

/// Altitude over time and the ground-track projection, truth against plan.
pub fn trajectory_svg(log: &FlightLog) -> String {
    let (w, h, pad) = (900.0, 380.0, 40.0);
    let panel_w = (w - 3.0 * pad) / 2.0;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let mut plans: Vec<Vec<(f64, f64)>> = vec![];
    for e in &log.events {
        if let Event::Guidance { t_request, solution, .. } = e {
            let n = solution.knots.len().max(2) - 1;
            plans.push(
                solution
                    .knots
                    .iter()
                    .enumerate()
                    .map(|(k, kn)| (t_request + solution.t_f * k as f64 / n as f64, kn.p.x))
                    .collect(),
            );
        }
    }
    let truth: Vec<(f64, f64, f64)> = log.rows.iter().map(|r| (r.t, r.truth[0], r.truth[1])).collect();
    let truth_gt: Vec<(f64, f64)> = log.rows.iter().map(|r| (r.truth[1], r.truth[2])).collect();
    let bounds = |pts: &mut dyn Iterator<Item = (f64, f64)>| {
        let mut b = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for (x, y) in pts {
            b = (b.0.min(x), b.1.max(x), b.2.min(y), b.3.max(y));
        }
        if !b.0.is_finite() {
            b = (0.0, 1.0, 0.0, 1.0);
        }
        (b.0, b.1.max(b.0 + 1e-6), b.2.min(0.0), b.3.max(b.2 + 1e-6))
    };
    let panel = |s: &mut String, x0: f64, title: &str, xl: &str, yl: &str, series: &[(Vec<(f64, f64)>, &str, bool)]| {
        let b = bounds(&mut series.iter().flat_map(|(p, _, _)| p.iter().copied()));
        let sx = |x: f64| x0 + (x - b.0) / (b.1 - b.0) * panel_w;
        let sy = |y: f64| h - pad - (y - b.2) / (b.3 - b.2) * (h - 2.0 * pad);
        let _ = writeln!(s, r##"<rect x="{x0}" y="{pad}" width="{panel_w}" height="{}" fill="none" stroke="#888"/>"##, h - 2.0 * pad);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{title}</text>"#, x0 + panel_w / 2.0, pad - 12.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{xl} [{:.1}, {:.1}]</text>"#, x0 + panel_w / 2.0, h - 10.0, b.0, b.1);
        let _ = writeln!(s, r#"<text x="{}" y="{}" transform="rotate(-90 {} {})" text-anchor="middle">{yl} [{:.1}, {:.1}]</text>"#,
            x0 - 10.0, h / 2.0, x0 - 10.0, h / 2.0, b.2, b.3);
        for (pts, color, dashed) in series {
            if pts.is_empty() {
                continue;
            }
            let d: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            let dash = if *dashed { r#" stroke-dasharray="6 4""# } else { "" };
            let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>"#, d.join(" "));
        }
    };
    let mut alt: Vec<(Vec<(f64, f64)>, &str, bool)> = vec![(truth.iter().map(|p| (p.0, p.1)).collect(), "#1f4e9c", false)];
    let mut gt: Vec<(Vec<(f64, f64)>, &str, bool)> = vec![(truth_gt, "#1f4e9c", false)];
    for plan in &plans {
        alt.push((plan.clone(), "#d2691e", true));
    }
    for e in &log.events {
        if let Event::Guidance { solution, .. } = e {
            gt.push((solution.knots.iter().map(|k| (k.p.y, k.p.z)).collect(), "#d2691e", true));
        }
    }
    panel(&mut s, pad, "altitude", "t [s]", "altitude [m]", &alt);
    panel(&mut s, 2.0 * pad + panel_w, "ground track", "y [m]", "z [m]", &gt);
    s.push_str("</svg>\n");
    s
}
