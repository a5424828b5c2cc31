//! Constraint audit of a guidance trajectory, written against the knot record only.

use serde::Serialize;

use super::{GuidanceParams, GuidanceSolution, Phase};
use crate::Vec3;

#[derive(Debug, Clone, Default, Serialize)]
pub struct AuditReport {
    pub max_violation: f64,
    /// Worst violation per constraint family.
    pub families: Vec<(String, f64)>,
}

impl AuditReport {
    fn record(&mut self, family: &str, violation: f64) {
        let v = violation.max(0.0);
        match self.families.iter_mut().find(|(n, _)| n == family) {
            Some((_, w)) => *w = w.max(v),
            None => self.families.push((family.to_string(), v)),
        }
        self.max_violation = self.max_violation.max(v);
    }

    pub fn worst(&self, family: &str) -> f64 {
        self.families.iter().find(|(n, _)| n == family).map_or(0.0, |(_, w)| *w)
    }
}

/// Evaluate every constraint of the transcription on a solution with exact norms.
pub fn audit_solution(sol: &GuidanceSolution, params: &GuidanceParams) -> AuditReport {
    let mut r = AuditReport::default();
    let knots = &sol.knots;
    let n = knots.len();
    if n < 2 || !sol.t_f.is_finite() {
        r.record("structure", f64::INFINITY);
        return r;
    }
    let h = sol.t_f / (n - 1) as f64;
    let g = Vec3::new(-params.gravity, 0.0, 0.0);

    r.record("t_f", params.t_f_min - sol.t_f);
    r.record("t_f", sol.t_f - params.t_f_max);

    let k0 = &knots[0];
    let init = (k0.p - sol.start.p).amax().max((k0.v - sol.start.v).amax()).max((k0.thrust - sol.start.thrust).amax());
    r.record("initial", init);

    for w in knots.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let ep = b.p - (a.p + a.v * h);
        let ev = b.v - (a.v + (a.thrust / params.mass + g) * h);
        let et = b.thrust - (a.thrust + a.thrust_rate * h);
        r.record("dynamics", ep.amax().max(ev.amax()).max(et.amax()));
    }

    let tan_g = params.glide_slope_deg.to_radians().tan();
    let cos_t = params.tilt_max_deg.to_radians().cos();
    let last = &knots[n - 1];
    for (k, kn) in knots.iter().enumerate() {
        let anchor = match params.phase {
            Phase::Ascent if k > 0 => Some(sol.start.p),
            Phase::Descent if k + 1 < n => Some(last.p),
            _ => None,
        };
        if let Some(anchor) = anchor {
            let d = kn.p - anchor;
            r.record("glide-slope", tan_g * d.y.hypot(d.z) - d.x);
        }
        r.record("slack", -kn.slack);
        r.record("speed", kn.v.norm() - params.v_max - kn.slack);
        let t = kn.thrust.norm();
        r.record("thrust-max", t - params.thrust_max);
        r.record("thrust-min", params.thrust_min - t);
        r.record("tilt", cos_t * t - kn.thrust.x);
        let rate = kn.thrust_rate.norm();
        r.record("thrust-rate", rate - params.thrust_rate_max);
        if params.thrust_rate_min > 0.0 {
            r.record("thrust-rate", params.thrust_rate_min - rate);
        }
    }
    r.record("terminal-position", (last.p - sol.target.p).norm() - params.p_tol);
    r.record("terminal-velocity", (last.v - sol.target.v).norm() - params.v_tol);
    r
}
