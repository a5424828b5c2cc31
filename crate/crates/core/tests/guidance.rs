mod common;

use common::{guidance_instance as instance, hover_thrust};
use nalgebra::Vector3;
use rocket_gnc::guidance::{audit_solution, solve_guidance, GuidanceParams, GuidanceStart, GuidanceTarget, Phase};

#[test]
fn outdoor_descent_leg() {
    let params = GuidanceParams { phase: Phase::Descent, ..Default::default() };
    let start = GuidanceStart { p: Vector3::new(10.0, 0.0, 0.0), v: Vector3::zeros(), thrust: hover_thrust(&params) };
    let target = GuidanceTarget { p: Vector3::new(0.0, 5.0, 0.0), v: Vector3::zeros() };
    let sol = solve_guidance(start, target, &params).unwrap();
    let audit = audit_solution(&sol, &params);
    assert!(audit.max_violation <= 1e-6, "{audit:?}");
    assert!(sol.t_f > 0.0);
}

#[test]
fn seeded_instances_pass_audit() {
    let mut converged = 0;
    for seed in 0..20 {
        let (start, target, params) = instance(seed);
        match solve_guidance(start, target, &params) {
            Ok(sol) => {
                converged += 1;
                eprintln!("seed {seed}: t_f {:.2} iters {} wall {:.3}s", sol.t_f, sol.report.iterations, sol.report.wall_time_s);
                let audit = audit_solution(&sol, &params);
                assert!(audit.max_violation <= 1e-6, "seed {seed}: {audit:?}");
                assert!(sol.t_f > 0.0);
            }
            Err(e) => eprintln!("seed {seed}: {e}"),
        }
    }
    assert!(converged >= 18, "{converged}/20");
}

#[test]
fn slack_weight_increase_never_adds_slack() {
    for seed in 0..5u64 {
        let (start, target, mut params) = instance(100 + seed);
        // tight speed limit so the slack is exercised
        params.v_max = 1.0;
        let base = solve_guidance(start, target, &params).unwrap();
        params.lambda_slack *= 100.0;
        let heavy = solve_guidance(start, target, &params).unwrap();
        let sum = |s: &rocket_gnc::guidance::GuidanceSolution| s.knots.iter().map(|k| k.slack * k.slack).sum::<f64>();
        eprintln!("seed {seed}: {:e} -> {:e}", sum(&base), sum(&heavy));
        assert!(sum(&heavy) <= sum(&base) + 1e-8, "seed {seed}: {} > {}", sum(&heavy), sum(&base));
    }
}

#[test]
fn euler_resimulation_reproduces_knots() {
    let (start, target, params) = instance(3);
    let sol = solve_guidance(start, target, &params).unwrap();
    let h = sol.t_f / (sol.knots.len() - 1) as f64;
    let g = Vector3::new(-params.gravity, 0.0, 0.0);
    let (mut p, mut v, mut t) = (start.p, start.v, start.thrust);
    for (k, knot) in sol.knots.iter().enumerate() {
        let scale = 1.0 + p.norm() + v.norm() + t.norm();
        assert!((p - knot.p).norm() <= 1e-6 * scale, "knot {k}");
        assert!((v - knot.v).norm() <= 1e-6 * scale, "knot {k}");
        assert!((t - knot.thrust).norm() <= 1e-6 * scale, "knot {k}");
        let (pn, vn, tn) = (p + v * h, v + (t / params.mass + g) * h, t + knot.thrust_rate * h);
        p = pn;
        v = vn;
        t = tn;
    }
}

/// Distances scaled by s with gravity fixed: time scales by √s, speeds by √s, thrust is
/// unchanged, thrust rates by 1/√s. Weights are rescaled so the cost scales uniformly.
#[test]
fn dimensional_time_scaling() {
    let (start, target, params) = instance(7);
    let s: f64 = 2.0;
    let r = s.sqrt();
    let mut scaled = params.clone();
    scaled.v_max *= r;
    scaled.t_f_min *= r;
    scaled.t_f_max *= r;
    scaled.thrust_rate_max /= r;
    scaled.thrust_rate_min /= r;
    scaled.lambda_rate *= s;
    scaled.lambda_slack /= s;
    scaled.p_tol *= s;
    scaled.v_tol *= r;
    let base = solve_guidance(start, target, &params).unwrap();
    let start2 = GuidanceStart { p: start.p * s, v: start.v * r, thrust: start.thrust };
    let target2 = GuidanceTarget { p: target.p * s, v: target.v * r };
    let big = solve_guidance(start2, target2, &scaled).unwrap();
    assert!((big.t_f / r - base.t_f).abs() < 1e-3 * base.t_f, "{} vs {}", big.t_f / r, base.t_f);
    for (a, b) in base.knots.iter().zip(&big.knots) {
        assert!((b.p / s - a.p).norm() < 1e-3 * (1.0 + a.p.norm()));
    }
}
