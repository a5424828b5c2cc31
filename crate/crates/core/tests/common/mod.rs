//! Oracles shared by the integration suites, written against the geometry and formulas
//! rather than the library code paths.
#![allow(dead_code)]

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rocket_gnc::guidance::{GuidanceParams, GuidanceStart, GuidanceTarget, Phase};
use rocket_gnc::innerloop::{GimbalGeometry, MotorMaps};
use rocket_gnc::Vec3;

pub const R_G: f64 = 0.3;

pub fn cubic(c: &[f64; 10], dc1: f64, dc2: f64) -> f64 {
    let x = dc1 / 500.0 - 3.0;
    let y = dc2 / 500.0 - 3.0;
    let terms = [1.0, x, y, x.powi(2), x * y, y.powi(2), x.powi(3), x.powi(2) * y, x * y.powi(2), y.powi(3)];
    c.iter().zip(terms).map(|(a, b)| a * b).sum()
}

fn root(f: impl Fn(f64) -> f64) -> f64 {
    let (mut lo, mut hi) = (-0.5, 0.5);
    let s = f(lo).signum();
    assert!(s != f(hi).signum());
    for _ in 0..100 {
        let m = 0.5 * (lo + hi);
        if f(m).signum() == s {
            lo = m
        } else {
            hi = m
        }
    }
    0.5 * (lo + hi)
}

/// Rod-length residual of one linkage.
pub fn rod(g: &GimbalGeometry, u: f64, v: f64, w: f64) -> f64 {
    u * u + v * v + w * w - g.b * g.b
}

pub fn servo1_residual(g: &GimbalGeometry, phi1: f64, th1: f64) -> f64 {
    rod(g, g.e - g.a * phi1.sin() + g.c * th1.sin(), g.d - g.c * th1.cos() + g.a * phi1.cos(), 0.0)
}

pub fn servo2_residual(g: &GimbalGeometry, phi2: f64, th1: f64, th2: f64) -> f64 {
    rod(
        g,
        g.e - g.a * phi2.sin() + g.c * th1.cos() * th2.sin(),
        g.d - g.c * th2.cos() + g.a * phi2.cos(),
        g.c * th2.sin() * th1.sin(),
    )
}

/// Servo angles, duty cycles → body torque and axial thrust.
pub fn forward(g: &GimbalGeometry, maps: &MotorMaps, phi1: f64, phi2: f64, dc1: f64, dc2: f64) -> (Vec3, f64) {
    let th1 = root(|t| servo1_residual(g, phi1, t));
    let th2 = root(|t| servo2_residual(g, phi2, th1, t));
    // rotate e1 about z by θ2, then about y by θ1
    let n = nalgebra::Rotation3::from_euler_angles(0.0, th1, 0.0) * nalgebra::Rotation3::from_euler_angles(0.0, 0.0, th2) * Vec3::x();
    let t = n * cubic(&maps.thrust, dc1, dc2);
    let moment = t.cross(&Vec3::new(R_G, 0.0, 0.0));
    (Vec3::new(cubic(&maps.torque, dc1, dc2), moment.y, moment.z), t.x)
}

pub fn hover_thrust(params: &GuidanceParams) -> Vector3<f64> {
    Vector3::new(params.mass * params.gravity, 0.0, 0.0)
}

/// Seeded guidance instance: even seeds climb, odd seeds descend, both inside the glide cone.
pub fn guidance_instance(seed: u64) -> (GuidanceStart, GuidanceTarget, GuidanceParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = GuidanceParams::default();
    let tan = params.tan_glide();
    if seed.is_multiple_of(2) {
        params.phase = Phase::Ascent;
        let p0 = Vector3::new(0.0, rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let alt = rng.random_range(3.0..12.0);
        let lat = rng.random_range(0.0..0.5 * alt * tan);
        let ang: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let pf = p0 + Vector3::new(alt, lat * ang.cos(), lat * ang.sin());
        let start = GuidanceStart { p: p0, v: Vector3::zeros(), thrust: hover_thrust(&params) };
        (start, GuidanceTarget { p: pf, v: Vector3::zeros() }, params)
    } else {
        params.phase = Phase::Descent;
        let pf = Vector3::new(0.0, rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let alt = rng.random_range(4.0..12.0);
        let lat = rng.random_range(0.0..0.8 * alt * tan);
        let ang: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let p0 = pf + Vector3::new(alt, lat * ang.cos(), lat * ang.sin());
        let start = GuidanceStart { p: p0, v: Vector3::zeros(), thrust: hover_thrust(&params) };
        (start, GuidanceTarget { p: pf, v: Vector3::zeros() }, params)
    }
}
