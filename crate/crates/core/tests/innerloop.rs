mod common;

use common::{forward, R_G};
use proptest::prelude::*;
use rocket_gnc::innerloop::{allocate, default_motor_maps, AllocationLimits, GimbalGeometry};

#[test]
fn allocation_round_trip_thousand_cases() {
    use rand::{Rng, SeedableRng};
    let g = GimbalGeometry::default();
    let maps = default_motor_maps();
    let lim = AllocationLimits::default();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        // draw a reachable actuator state, push it forward, then allocate the result
        let (t1, t2) = (rng.random_range(-0.24..0.24), rng.random_range(-0.24..0.24));
        let (p1, p2) = g.servo_angles(t1, t2).unwrap();
        let (d1, d2) = (rng.random_range(1150.0..1850.0), rng.random_range(1150.0..1850.0));
        let (tau, tx) = forward(&g, &maps, p1, p2, d1, d2);
        let cmd = allocate(&tau, tx, &g, &maps, R_G, &lim).unwrap();
        let (tau2, tx2) = forward(&g, &maps, cmd.phi1, cmd.phi2, cmd.dc1_us, cmd.dc2_us);
        worst = worst.max((tau2 - tau).amax()).max((tx2 - tx).abs());
    }
    assert!(worst <= 1e-6, "worst round-trip error {worst:e}");
}

proptest! {
    #[test]
    fn symmetric_map_equal_commands(thrust in 4.0f64..20.0) {
        let maps = default_motor_maps();
        let (a, b) = maps.motor_commands(0.0, thrust).unwrap();
        prop_assert!((a - b).abs() < 1e-6);
        prop_assert!((maps.thrust_at(a, b) - thrust).abs() <= 1e-6);
    }

    #[test]
    fn servo_branch_is_neutral_continuous(t1 in -0.26f64..0.26, t2 in -0.26f64..0.26) {
        let g = GimbalGeometry::default();
        let (p1, p2) = g.servo_angles(t1, t2).unwrap();
        let (q1, q2) = g.servo_angles(t1 + 1e-6, t2 - 1e-6).unwrap();
        prop_assert!((p1 - q1).abs() < 1e-4 && (p2 - q2).abs() < 1e-4);
        prop_assert!(p1.abs() < 1.0 && p2.abs() < 1.0);
    }
}
