use rocket_gnc::harness::{
    battery_model, check_flight, csv_header, read_csv, run_mission, BatteryProfile, Event, FlightLog, Scenario,
};
use rocket_gnc::Vec3;

#[test]
fn zero_noise_hover_holds_within_a_centimetre() {
    let p = Vec3::new(1.5, 0.0, 0.0);
    let log = run_mission(&Scenario::hover(p, 30.0)).unwrap();
    assert_eq!(log.rows.len(), 751);
    let worst = log.rows.iter().map(|r| (r.position() - p).norm()).fold(0.0, f64::max);
    assert!(worst <= 0.01, "hover drift {worst}");
    assert!(log.rows.iter().all(|r| !r.mpc_fallback));
}

#[test]
fn logging_rate_and_tick_counts() {
    let sc = Scenario::hover(Vec3::new(1.0, 0.0, 0.0), 30.0);
    let log = run_mission(&sc).unwrap();
    let n = log.rows.len() as i64;
    assert!((n - 750).abs() <= 1, "{n} rows");
    for r in &log.rows[1..] {
        assert_eq!((r.att_ticks, r.rate_ticks), (10, 40), "t = {}", r.t);
    }
    let rep = check_flight(&log.rows, Some(&log.events), &sc);
    assert!(rep.passed(), "{:#?}", rep.items);
}

#[test]
fn runs_are_deterministic_and_sync_matches_async() {
    let mut sc = Scenario::outdoor(7);
    sc.duration_s = 6.0;
    let a = run_mission(&sc).unwrap().csv_string().unwrap();
    let b = run_mission(&sc).unwrap().csv_string().unwrap();
    assert!(a == b, "repeat runs differ");
    sc.sync_guidance = true;
    let c = run_mission(&sc).unwrap().csv_string().unwrap();
    assert!(a == c, "synchronous guidance differs from the worker thread");
}

#[test]
fn single_pre_takeoff_solve_and_audit() {
    let mut sc = Scenario::outdoor(3);
    sc.duration_s = 8.0;
    let log = run_mission(&sc).unwrap();
    let pre: Vec<&Event> =
        log.events.iter().filter(|e| matches!(e, Event::Guidance { reason, .. } if reason == "pre-takeoff")).collect();
    assert_eq!(pre.len(), 1);
    let rep = check_flight(&log.rows, Some(&log.events), &sc);
    assert!(rep.passed(), "{:#?}", rep.items);
}

#[test]
fn empty_log_writes_header_only() {
    let log = FlightLog::default();
    let text = log.csv_string().unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1);
    assert_eq!(lines[0].split(',').count(), csv_header().len());
}

#[test]
fn artifacts_round_trip() {
    let sc = Scenario::hover(Vec3::new(1.0, 0.0, 0.0), 2.0);
    let log = run_mission(&sc).unwrap();
    let dir = std::env::temp_dir().join(format!("gnc-harness-{}", std::process::id()));
    log.write(&dir).unwrap();
    for f in ["flight.csv", "events.json", "summary.json", "timing.csv", "trajectory.svg"] {
        assert!(dir.join(f).exists(), "{f} missing");
    }
    let rows = read_csv(&dir.join("flight.csv")).unwrap();
    assert_eq!(rows.len(), log.rows.len());
    for (a, b) in rows.iter().zip(&log.rows) {
        assert_eq!(a.truth, b.truth);
        assert_eq!(a.w_hat, b.w_hat);
        assert_eq!(a.mpc_status, b.mpc_status);
    }
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn battery_model_examples() {
    assert_eq!(battery_model(5.0, &BatteryProfile::default()), (14.8, 1.0));
    let drop = BatteryProfile::linear_drop(14.8, 14.5, 60.0);
    let (v, g) = battery_model(60.0, &drop);
    assert_eq!(v, 14.5);
    assert!((g - 0.98).abs() < 1e-3);
}

#[test]
fn bad_scenarios_are_rejected() {
    let mut sc = Scenario::hover(Vec3::new(1.0, 0.0, 0.0), 1.0);
    sc.rates.mpc_hz = 30;
    assert!(run_mission(&sc).is_err());
    assert!(Scenario::from_json("{\"duration_s\": -1}").is_err());
    assert!(Scenario::from_json("{\"no_such_field\": 1}").is_err());
}
