//! Closed-loop mission simulation on a simulated clock.

use std::thread::JoinHandle;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::log::{Event, FlightLog, LogRow, Outcome};
use super::plant::{gyro, measure, quat_norm_error, world_thrust, Plant};
use super::scenario::{battery_model, BenchConfig, LegMode, Scenario};
use crate::estimator::Estimator;
use crate::guidance::{
    replan_needed, sample, solve_guidance, GuidanceParams, GuidanceSolution, GuidanceStart, GuidanceTarget, Phase,
    ReplanReason,
};
use crate::innerloop::{fit_motor_maps, thrust_direction, ActuatorCommand, InnerLoop, MotorMaps, SyntheticPropeller};
use crate::mpc::{MpcController, Reference};
use crate::nlpsolver::SolveStatus;
use crate::vehicle::{ControlInput, VehicleState, IDX_W};
use crate::{GncError, Result, Vec3, E1};

/// Synthetic load-cell table from the truth propeller, with seeded measurement noise.
pub fn synthetic_bench(prop: &SyntheticPropeller, bench: &BenchConfig, seed: u64) -> Vec<crate::innerloop::BenchSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = prop.bench(bench.dc_min, bench.dc_max, bench.step_us);
    if bench.thrust_noise > 0.0 || bench.torque_noise > 0.0 {
        let nt = Normal::new(0.0, bench.thrust_noise).expect("finite noise");
        let nq = Normal::new(0.0, bench.torque_noise).expect("finite noise");
        for s in &mut table {
            s.thrust_n += nt.sample(&mut rng);
            s.torque_nm += nq.sample(&mut rng);
        }
    }
    table
}

enum Solve {
    Ready(Result<GuidanceSolution>, f64),
    Worker(JoinHandle<(Result<GuidanceSolution>, f64)>),
}

struct Pending {
    t_request: f64,
    apply_tick: u64,
    reason: ReplanReason,
    leg: usize,
    solve: Solve,
}

struct ActiveTrajectory {
    solution: GuidanceSolution,
    t0: f64,
    leg: usize,
}

/// Project an estimated world thrust into the guidance thrust and tilt bounds.
fn admissible_thrust(thrust: &Vec3, params: &GuidanceParams) -> Vec3 {
    let margin = 1e-3;
    let mag = thrust.norm().clamp(params.thrust_min + margin, params.thrust_max - margin);
    let dir = if thrust.norm() > 1e-9 { thrust / thrust.norm() } else { E1 };
    let max_tilt = params.tilt_max_deg.to_radians() * 0.999;
    let tilt = dir.x.clamp(-1.0, 1.0).acos();
    let dir = if tilt > max_tilt {
        let lateral = Vec3::new(0.0, dir.y, dir.z);
        let l = lateral.norm();
        let lat = if l > 1e-12 { lateral / l } else { Vec3::y() };
        E1 * max_tilt.cos() + lat * max_tilt.sin()
    } else {
        dir
    };
    dir * mag
}

fn solve_request(start: GuidanceStart, target: GuidanceTarget, params: GuidanceParams) -> (Result<GuidanceSolution>, f64) {
    let clock = Instant::now();
    let r = solve_guidance(start, target, &params);
    (r, clock.elapsed().as_secs_f64())
}

/// Run a scenario to touchdown, abort or its duration.
pub fn run_mission(scenario: &Scenario) -> Result<FlightLog> {
    scenario.validate()?;
    let sc = scenario;
    let params = sc.vehicle.clone();
    let mc = sc.mission_config;
    let rates = sc.rates;
    let dt = 1.0 / rates.physics_hz as f64;
    let div_rate = rates.divider(rates.rate_hz);
    let div_att = rates.divider(rates.attitude_hz);
    let div_est = rates.divider(rates.estimator_hz);
    let div_dist = rates.divider(rates.disturbance_hz);
    let div_mpc = rates.divider(rates.mpc_hz);
    let dt_rate = div_rate as f64 * dt;
    let dt_est = div_est as f64 * dt;
    let dt_dist = div_dist as f64 * dt;
    let dt_mpc = div_mpc as f64 * dt;

    let bench = synthetic_bench(&sc.propeller, &sc.bench, sc.seed.wrapping_add(0x5eed));
    let maps: MotorMaps = fit_motor_maps(&bench)?;
    let x0 = sc.initial.to_state(&params)?;
    let mut plant = Plant::new(&x0, params.clone(), sc.innerloop.geometry, sc.propeller, sc.mismatch.clone());
    let mut estimator = Estimator::new(x0, params.clone(), sc.matched_estimator());
    let mut mpc = MpcController::new(sc.mpc.clone(), params.clone())?;
    let mut inner = InnerLoop::new(sc.innerloop)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);

    let hover = params.mass * params.gravity_magnitude();
    let first = inner.allocate(&Vec3::zeros(), hover, &maps, params.r_g)?;
    let mut cmd: ActuatorCommand = first.command;
    let mut u_applied = thrust_direction(first.theta.0, first.theta.1) * maps.thrust_at(cmd.dc1_us, cmd.dc2_us);
    let mut u_sum = Vec3::zeros();
    let mut u_count = 0u32;
    let mut torque = Vec3::zeros();
    let mut q_sp = x0.q;
    let mut thrust_x = hover;

    let mut log = FlightLog { scenario: sc.name.clone(), ..Default::default() };
    let mut leg = 0usize;
    let mut hold_point = x0.p;
    let mut arrived_at: Option<f64> = None;
    let mut active: Option<ActiveTrajectory> = None;
    let mut pending: Option<Pending> = None;
    let mut last_replan = f64::NEG_INFINITY;
    let mut guidance_failures = 0usize;
    let mut att_ticks = 0u32;
    let mut rate_ticks = 0u32;
    let mut min_eig = f64::INFINITY;
    let mut quat_err: f64 = 0.0;
    let mut touchdown: Option<(f64, Vec3, Vec3)> = None;
    let mut abort: Option<String> = None;
    let latency_ticks = ((mc.guidance_latency_s / dt_mpc).ceil().max(0.0) as u64) * div_mpc;

    if let Some(w) = sc.mission.first() {
        log.events.push(Event::LegStarted { t: 0.0, leg: 0, target: w.target() });
    }

    let steps = (sc.duration_s / dt).round() as u64;
    'sim: for k in 0..=steps {
        let t = k as f64 * dt;

        if k % div_est == 0 {
            let meas = measure(&plant, &sc.sensors, t, &mut rng);
            if k > 0 {
                let u_avg = if u_count > 0 { u_sum / u_count as f64 } else { u_applied };
                u_sum = Vec3::zeros();
                u_count = 0;
                if let Err(e) = estimator.step(&ControlInput(u_avg), &meas, dt_est) {
                    abort = Some(format!("estimator: {e}"));
                    break 'sim;
                }
                if k % div_dist == 0 {
                    estimator.update_disturbance(dt_dist, dt_est);
                }
            }
            min_eig = min_eig.min(estimator.min_covariance_eigenvalue());
            quat_err = quat_err.max((estimator.state_estimate().q.norm() - 1.0).abs());
        }

        if k % div_mpc == 0 {
            let x_hat = *estimator.state_estimate();
            let w_hat = *estimator.disturbance();

            if pending.as_ref().is_some_and(|p| k >= p.apply_tick) {
                let p = pending.take().expect("checked above");
                let (result, wall) = match p.solve {
                    Solve::Ready(r, w) => (r, w),
                    Solve::Worker(h) => h.join().map_err(|_| GncError::Numerical("guidance worker panicked".into()))?,
                };
                match result {
                    Ok(sol) => {
                        guidance_failures = 0;
                        log.events.push(Event::Guidance {
                            t,
                            t_request: p.t_request,
                            leg: p.leg,
                            reason: p.reason.as_str().into(),
                            status: sol.report.status,
                            iterations: sol.report.iterations,
                            wall_time_s: wall,
                            t_f: sol.t_f,
                            solution: Box::new(sol.clone()),
                        });
                        if p.leg == leg {
                            active = Some(ActiveTrajectory { solution: sol, t0: p.t_request, leg: p.leg });
                            arrived_at = None;
                        }
                    }
                    Err(e) => {
                        guidance_failures += 1;
                        log.events.push(Event::GuidanceFailed {
                            t,
                            t_request: p.t_request,
                            leg: p.leg,
                            reason: p.reason.as_str().into(),
                            error: e.to_string(),
                            wall_time_s: wall,
                        });
                        if guidance_failures > mc.max_guidance_failures {
                            abort = Some(format!("guidance failed {guidance_failures} times in a row: {e}"));
                            break 'sim;
                        }
                    }
                }
            }

            let (waypoint, target) = match sc.mission.get(leg) {
                Some(w) => (Some(w), w.target()),
                None => (None, hold_point),
            };
            let phase = waypoint.map_or(Phase::Ascent, |w| w.phase);
            let traj = active.as_ref().filter(|a| a.leg == leg);
            let traj_done = traj.is_some_and(|a| t - a.t0 >= a.solution.t_f);
            let dist = (x_hat.p - target).norm();

            if let Some(w) = waypoint.filter(|w| w.mode == LegMode::Guidance) {
                if pending.is_none() {
                    let t_rel = active.as_ref().map_or(0.0, |a| t - a.t0);
                    let decision = replan_needed(active.as_ref().map(|a| &a.solution), t_rel, &x_hat, &target, &sc.replan);
                    let allowed = match decision.reason {
                        Some(ReplanReason::NearEnd) => dist > mc.near_end_guard_m && t - last_replan >= mc.min_replan_interval_s,
                        Some(ReplanReason::TrackingError) => t - last_replan >= mc.min_replan_interval_s && !traj_done,
                        Some(ReplanReason::PreTakeoff) => t - last_replan >= mc.min_replan_interval_s || last_replan.is_infinite(),
                        Some(ReplanReason::TargetChanged) => true,
                        None => false,
                    };
                    let reason = if allowed { decision.reason } else { None };
                    if let Some(reason) = reason {
                        let gp = GuidanceParams {
                            phase: w.phase,
                            mass: params.mass,
                            gravity: params.gravity_magnitude(),
                            ..sc.guidance.clone()
                        };
                        let start = GuidanceStart {
                            p: x_hat.p,
                            v: x_hat.v,
                            thrust: admissible_thrust(&world_thrust(&x_hat), &gp),
                        };
                        let tgt = GuidanceTarget { p: target, v: Vec3::zeros() };
                        log.events.push(Event::GuidanceRequested {
                            t,
                            leg,
                            reason: reason.as_str().into(),
                            start,
                            target: tgt,
                            phase: w.phase,
                        });
                        let solve = if sc.sync_guidance {
                            let (r, wall) = solve_request(start, tgt, gp);
                            Solve::Ready(r, wall)
                        } else {
                            Solve::Worker(std::thread::spawn(move || solve_request(start, tgt, gp)))
                        };
                        pending = Some(Pending { t_request: t, apply_tick: k + latency_ticks, reason, leg, solve });
                        last_replan = t;
                    }
                }
            }

            let (p_sp, v_sp) = match waypoint {
                Some(w) if w.mode == LegMode::Guidance => match active.as_ref() {
                    Some(a) if a.leg == leg && traj_done => {
                        let end = a.t0 + a.solution.t_f;
                        if w.phase == Phase::Descent {
                            let sink = mc.landing_creep_mps;
                            (target - E1 * (sink * (t - end)).min(1.0), -E1 * sink)
                        } else {
                            (target, Vec3::zeros())
                        }
                    }
                    Some(a) => sample(&a.solution, t - a.t0),
                    None => (hold_point, Vec3::zeros()),
                },
                Some(_) => (target, Vec3::zeros()),
                None => (hold_point, Vec3::zeros()),
            };

            let clock = Instant::now();
            let out = match mpc.step(&x_hat, &w_hat, Reference { p_sp, v_sp }) {
                Ok(o) => o,
                Err(e) => {
                    abort = Some(format!("mpc: {e}"));
                    break 'sim;
                }
            };
            let wall = clock.elapsed().as_secs_f64();
            q_sp = out.q_sp;
            thrust_x = out.thrust_x;
            let u0 = out.u0.0;
            let omega_ff = out.states.get(1).map_or(Vec3::zeros(), |x| x.fixed_rows::<3>(IDX_W).into());
            let torque_ff = Vec3::new(0.0, params.r_g * u0.z, -params.r_g * u0.y);
            inner.set_feedforward(Vec3::new(0.0, omega_ff.y, omega_ff.z), torque_ff);
            let (voltage, _) = battery_model(t, &sc.mismatch.battery);
            quat_err = quat_err.max(quat_norm_error(plant.state_vector()));
            log.rows.push(LogRow {
                t,
                leg,
                phase,
                truth: *plant.state_vector(),
                estimate: x_hat.to_vector(),
                w_hat: w_hat.to_vector(),
                p_sp,
                v_sp,
                u: out.u0.0,
                q_sp: [q_sp.w, q_sp.x, q_sp.y, q_sp.z],
                thrust_x,
                torque,
                phi1: cmd.phi1,
                phi2: cmd.phi2,
                dc1_us: cmd.dc1_us,
                dc2_us: cmd.dc2_us,
                mpc_status: if out.fallback && out.report.status == SolveStatus::Converged {
                    SolveStatus::NumericalFailure
                } else {
                    out.report.status
                },
                mpc_iterations: out.report.iterations,
                mpc_fallback: out.fallback,
                u_violation: mpc.polytope.violation(&out.u0.0),
                voltage,
                thrust_gain: plant.thrust_gain(t),
                att_ticks,
                rate_ticks,
                min_cov_eig: min_eig,
                quat_norm_err: quat_err,
                on_ground: plant.on_ground(),
            });
            log.mpc_wall_s.push(wall);
            att_ticks = 0;
            rate_ticks = 0;
            min_eig = f64::INFINITY;
            quat_err = 0.0;

            // leg progression
            if let Some(w) = waypoint {
                let settled = match w.mode {
                    LegMode::Setpoint => true,
                    LegMode::Guidance => traj_done,
                };
                if settled && dist <= mc.arrival_tol_m {
                    arrived_at.get_or_insert(t);
                } else if w.mode == LegMode::Setpoint {
                    arrived_at = None;
                }
                let hold_done = arrived_at.is_some_and(|a| t - a >= w.hold_s);
                if hold_done && leg + 1 < sc.mission.len() {
                    hold_point = target;
                    leg += 1;
                    arrived_at = None;
                    last_replan = f64::NEG_INFINITY;
                    log.events.push(Event::LegStarted { t, leg, target: sc.mission[leg].target() });
                }
            }
        }

        if k % div_att == 0 {
            inner.attitude_tick(&estimator.state_estimate().q, &q_sp);
            att_ticks += 1;
        }
        if k % div_rate == 0 {
            let omega = gyro(&plant, &sc.sensors, &mut rng);
            torque = inner.rate_tick(&omega, dt_rate)?;
            let alloc = inner.allocate(&torque, thrust_x, &maps, params.r_g)?;
            cmd = alloc.command;
            u_applied = thrust_direction(alloc.theta.0, alloc.theta.1) * maps.thrust_at(cmd.dc1_us, cmd.dc2_us);
            rate_ticks += 1;
        }
        u_sum += u_applied;
        u_count += 1;

        if k == steps {
            break;
        }
        plant.step(&cmd, t, dt)?;
        quat_err = quat_err.max(quat_norm_error(plant.state_vector()));

        let x = plant.state();
        let descending = sc.mission.get(leg).is_some_and(|w| w.phase == Phase::Descent);
        let flown = active.as_ref().is_some_and(|a| a.leg == leg);
        if descending && flown && x.p.x <= mc.touchdown_altitude_m && x.v.norm() < mc.touchdown_speed_mps {
            touchdown = Some((t + dt, x.p, x.v));
            break;
        }
    }

    // collect an in-flight worker so no thread outlives the run
    if let Some(Pending { solve: Solve::Worker(h), .. }) = pending.take() {
        let _ = h.join();
    }

    let last_target = sc.mission.last().map_or(x0.p, |w| w.target());
    let x_end: VehicleState = plant.state();
    let final_error = (x_end.p - last_target).norm();
    let mut outcome = Outcome { final_error, ..Default::default() };
    if let Some((t, p, v)) = touchdown {
        let error = (p - last_target).norm();
        log.events.push(Event::Touchdown { t, p, v, error });
        outcome.touchdown_error = Some(error);
        outcome.completed = leg + 1 == sc.mission.len();
    } else if abort.is_none() {
        let last_descent = sc.mission.last().is_some_and(|w| w.phase == Phase::Descent);
        outcome.completed = !last_descent && leg + 1 >= sc.mission.len() && final_error <= mc.arrival_tol_m;
    }
    if let Some(cause) = abort {
        let t = log.rows.last().map_or(0.0, |r| r.t);
        log.events.push(Event::Abort { t, cause: cause.clone() });
        outcome.aborted = Some(cause);
    }
    log.outcome = outcome;
    Ok(log)
}
