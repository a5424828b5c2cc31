use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rocket_gnc::harness::{check_flight, read_csv, run_mission, synthetic_bench, BenchConfig, Event, Scenario};
use rocket_gnc::innerloop::{fit_motor_maps, BenchSample, SyntheticPropeller};
use rocket_gnc::GncError;

#[derive(Parser)]
#[command(name = "rocket-gnc", version, about = "Closed-loop GNC simulation for a thrust-vectored VTOL rocket")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write flight.csv, events.json, summary.json, timing.csv, trajectory.svg.
    Run {
        scenario: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Solve guidance on the control thread instead of a worker.
        #[arg(long)]
        sync_guidance: bool,
        /// Override the tracking-error replan threshold, m.
        #[arg(long)]
        replan_threshold: Option<f64>,
    },
    /// Fit the thrust and torque cubic maps to a bench table (dc1_us,dc2_us,thrust_n,torque_nm).
    BenchFit { bench: PathBuf },
    /// Write a synthetic bench table from the simulated propeller pair.
    BenchGen {
        #[arg(long, default_value = "bench.csv")]
        out: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        thrust_noise: f64,
        #[arg(long, default_value_t = 0.0)]
        torque_noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Re-run the log audits offline. Reads events.json and scenario.json from the same directory when present.
    Check {
        flight: PathBuf,
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
}

const CONFIG: u8 = 2;
const MISSION: u8 = 3;
const IO: u8 = 4;

fn code(e: &GncError) -> u8 {
    match e {
        GncError::Config(_) | GncError::Json(_) | GncError::InvalidParams(_) | GncError::InvalidArgument(_) => CONFIG,
        GncError::Io(_) | GncError::Csv(_) => IO,
        _ => MISSION,
    }
}

fn fail(e: GncError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(code(&e))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { scenario, out, seed, sync_guidance, replan_threshold } => {
            run(&scenario, &out, seed, sync_guidance, replan_threshold)
        }
        Command::BenchFit { bench } => bench_fit(&bench),
        Command::BenchGen { out, thrust_noise, torque_noise, seed } => bench_gen(&out, thrust_noise, torque_noise, seed),
        Command::Check { flight, scenario } => check(&flight, scenario.as_deref()),
    }
}

fn run(path: &Path, out: &Path, seed: Option<u64>, sync: bool, replan: Option<f64>) -> ExitCode {
    let mut sc = match Scenario::load(path) {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    if let Some(s) = seed {
        sc.seed = s;
    }
    sc.sync_guidance |= sync;
    if let Some(r) = replan {
        sc.replan.tracking_error = r;
    }
    let log = match run_mission(&sc) {
        Ok(l) => l,
        Err(e) => return fail(e),
    };
    let written = log.write(out).and_then(|_| {
        std::fs::write(out.join("scenario.json"), serde_json::to_string_pretty(&sc)?)?;
        Ok(())
    });
    if let Err(e) = written {
        return fail(e);
    }
    let s = log.summary();
    println!("{}", serde_json::to_string_pretty(&s).expect("summary serializes"));
    if let Some(reason) = &log.outcome.aborted {
        eprintln!("mission aborted: {reason}");
        return ExitCode::from(MISSION);
    }
    if !log.outcome.completed {
        eprintln!("mission not completed, final error {:.3} m", log.outcome.final_error);
        return ExitCode::from(MISSION);
    }
    ExitCode::SUCCESS
}

fn bench_fit(path: &Path) -> ExitCode {
    let samples: Result<Vec<BenchSample>, GncError> = csv::Reader::from_path(path)
        .map_err(GncError::from)
        .and_then(|mut r| r.deserialize().collect::<Result<Vec<BenchSample>, _>>().map_err(GncError::from));
    let samples = match samples {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    match fit_motor_maps(&samples) {
        Ok(maps) => {
            let rms = |f: &dyn Fn(&BenchSample) -> f64| {
                (samples.iter().map(|s| f(s).powi(2)).sum::<f64>() / samples.len() as f64).sqrt()
            };
            let thrust_rms = rms(&|s| maps.thrust_at(s.dc1_us, s.dc2_us) - s.thrust_n);
            let torque_rms = rms(&|s| maps.torque_at(s.dc1_us, s.dc2_us) - s.torque_nm);
            let report = serde_json::json!({ "maps": maps, "thrust_rms_n": thrust_rms, "torque_rms_nm": torque_rms });
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => fail(GncError::Config(e.to_string())),
    }
}

fn bench_gen(out: &Path, thrust_noise: f64, torque_noise: f64, seed: u64) -> ExitCode {
    if !(thrust_noise >= 0.0 && torque_noise >= 0.0) {
        return fail(GncError::Config("noise levels must be non-negative".into()));
    }
    let bench = BenchConfig { thrust_noise, torque_noise, ..Default::default() };
    let table = synthetic_bench(&SyntheticPropeller::default(), &bench, seed);
    let written = csv::Writer::from_path(out).map_err(GncError::from).and_then(|mut w| {
        for s in &table {
            w.serialize(s)?;
        }
        w.flush()?;
        Ok(())
    });
    match written {
        Ok(()) => {
            println!("wrote {} samples to {}", table.len(), out.display());
            ExitCode::SUCCESS
        }
        Err(e) => fail(e),
    }
}

fn check(flight: &Path, scenario: Option<&Path>) -> ExitCode {
    let rows = match read_csv(flight) {
        Ok(r) => r,
        Err(e @ GncError::Config(_)) => return fail(e),
        Err(e) => return fail(GncError::Io(std::io::Error::other(e.to_string()))),
    };
    let dir = flight.parent().unwrap_or(Path::new("."));
    let sibling = dir.join("scenario.json");
    let sc = match scenario.map(Path::to_path_buf).or_else(|| sibling.exists().then_some(sibling)) {
        Some(p) => match Scenario::load(&p) {
            Ok(s) => s,
            Err(e) => return fail(e),
        },
        None => Scenario::default(),
    };
    let events_path = dir.join("events.json");
    let events: Option<Vec<Event>> = if events_path.exists() {
        match std::fs::read_to_string(&events_path).map_err(GncError::from).and_then(|t| Ok(serde_json::from_str(&t)?)) {
            Ok(e) => Some(e),
            Err(e) => return fail(e),
        }
    } else {
        None
    };
    let report = check_flight(&rows, events.as_deref(), &sc);
    for item in &report.items {
        println!("{} {}: {}", if item.passed { "ok  " } else { "FAIL" }, item.name, item.detail);
    }
    if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(MISSION)
    }
}
