//! Closed-loop simulation harness: truth plant, sensors, multi-rate scheduling and logging.

pub mod check;
pub mod log;
pub mod plant;
pub mod scenario;
pub mod sim;

pub use check::{check_flight, CheckItem, CheckReport};
pub use log::{csv_header, read_csv, trajectory_svg, Event, FlightLog, LogRow, Outcome, Summary};
pub use plant::{measure, Plant};
pub use scenario::{
    battery_model, AccelStep, BatteryProfile, BenchConfig, InitialState, LegMode, Mismatch, MissionConfig, Rates, Scenario,
    SensorNoise, Waypoint, NOMINAL_VOLTAGE,
};
pub use sim::{run_mission, synthetic_bench};
