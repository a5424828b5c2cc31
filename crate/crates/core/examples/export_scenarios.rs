//! Writes the preset scenarios as JSON files into the given directory.

use rocket_gnc::harness::Scenario;
use rocket_gnc::Vec3;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "scenarios".into()));
    std::fs::create_dir_all(&dir)?;
    let presets = [
        ("hover", Scenario::hover(Vec3::new(1.5, 0.0, 0.0), 10.0)),
        ("outdoor", Scenario::outdoor(1)),
        ("indoor_step", Scenario::indoor_step(1)),
        ("battery_decay", Scenario::battery_decay(1)),
        ("accel_step", Scenario::accel_step(1, 0.5, 5.0)),
    ];
    for (name, sc) in presets {
        let path = dir.join(format!("{name}.json"));
        std::fs::write(&path, serde_json::to_string_pretty(&sc)?)?;
        println!("{}", path.display());
    }
    Ok(())
}
