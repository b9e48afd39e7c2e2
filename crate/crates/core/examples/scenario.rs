//! Run a named scenario end to end: `cargo run --release --example scenario -- duffing-open`.

use fblin::scenario::{run_scenario, ExperimentConfig, ScenarioId};

fn main() -> fblin::Result<()> {
    let name = std::env::args().nth(1).unwrap_or_else(|| "duffing-open".into());
    let id: ScenarioId = name.parse()?;
    let out = std::env::temp_dir().join(format!("fblin-{id}"));
    let res = run_scenario(&ExperimentConfig::shipped(id), &out)?;
    for c in &res.checks {
        println!("{} {} = {:.4}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.value);
    }
    if let Some(msg) = &res.diverged {
        println!("diverged: {msg}");
    }
    println!("{} artifacts in {}", res.artifacts.len(), out.display());
    Ok(())
}
