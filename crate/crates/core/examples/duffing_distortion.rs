//! Open-loop nonlinear distortion analysis of the Duffing oscillator.

use fblin::scenario::{analyse_records, excitations, open_loop_runs, ExperimentConfig, ScenarioId};

fn main() -> fblin::Result<()> {
    let mut cfg = ExperimentConfig::shipped(ScenarioId::DuffingOpen);
    cfg.size.realisations = 2;
    let exc = excitations(&cfg, cfg.excitation.rms)?;
    let records = open_loop_runs(&cfg, &exc)?;
    let (_, summary) = analyse_records(&cfg, &exc, &records)?;
    println!("resonance near {:.3} Hz", summary.resonance_hz);
    for b in &summary.bands {
        println!(
            "{:4.1} Hz: odd {:6.1} dB, even {:6.1} dB, noise {:6.1} dB (relative to the output peak)",
            b.centre,
            b.odd_rel_db.unwrap_or(f64::NAN),
            b.even_rel_db.unwrap_or(f64::NAN),
            b.noise_rel_db.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
