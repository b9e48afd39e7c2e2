//! One linearised run of the Duffing oscillator driven by a multisine.

use fblin::closed_loop::LoopMetrics;
use fblin::scenario::{closed_loop_runs, excitations, frozen_sigmas, open_loop_runs, ExperimentConfig, ScenarioId};

fn main() -> fblin::Result<()> {
    let mut cfg = ExperimentConfig::shipped(ScenarioId::DuffingLinearised);
    cfg.size.realisations = 1;
    cfg.size.periods = 2;
    let model = cfg.model()?;
    let exc = excitations(&cfg, cfg.excitation.rms)?;
    let sigmas = frozen_sigmas(&cfg, &open_loop_runs(&cfg, &exc)?);
    let rec = &closed_loop_runs(&cfg, &model, &exc, &sigmas)?[0];
    let m = LoopMetrics::from_record(&rec.tail(rec.len() / 2));
    println!("{} inner samples, horizon pattern {:?}", rec.len(), &rec.horizon[..12]);
    println!("MPC error {:.4} %, UKF error {:.3} % of the measured output RMS", m.mpc_percent, m.ukf_percent);
    Ok(())
}
