//! Estimate the Duffing oscillator's state from noisy measurements.

use fblin::model::bundled;
use fblin::plant::{DuffingParams, DuffingPlant, NoiseSource, Plant};
use fblin::signal::rms;
use fblin::ukf::UkfSettings;
use fblin::ukf::Ukf;

fn main() -> fblin::Result<()> {
    let model = bundled::duffing();
    let mut plant = DuffingPlant::new(DuffingParams::nominal(), 1e-4)?;
    let settings = UkfSettings { r_cov: 1.13e-14, q_scale: 0.05, alpha: 1e-3, beta: 2.0, kappa: 0.0 };
    let mut ukf = Ukf::new(settings.config(model.n()))?;
    let mut noise = NoiseSource::new(2e-6, 3);

    let (mut y_true, mut err) = (Vec::new(), Vec::new());
    let mut u_prev = 0.0;
    for j in 0..20_000 {
        let t = j as f64 * model.ts();
        let u = 0.1 * (std::f64::consts::TAU * 2.0 * t).sin() + 0.05 * (std::f64::consts::TAU * 5.3 * t).sin();
        let y = plant.output();
        if j > 0 {
            ukf.predict(&model, u_prev)?;
        }
        ukf.update(&model, y + noise.sample())?;
        y_true.push(y);
        err.push(ukf.filtered_output(&model) - y);
        plant.advance(u, model.ts())?;
        u_prev = u;
    }
    println!("output RMS {:.3e} m, estimation error RMS {:.3e} m ({:.2} %)", rms(&y_true), rms(&err), 100.0 * rms(&err) / rms(&y_true));
    Ok(())
}
