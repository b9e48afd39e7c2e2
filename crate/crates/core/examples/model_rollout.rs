//! Load the bundled Duffing model, simulate a step, and check that the
//! velocity-form predictions reproduce the rollout.

use fblin::model::bundled;
use fblin::mpc::build_prediction;
use nalgebra::DVector;

fn main() -> fblin::Result<()> {
    let model = bundled::duffing();
    println!("n = {}, monomials y^{:?}, ts = {} s", model.n(), model.exponents(), model.ts());

    let u = vec![0.05; 2000];
    let rec = model.simulate(&DVector::zeros(model.n()), &u)?;
    println!("step response after 2 s: y = {:.4e} m (linear DC gain x u = {:.4e})", rec.y[1999], model.dc_gain() * 0.05);

    // Predict 10 samples ahead from rest with a constant input increment.
    let np = 10;
    let pm = build_prediction(&model.augment(), np);
    let mut du = DVector::zeros(np);
    du[0] = 0.05;
    let dg = DVector::zeros(model.s() * np);
    let y = pm.predict(&DVector::zeros(model.n() + 1), &du, &dg);
    for (k, v) in y.iter().enumerate() {
        println!("  y({}) predicted {:+.6e}  simulated {:+.6e}", k + 1, v, rec.y[k + 1]);
    }
    Ok(())
}
