//! Precompute the receding-horizon gains for every horizon length.

use fblin::model::bundled;
use fblin::mpc::{precompute_gains, MpcWeights};

fn main() -> fblin::Result<()> {
    let model = bundled::duffing();
    let gains = precompute_gains(&model, MpcWeights { q: 1e12, r_delta: 1.0 }, 10)?;
    for g in gains.gains() {
        println!("Np = {:2}: cond(W) = {:.2e}, k[0] = {:+.4e}", g.np, g.cond, g.k[0]);
    }
    let dump = gains.dump();
    println!("structured dump: {} lines, first: {}", dump.lines().count(), dump.lines().next().unwrap_or(""));
    Ok(())
}
