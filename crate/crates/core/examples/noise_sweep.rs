//! Adaptation under perturbed target proportions: each target proportion
//! vector is moved a fixed L1 distance in a random direction.
//!
//! cargo run --release --example noise_sweep

use pcpl::synth::{canonical_architecture, canonical_config, noise_sweep, ShiftScenario, SweepPlan};

fn main() -> pcpl::Result<()> {
    let plan = SweepPlan {
        deltas: vec![0.0, 0.01, 0.05, 0.1],
        repeats: 3,
        alpha: 1.0,
    };
    let table = noise_sweep(
        &ShiftScenario::canonical(0),
        &canonical_architecture(),
        &canonical_config(0),
        &plan,
    )?;
    print!("{}", table.to_csv());
    for s in table.summary() {
        println!(
            "delta {:<5} mF1 median {:.3} mean {:.3} std {:.3}",
            s.delta, s.median_mf1, s.mean_mf1, s.std_mf1
        );
    }
    Ok(())
}
