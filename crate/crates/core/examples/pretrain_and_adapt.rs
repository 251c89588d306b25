//! Pre-train on the source domain, adapt to the shifted target with
//! proportion-constrained pseudo-labels, and save the network.
//!
//! cargo run --release --example pretrain_and_adapt

use pcpl::adapt::{adapt, evaluate_model};
use pcpl::io;
use pcpl::synth::{canonical_architecture, canonical_config, generate_scenario, pretrain_on, ShiftScenario};

fn main() -> pcpl::Result<()> {
    let scenario = ShiftScenario::canonical(0);
    let cfg = canonical_config(0);
    let data = generate_scenario(&scenario)?;

    let (model, history) = pretrain_on(&data, &canonical_architecture(), &cfg)?;
    println!(
        "pre-trained: best epoch {}, target test mF1 {:.3}",
        history.best_epoch,
        evaluate_model(&model, &data.target_test)?.mf1
    );

    let (adapted, report) = adapt(
        &model,
        &data.source,
        &data.target_train,
        &data.target_val,
        &scenario.target_proportions,
        &cfg,
    )?;
    for e in &report.epochs {
        println!(
            "epoch {:>2}: cost {:>9.2} loss {:.4} val mF1 {:.3} pseudo counts {:?}",
            e.epoch,
            e.assignment_cost.unwrap_or(f64::NAN),
            e.train_loss,
            e.val.mf1,
            e.pseudo_counts.as_ref().map(|c| &c.0)
        );
    }
    println!(
        "adapted: best epoch {}, target test mF1 {:.3}",
        report.best_epoch,
        evaluate_model(&adapted, &data.target_test)?.mf1
    );

    let path = std::env::temp_dir().join("pcpl-adapted.ckpt");
    io::write_checkpoint(&adapted, &path)?;
    println!("saved {}", path.display());
    Ok(())
}
