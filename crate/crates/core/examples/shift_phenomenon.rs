//! Canonical shifted-Gaussian scenario: pre-training alone versus the three
//! adaptation methods, over ten seeds.
//!
//! cargo run --release --example shift_phenomenon

use pcpl::adapt::{evaluate_model, Method};
use pcpl::synth::{
    adapt_on, canonical_architecture, canonical_config, generate_scenario, median, pretrain_on,
    ShiftScenario,
};

fn main() -> pcpl::Result<()> {
    let methods = [
        Method::ProportionConstrained,
        Method::NearestCentroid,
        Method::ProportionLoss,
    ];
    let mut pre = Vec::new();
    let mut post = vec![Vec::new(); methods.len()];
    for seed in 0..10 {
        let scenario = ShiftScenario::canonical(seed);
        let cfg = canonical_config(seed);
        let data = generate_scenario(&scenario)?;
        let (model, _) = pretrain_on(&data, &canonical_architecture(), &cfg)?;
        let base = evaluate_model(&model, &data.target_test)?.mf1;
        pre.push(base);
        print!("seed {seed}: pretrain {base:.3}");
        for (m, scores) in methods.iter().zip(&mut post) {
            let (_, report) = adapt_on(&data, &model, *m, &scenario.target_proportions, &cfg)?;
            let mf1 = report.test_metrics.expect("filled by adapt_on").mf1;
            scores.push(mf1);
            print!("  {m:?} {mf1:.3}");
        }
        println!();
    }
    println!("median pretrain mF1 {:.3}", median(&pre));
    for (m, scores) in methods.iter().zip(&post) {
        println!("median {m:?} mF1 {:.3}", median(scores));
    }
    Ok(())
}
