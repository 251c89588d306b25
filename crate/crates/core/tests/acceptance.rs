//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Oracles are reimplemented here rather than
//! borrowed from the library.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pcpl::adapt::{evaluate_model, Method};
use pcpl::eval::evaluate;
use pcpl::model::{cross_entropy_loss, proportion_loss, softmax, Activation, Classifier};
use pcpl::solver::{nearest_centroid_assignment, solve_assignment, CostMatrix};
use pcpl::synth::{
    adapt_on, canonical_architecture, canonical_config, generate_scenario, median, noise_sweep,
    pretrain_on, ShiftScenario, SweepPlan,
};
use pcpl::{CountVector, ProportionSpec};

struct Outcome {
    ok: bool,
    detail: String,
}

fn check(name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let mut out = f();
    let took = start.elapsed();
    if let Some(limit) = limit {
        if took > limit {
            out.ok = false;
            out.detail.push_str(&format!("; exceeded {limit:?}"));
        }
    }
    println!(
        "{} {name}: {} ({:.2}s)",
        if out.ok { "PASS" } else { "FAIL" },
        out.detail,
        took.as_secs_f64()
    );
    out.ok
}

/// Minimum cost over every labeling with the given class counts.
fn enumerate_min(costs: &[Vec<f64>], counts: &[usize]) -> f64 {
    fn go(i: usize, costs: &[Vec<f64>], left: &mut [usize], acc: f64, best: &mut f64) {
        if i == costs[0].len() {
            *best = best.min(acc);
            return;
        }
        for c in 0..left.len() {
            if left[c] > 0 {
                left[c] -= 1;
                go(i + 1, costs, left, acc + costs[c][i], best);
                left[c] += 1;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(0, costs, &mut counts.to_vec(), 0.0, &mut best);
    best
}

fn random_counts(rng: &mut ChaCha8Rng, k: usize, n: usize) -> Vec<usize> {
    let mut counts = vec![0; k];
    for _ in 0..n {
        counts[rng.random_range(0..k)] += 1;
    }
    counts
}

fn solver_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut mismatches = 0;
    let instances = 400;
    for t in 0..instances {
        let k = rng.random_range(1..=3);
        let n = rng.random_range(1..=8);
        let integer = t % 2 == 0;
        let costs: Vec<Vec<f64>> = (0..k)
            .map(|_| {
                (0..n)
                    .map(|_| {
                        if integer {
                            rng.random_range(0..20) as f64
                        } else {
                            rng.random_range(0.0..10.0)
                        }
                    })
                    .collect()
            })
            .collect();
        let counts = random_counts(&mut rng, k, n);
        let got = solve_assignment(&CostMatrix::new(costs.clone()).unwrap(), &CountVector(counts.clone()))
            .unwrap()
            .total_cost;
        let want = enumerate_min(&costs, &counts);
        let ok = if integer { got == want } else { (got - want).abs() <= 1e-9 };
        if !ok {
            mismatches += 1;
        }
    }
    Outcome {
        ok: mismatches == 0,
        detail: format!("{instances} instances (N<=8, C<=3), {mismatches} mismatches"),
    }
}

fn constraint_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut bad = 0;
    let mut largest = 0;
    for t in 0..50 {
        let n = if t < 5 { 5000 } else { rng.random_range(1..=2000) };
        let k = rng.random_range(1..=5);
        largest = largest.max(n);
        let costs: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..n).map(|_| rng.random_range(0.0..100.0)).collect())
            .collect();
        let counts = random_counts(&mut rng, k, n);
        let cm = CostMatrix::new(costs).unwrap();
        let a = solve_assignment(&cm, &CountVector(counts.clone())).unwrap();
        let mut realized = vec![0; k];
        a.class_of.iter().for_each(|&c| realized[c] += 1);
        let lower = nearest_centroid_assignment(&cm).total_cost;
        if realized != counts || a.counts.0 != counts || lower > a.total_cost + 1e-9 * a.total_cost.abs() {
            bad += 1;
        }
    }
    Outcome {
        ok: bad == 0,
        detail: format!("50 instances up to N={largest}, {bad} violations"),
    }
}

fn solver_scale() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (n, k) = (10_000, 4);
    let costs: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..n).map(|_| rng.random_range(0.0..1.0)).collect())
        .collect();
    let counts = CountVector(vec![4000, 3000, 2000, 1000]);
    let a = solve_assignment(&CostMatrix::new(costs).unwrap(), &counts).unwrap();
    Outcome {
        ok: a.counts == counts,
        detail: format!("N={n}, C={k}, cost {:.3}", a.total_cost),
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = a.iter().chain(b).map(|x| x * x).sum::<f64>().sqrt();
    diff / scale.max(1e-12)
}

/// Central differences of `loss(logits)` over every logit.
fn numeric_logit_grad(logits: &[Vec<f64>], loss: &dyn Fn(&[Vec<f64>]) -> f64) -> Vec<f64> {
    let h = 1e-5;
    let mut out = Vec::new();
    for i in 0..logits.len() {
        for c in 0..logits[i].len() {
            let mut up = logits.to_vec();
            up[i][c] += h;
            let mut down = logits.to_vec();
            down[i][c] -= h;
            out.push((loss(&up) - loss(&down)) / (2.0 * h));
        }
    }
    out
}

fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut worst: f64 = 0.0;
    let trials = 25;
    for _ in 0..trials {
        let k = rng.random_range(2..=5);
        let b = rng.random_range(1..=8);
        let logits: Vec<Vec<f64>> = (0..b)
            .map(|_| (0..k).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let p = ProportionSpec::new(raw.iter().map(|r| r / total).collect()).unwrap();
        let probs = |l: &[Vec<f64>]| l.iter().map(|r| softmax(r)).collect::<Vec<_>>();

        let (_, g) = cross_entropy_loss(&probs(&logits), &labels).unwrap();
        let num = numeric_logit_grad(&logits, &|l| cross_entropy_loss(&probs(l), &labels).unwrap().0);
        worst = worst.max(rel_err(&g.concat(), &num));

        let (_, g) = proportion_loss(&probs(&logits), &p).unwrap();
        let num = numeric_logit_grad(&logits, &|l| proportion_loss(&probs(l), &p).unwrap().0);
        worst = worst.max(rel_err(&g.concat(), &num));

        // through a whole network, against parameter perturbations
        let d = rng.random_range(1..=4);
        let model = Classifier::new(d, &[5, 3], k, Activation::Tanh, rng.random()).unwrap();
        let xs: Vec<Vec<f64>> = (0..b)
            .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let inputs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let loss_of = |m: &Classifier| {
            let t = m.forward_batch(&inputs).unwrap();
            cross_entropy_loss(&t.probs, &labels).unwrap().0 + proportion_loss(&t.probs, &p).unwrap().0
        };
        let trace = model.forward_batch(&inputs).unwrap();
        let (_, g1) = cross_entropy_loss(&trace.probs, &labels).unwrap();
        let (_, g2) = proportion_loss(&trace.probs, &p).unwrap();
        let grad_logits: Vec<Vec<f64>> = g1
            .iter()
            .zip(&g2)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect();
        let analytic = model.backward(&trace, &grad_logits).0.concat();
        let mut numeric = Vec::new();
        let h = 1e-5;
        let sizes: Vec<usize> = model.params().iter().map(|t| t.len()).collect();
        for (ti, &len) in sizes.iter().enumerate() {
            for j in 0..len {
                let mut up = model.clone();
                up.params_mut()[ti][j] += h;
                let mut down = model.clone();
                down.params_mut()[ti][j] -= h;
                numeric.push((loss_of(&up) - loss_of(&down)) / (2.0 * h));
            }
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    Outcome {
        ok: worst <= 1e-5,
        detail: format!("{trials} random batches x 3 checks, worst relative error {worst:.2e}"),
    }
}

fn phenomenon() -> Outcome {
    let methods = [Method::ProportionConstrained, Method::NearestCentroid, Method::ProportionLoss];
    let mut pre = Vec::new();
    let mut post = vec![Vec::new(); 3];
    for seed in 0..10 {
        let scenario = ShiftScenario::canonical(seed);
        let cfg = canonical_config(seed);
        let data = generate_scenario(&scenario).unwrap();
        let (model, _) = pretrain_on(&data, &canonical_architecture(), &cfg).unwrap();
        pre.push(evaluate_model(&model, &data.target_test).unwrap().mf1);
        for (m, scores) in methods.iter().zip(&mut post) {
            let (_, r) = adapt_on(&data, &model, *m, &scenario.target_proportions, &cfg).unwrap();
            scores.push(r.test_metrics.unwrap().mf1);
        }
    }
    let [ours, nc, pl] = [median(&post[0]), median(&post[1]), median(&post[2])];
    let base = median(&pre);
    Outcome {
        ok: ours >= base + 0.05 && ours > nc && ours > pl,
        detail: format!(
            "median mF1 over 10 runs: pretrain {base:.3}, adapt {ours:.3}, nearest-centroid {nc:.3}, proportion-loss {pl:.3}"
        ),
    }
}

fn noise_robustness() -> Outcome {
    let plan = SweepPlan {
        deltas: vec![0.0, 0.01, 0.05, 0.1],
        repeats: 3,
        alpha: 1.0,
    };
    let table = noise_sweep(&ShiftScenario::canonical(0), &canonical_architecture(), &canonical_config(0), &plan).unwrap();
    let summary = table.summary();
    let at = |d: f64| summary.iter().find(|s| s.delta == d).unwrap().median_mf1;
    let gap = (at(0.1) - at(0.0)).abs();
    Outcome {
        ok: gap <= 0.05,
        detail: format!(
            "median mF1 by delta: {}; |gap at 0.1| = {gap:.3}",
            summary
                .iter()
                .map(|s| format!("{}={:.3}", s.delta, s.median_mf1))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    }
}

/// Per-class (precision, recall, f1) straight from the definitions.
fn metric_oracle(t: &[usize], p: &[usize], k: usize) -> (f64, Vec<(f64, f64, f64)>, f64) {
    let mut per = Vec::new();
    let mut macro_f1 = Vec::new();
    for c in 0..k {
        let tp = t.iter().zip(p).filter(|(a, b)| **a == c && **b == c).count() as f64;
        let pred = p.iter().filter(|&&b| b == c).count() as f64;
        let truth = t.iter().filter(|&&a| a == c).count() as f64;
        let prec = if pred > 0.0 { tp / pred } else { 0.0 };
        let rec = if truth > 0.0 { tp / truth } else { 0.0 };
        let f1 = if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
        per.push((prec, rec, f1));
        if pred + truth > 0.0 {
            macro_f1.push(f1);
        }
    }
    let acc = t.iter().zip(p).filter(|(a, b)| a == b).count() as f64 / t.len() as f64;
    (acc, per, macro_f1.iter().sum::<f64>() / macro_f1.len() as f64)
}

fn metrics_oracle() -> Outcome {
    let r = evaluate(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    let mut ok = close(r.per_class[0].precision, 1.0)
        && close(r.per_class[1].precision, 2.0 / 3.0)
        && close(r.per_class[0].recall, 0.5)
        && close(r.per_class[1].recall, 1.0)
        && close(r.per_class[0].f1, 2.0 / 3.0)
        && close(r.per_class[1].f1, 0.8)
        && close(r.mf1, (2.0 / 3.0 + 0.8) / 2.0);
    let worked = r.mf1;

    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut bad = 0;
    for _ in 0..100 {
        let k = rng.random_range(1..=5);
        let n = rng.random_range(1..=40);
        let t: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let p: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let r = evaluate(&t, &p, k).unwrap();
        let (acc, per, mf1) = metric_oracle(&t, &p, k);
        let total: usize = r.confusion.iter().flatten().sum();
        let trace: usize = (0..k).map(|c| r.confusion[c][c]).sum();
        let rows_ok = r.confusion_row_normalized.iter().all(|row| {
            let s: f64 = row.iter().sum();
            close(s, 1.0) || row.iter().all(|&v| v == 0.0)
        });
        let per_ok = r.per_class.iter().zip(&per).all(|(m, o)| {
            close(m.precision, o.0) && close(m.recall, o.1) && close(m.f1, o.2)
        });
        let recall_ok = (0..k).all(|c| {
            let row: usize = r.confusion[c].iter().sum();
            row == 0 || close(r.per_class[c].recall, r.confusion[c][c] as f64 / row as f64)
        });
        let range_ok = [r.accuracy, r.mrecall, r.mprecision, r.mf1]
            .iter()
            .all(|v| (0.0..=1.0).contains(v));
        if !(total == n
            && close(r.accuracy, acc)
            && close(r.accuracy, trace as f64 / n as f64)
            && close(r.mf1, mf1)
            && rows_ok
            && per_ok
            && recall_ok
            && range_ok)
        {
            bad += 1;
        }
    }
    ok &= bad == 0;
    Outcome {
        ok,
        detail: format!("worked example mF1 {worked:.4}; 100 random label pairs, {bad} violations"),
    }
}

fn run_pcpl(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_pcpl"))
        .args(args)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn cli_report(dir: &Path) -> Option<Vec<u8>> {
    let p = |n: &str| dir.join(n).to_str().unwrap().to_owned();
    let scenario = ShiftScenario {
        n_source: 300,
        n_target_train: 300,
        n_target_test: 300,
        ..ShiftScenario::canonical(2)
    };
    std::fs::write(p("scenario.json"), serde_json::to_string(&scenario).unwrap()).ok()?;
    std::fs::write(p("config.json"), serde_json::to_string(&canonical_config(0)).unwrap()).ok()?;
    let ok = run_pcpl(&["synth", "--scenario-config", &p("scenario.json"), "--out-dir", &p("data")])
        && run_pcpl(&[
            "pretrain",
            "--source-features", &p("data/source.pcpl"),
            "--source-labels", &p("data/source.labels"),
            "--val-features", &p("data/target_val.pcpl"),
            "--val-labels", &p("data/target_val.labels"),
            "--config", &p("config.json"),
            "--hidden", "16",
            "--out-model", &p("pre.ckpt"),
        ])
        && run_pcpl(&[
            "adapt",
            "--model", &p("pre.ckpt"),
            "--source-features", &p("data/source.pcpl"),
            "--source-labels", &p("data/source.labels"),
            "--target-features", &p("data/target_train.pcpl"),
            "--proportions", &p("data/target_proportions.json"),
            "--val-features", &p("data/target_val.pcpl"),
            "--val-labels", &p("data/target_val.labels"),
            "--test-features", &p("data/target_test.pcpl"),
            "--test-labels", &p("data/target_test.labels"),
            "--config", &p("config.json"),
            "--seed", "5",
            "--out-model", &p("adapted.ckpt"),
            "--out-report", &p("report.json"),
        ]);
    if !ok {
        return None;
    }
    let mut bytes = std::fs::read(p("report.json")).ok()?;
    bytes.extend(std::fs::read(p("adapted.ckpt")).ok()?);
    Some(bytes)
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    match (cli_report(a.path()), cli_report(b.path())) {
        (Some(x), Some(y)) => Outcome {
            ok: x == y,
            detail: format!("two `adapt` runs, report+model {} bytes, identical: {}", x.len(), x == y),
        },
        _ => Outcome {
            ok: false,
            detail: "CLI pipeline failed".into(),
        },
    }
}

fn main() {
    let secs = Duration::from_secs;
    let results = [
        check("solver-oracle equivalence", Some(secs(5)), solver_oracle),
        check("constraint exactness", None, constraint_exactness),
        check("solver scale", Some(secs(10)), solver_scale),
        check("gradient checks", None, gradient_checks),
        check("phenomenon reproduction", Some(secs(120)), phenomenon),
        check("noise robustness", Some(secs(300)), noise_robustness),
        check("metrics oracle", None, metrics_oracle),
        check("determinism", None, determinism),
    ];
    let failed = results.iter().filter(|ok| !**ok).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
