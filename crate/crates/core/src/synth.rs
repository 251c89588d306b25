//! Synthetic domain-shift scenarios and proportion-noise experiments.
//!
//! Classes are isotropic Gaussians. The target domain applies a rotation (in
//! the plane of the first two coordinates) followed by a translation to every
//! source sample, and usually uses different class proportions. Class counts
//! are fixed by largest-remainder rounding and then shuffled, so the
//! generated proportions are exact.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{adapt_with, evaluate_model, pretrain, AdaptConfig, AdaptReport, Method, PretrainHistory};
use crate::error::{Error, Result};
use crate::eval::MetricsReport;
use crate::model::{Architecture, Classifier};
use crate::types::{proportions_to_counts, FeatureMatrix, LabeledDataset, ProportionSpec, UnlabeledDataset};

/// Draws before [`perturb_proportions`] gives up on finding a non-negative result.
pub const PERTURB_MAX_DRAWS: usize = 10_000;

pub const SWEEP_CSV_HEADER: &str = "delta,repeat,seed,accuracy,mrecall,mprecision,mf1";

fn default_val_per_class() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftScenario {
    pub num_classes: usize,
    pub dim: usize,
    /// One source mean per class.
    pub class_means: Vec<Vec<f64>>,
    pub noise_std: f64,
    pub translation: Vec<f64>,
    /// Radians, applied before the translation.
    pub rotation: f64,
    pub source_proportions: ProportionSpec,
    pub target_proportions: ProportionSpec,
    pub n_source: usize,
    pub n_target_train: usize,
    pub n_target_test: usize,
    #[serde(default = "default_val_per_class")]
    pub val_per_class: usize,
    pub seed: u64,
}

impl ShiftScenario {
    /// Two classes 4 apart along the first axis, balanced in the source and
    /// 70/30 in the target, which is translated by 3 along the same axis.
    pub fn canonical(seed: u64) -> Self {
        Self {
            num_classes: 2,
            dim: 2,
            class_means: vec![vec![-2.0, 0.0], vec![2.0, 0.0]],
            noise_std: 1.0,
            translation: vec![3.0, 0.0],
            rotation: 0.0,
            source_proportions: ProportionSpec::new(vec![0.5, 0.5]).unwrap(),
            target_proportions: ProportionSpec::new(vec![0.7, 0.3]).unwrap(),
            n_source: 1000,
            n_target_train: 1000,
            n_target_test: 1000,
            val_per_class: 10,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes;
        if k == 0 || self.dim == 0 {
            return Err(Error::validation("scenario needs at least one class and one dimension"));
        }
        if self.class_means.len() != k || self.class_means.iter().any(|m| m.len() != self.dim) {
            return Err(Error::validation(format!(
                "class_means must hold {k} vectors of length {}",
                self.dim
            )));
        }
        if self.translation.len() != self.dim {
            return Err(Error::validation(format!(
                "translation has length {}, expected {}",
                self.translation.len(),
                self.dim
            )));
        }
        let finite = self
            .class_means
            .iter()
            .flatten()
            .chain(&self.translation)
            .chain([&self.rotation, &self.noise_std])
            .all(|v| v.is_finite());
        if !finite || self.noise_std <= 0.0 {
            return Err(Error::validation("scenario parameters must be finite with noise_std > 0"));
        }
        if self.rotation != 0.0 && self.dim < 2 {
            return Err(Error::validation("rotation needs at least two dimensions"));
        }
        if self.source_proportions.num_classes() != k || self.target_proportions.num_classes() != k {
            return Err(Error::validation(format!("proportions must have {k} entries")));
        }
        let floor = k * 10;
        for (name, n) in [
            ("n_source", self.n_source),
            ("n_target_train", self.n_target_train),
            ("n_target_test", self.n_target_test),
        ] {
            if n < floor {
                return Err(Error::validation(format!(
                    "{name} = {n} is below {floor} (10 per class)"
                )));
            }
        }
        if self.val_per_class == 0 {
            return Err(Error::validation("val_per_class must be at least 1"));
        }
        Ok(())
    }
}

/// Network shipped with the canonical scenario: one small hidden layer.
pub fn canonical_architecture() -> Architecture {
    Architecture {
        hidden: vec![16],
        activation: crate::model::Activation::Softplus,
    }
}

/// Training settings for the canonical scenario. The learning rates are far
/// above the image-scale defaults because the networks and datasets are tiny.
pub fn canonical_config(seed: u64) -> AdaptConfig {
    AdaptConfig {
        max_epochs: 30,
        patience: 10,
        pretrain_lr: 1e-2,
        adapt_lr: 1e-2,
        batch_size: 64,
        recompute_centroids: true,
        source_fraction: 0.5,
        seed,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioData {
    pub source: LabeledDataset,
    pub target_train: UnlabeledDataset,
    /// Ground truth of `target_train`, for evaluation only.
    pub target_train_labels: Vec<usize>,
    pub target_val: LabeledDataset,
    pub target_test: LabeledDataset,
}

struct Sampler<'a> {
    s: &'a ShiftScenario,
    noise: Normal<f64>,
    rng: ChaCha8Rng,
}

impl Sampler<'_> {
    fn draw(&mut self, counts: &[usize], shifted: bool) -> Result<LabeledDataset> {
        let mut labels: Vec<usize> = counts
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
            .collect();
        labels.shuffle(&mut self.rng);
        let d = self.s.dim;
        let (sin, cos) = self.s.rotation.sin_cos();
        let mut data = Vec::with_capacity(labels.len() * d);
        for &c in &labels {
            let mut x: Vec<f64> = self.s.class_means[c]
                .iter()
                .map(|m| m + self.noise.sample(&mut self.rng))
                .collect();
            if shifted {
                if d >= 2 {
                    let (a, b) = (x[0], x[1]);
                    x[0] = cos * a - sin * b;
                    x[1] = sin * a + cos * b;
                }
                for (v, t) in x.iter_mut().zip(&self.s.translation) {
                    *v += t;
                }
            }
            data.extend(x);
        }
        LabeledDataset::new(FeatureMatrix::new(labels.len(), d, data)?, labels, self.s.num_classes)
    }
}

/// Draws source, target-train, target-validation and target-test splits.
pub fn generate_scenario(s: &ShiftScenario) -> Result<ScenarioData> {
    s.validate()?;
    let mut sampler = Sampler {
        s,
        noise: Normal::new(0.0, s.noise_std).map_err(|e| Error::validation(e.to_string()))?,
        rng: ChaCha8Rng::seed_from_u64(s.seed),
    };
    let source = sampler.draw(&proportions_to_counts(&s.source_proportions, s.n_source).0, false)?;
    let train = sampler.draw(
        &proportions_to_counts(&s.target_proportions, s.n_target_train).0,
        true,
    )?;
    let target_val = sampler.draw(&vec![s.val_per_class; s.num_classes], true)?;
    let target_test = sampler.draw(
        &proportions_to_counts(&s.target_proportions, s.n_target_test).0,
        true,
    )?;
    Ok(ScenarioData {
        target_train: train.to_unlabeled(),
        target_train_labels: train.labels().to_vec(),
        source,
        target_val,
        target_test,
    })
}

/// Moves `p` by exactly `delta` in L1 along a random direction.
///
/// Draws `q ~ Dirichlet(alpha, ..., alpha)` and returns
/// `p + (q - p) * delta / |q - p|_1`, redrawing while any entry would be
/// negative.
pub fn perturb_proportions(
    p: &ProportionSpec,
    delta: f64,
    alpha: f64,
    seed: u64,
) -> Result<ProportionSpec> {
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::validation(format!("delta must be finite and >= 0, got {delta}")));
    }
    if delta == 0.0 {
        return Ok(p.clone());
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::validation(format!("alpha must be positive, got {alpha}")));
    }
    let base = p.as_slice();
    if base.len() < 2 {
        return Err(Error::validation("a single class admits no proportion noise"));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::validation(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..PERTURB_MAX_DRAWS {
        let g: Vec<f64> = base.iter().map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = g.iter().sum();
        if total <= 0.0 {
            continue;
        }
        let dir: Vec<f64> = g.iter().zip(base).map(|(gi, pi)| gi / total - pi).collect();
        let l1: f64 = dir.iter().map(|v| v.abs()).sum();
        if l1 <= 0.0 {
            continue;
        }
        let scale = delta / l1;
        let out: Vec<f64> = base.iter().zip(&dir).map(|(pi, e)| pi + e * scale).collect();
        if out.iter().all(|&v| v >= 0.0) {
            return ProportionSpec::new(out);
        }
    }
    Err(Error::validation(format!(
        "no non-negative proportion vector at L1 distance {delta} found in {PERTURB_MAX_DRAWS} draws"
    )))
}

/// Trains a fresh network on the source split, early-stopping on target validation.
pub fn pretrain_on(
    data: &ScenarioData,
    arch: &Architecture,
    cfg: &AdaptConfig,
) -> Result<(Classifier, PretrainHistory)> {
    let model = arch.build(data.source.features().d(), data.source.num_classes(), cfg.seed)?;
    pretrain(&model, &data.source, &data.target_val, cfg)
}

/// Adapts `pretrained` with `method` and fills the report's test metrics.
pub fn adapt_on(
    data: &ScenarioData,
    pretrained: &Classifier,
    method: Method,
    p: &ProportionSpec,
    cfg: &AdaptConfig,
) -> Result<(Classifier, AdaptReport)> {
    let (model, mut report) = adapt_with(
        method,
        pretrained,
        &data.source,
        &data.target_train,
        &data.target_val,
        p,
        cfg,
    )?;
    report.test_metrics = Some(evaluate_model(&model, &data.target_test)?);
    Ok((model, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub delta: f64,
    pub repeat: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub mrecall: f64,
    pub mprecision: f64,
    pub mf1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub delta: f64,
    pub runs: usize,
    pub mean_mf1: f64,
    pub std_mf1: f64,
    pub median_mf1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(SWEEP_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.delta, r.repeat, r.seed, r.accuracy, r.mrecall, r.mprecision, r.mf1
            )
            .unwrap();
        }
        out
    }

    /// Per-delta aggregates in order of first appearance. Population std.
    pub fn summary(&self) -> Vec<SweepSummary> {
        let mut deltas: Vec<f64> = Vec::new();
        for r in &self.rows {
            if !deltas.contains(&r.delta) {
                deltas.push(r.delta);
            }
        }
        deltas
            .into_iter()
            .map(|delta| {
                let mut rows: Vec<&SweepRow> = self.rows.iter().filter(|r| r.delta == delta).collect();
                rows.sort_by_key(|r| r.repeat);
                let scores: Vec<f64> = rows.iter().map(|r| r.mf1).collect();
                let n = scores.len() as f64;
                let mean = scores.iter().sum::<f64>() / n;
                let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
                SweepSummary {
                    delta,
                    runs: scores.len(),
                    mean_mf1: mean,
                    std_mf1: var.sqrt(),
                    median_mf1: median(&scores),
                }
            })
            .collect()
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Sweep settings beyond the adaptation config.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPlan {
    pub deltas: Vec<f64>,
    pub repeats: usize,
    pub alpha: f64,
}

/// Runs the full pipeline once per (delta, repeat) with independently
/// perturbed target proportions and reports target-test metrics.
///
/// Pre-training happens once and is shared. Repeat `r` perturbs with seed
/// `cfg.seed + r`; adaptation always uses `cfg.seed`, so the `delta = 0`
/// rows equal a plain adaptation run.
pub fn noise_sweep(
    scenario: &ShiftScenario,
    arch: &Architecture,
    cfg: &AdaptConfig,
    plan: &SweepPlan,
) -> Result<SweepTable> {
    if !plan.deltas.contains(&0.0) {
        return Err(Error::validation("deltas must include 0 as the clean reference"));
    }
    if plan.repeats == 0 {
        return Err(Error::validation("repeats must be at least 1"));
    }
    let data = generate_scenario(scenario)?;
    let (pretrained, _) = pretrain_on(&data, arch, cfg)?;
    let jobs: Vec<(f64, usize)> = plan
        .deltas
        .iter()
        .flat_map(|&d| (0..plan.repeats).map(move |r| (d, r)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(delta, repeat)| {
            let seed = cfg.seed.wrapping_add(repeat as u64);
            let p = perturb_proportions(&scenario.target_proportions, delta, plan.alpha, seed)?;
            let (_, report) = adapt_on(&data, &pretrained, Method::ProportionConstrained, &p, cfg)?;
            let m: &MetricsReport = report.test_metrics.as_ref().expect("adapt_on fills test metrics");
            Ok(SweepRow {
                delta,
                repeat,
                seed,
                accuracy: m.accuracy,
                mrecall: m.mrecall,
                mprecision: m.mprecision,
                mf1: m.mf1,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> ShiftScenario {
        ShiftScenario {
            n_source: 200,
            n_target_train: 200,
            n_target_test: 200,
            ..ShiftScenario::canonical(seed)
        }
    }

    #[test]
    fn generation_is_deterministic_and_exact() {
        let s = small(5);
        let a = generate_scenario(&s).unwrap();
        assert_eq!(a, generate_scenario(&s).unwrap());
        assert_ne!(a, generate_scenario(&small(6)).unwrap());
        assert_eq!(a.source.class_counts().0, vec![100, 100]);
        assert_eq!(
            crate::types::class_counts(&a.target_train_labels, 2).unwrap().0,
            vec![140, 60]
        );
        assert_eq!(a.target_val.class_counts().0, vec![10, 10]);
        assert_eq!(a.target_test.class_counts().0, vec![140, 60]);
    }

    #[test]
    fn zero_shift_matches_source_distribution() {
        let s = ShiftScenario {
            translation: vec![0.0, 0.0],
            target_proportions: ProportionSpec::new(vec![0.5, 0.5]).unwrap(),
            n_source: 2000,
            n_target_train: 2000,
            ..ShiftScenario::canonical(3)
        };
        let data = generate_scenario(&s).unwrap();
        let mean = |m: &FeatureMatrix, j: usize| m.rows().map(|r| r[j]).sum::<f64>() / m.n() as f64;
        for j in 0..2 {
            let gap = (mean(data.source.features(), j) - mean(data.target_train.features(), j)).abs();
            // per-coordinate spread: class means +-2 plus unit noise
            let sigma = if j == 0 { (4.0f64 + 1.0).sqrt() } else { 1.0 };
            assert!(gap <= 3.0 * sigma / (2000f64).sqrt(), "coordinate {j}: gap {gap}");
        }
    }

    #[test]
    fn rotation_moves_target() {
        let s = ShiftScenario {
            translation: vec![0.0, 0.0],
            rotation: std::f64::consts::PI,
            ..small(1)
        };
        let data = generate_scenario(&s).unwrap();
        // class 0 sits at (-2, 0) in the source and at (2, 0) after a half turn
        let x0: Vec<f64> = data
            .target_test
            .features()
            .rows()
            .zip(data.target_test.labels())
            .filter(|(_, &l)| l == 0)
            .map(|(r, _)| r[0])
            .collect();
        assert!(x0.iter().sum::<f64>() / x0.len() as f64 > 1.5);
    }

    #[test]
    fn scenario_validation() {
        assert!(generate_scenario(&ShiftScenario { n_target_test: 19, ..small(0) }).is_err());
        assert!(generate_scenario(&ShiftScenario { translation: vec![1.0], ..small(0) }).is_err());
        assert!(generate_scenario(&ShiftScenario { noise_std: 0.0, ..small(0) }).is_err());
        let json = serde_json::to_string(&small(0)).unwrap();
        let back: ShiftScenario = serde_json::from_str(&json).unwrap();
        assert_eq!(back, small(0));
    }

    #[test]
    fn zero_delta_is_identity() {
        let p = ProportionSpec::new(vec![0.2, 0.8]).unwrap();
        assert_eq!(perturb_proportions(&p, 0.0, 1.0, 4).unwrap(), p);
    }

    #[test]
    fn two_classes_have_two_perturbations() {
        let p = ProportionSpec::new(vec![0.5, 0.5]).unwrap();
        let mut seen = [false; 2];
        for seed in 0..50 {
            let q = perturb_proportions(&p, 0.1, 1.0, seed).unwrap();
            let q = q.as_slice();
            if (q[0] - 0.55).abs() < 1e-12 && (q[1] - 0.45).abs() < 1e-12 {
                seen[0] = true;
            } else if (q[0] - 0.45).abs() < 1e-12 && (q[1] - 0.55).abs() < 1e-12 {
                seen[1] = true;
            } else {
                panic!("unexpected perturbation {q:?}");
            }
        }
        assert_eq!(seen, [true, true]);
    }

    #[test]
    fn imbalanced_four_class_perturbations_are_exact() {
        let p = ProportionSpec::new(vec![0.5414, 0.2707, 0.1112, 0.0767]).unwrap();
        for seed in 0..1000 {
            let q = perturb_proportions(&p, 0.05, 1.0, seed).unwrap();
            assert!((p.l1_distance(&q) - 0.05).abs() <= 1e-9);
            assert!((q.as_slice().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!(q.as_slice().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn infeasible_delta_errors() {
        let p = ProportionSpec::new(vec![1.0, 0.0]).unwrap();
        assert!(perturb_proportions(&p, 2.5, 1.0, 0).is_err());
        assert!(perturb_proportions(&p, -0.1, 1.0, 0).is_err());
        assert!(perturb_proportions(&ProportionSpec::uniform(1).unwrap(), 0.1, 1.0, 0).is_err());
    }

    #[test]
    fn csv_layout() {
        let t = SweepTable {
            rows: vec![SweepRow {
                delta: 0.05,
                repeat: 1,
                seed: 7,
                accuracy: 0.5,
                mrecall: 0.25,
                mprecision: 1.0,
                mf1: 0.75,
            }],
        };
        assert_eq!(
            t.to_csv(),
            "delta,repeat,seed,accuracy,mrecall,mprecision,mf1\n0.05,1,7,0.5,0.25,1,0.75\n"
        );
        assert_eq!(t.summary()[0].median_mf1, 0.75);
        assert_eq!(median(&[3.0, 1.0, 2.0, 10.0]), 2.5);
    }

    #[test]
    fn sweep_requires_clean_reference() {
        let plan = SweepPlan { deltas: vec![0.1], repeats: 1, alpha: 1.0 };
        assert!(noise_sweep(&small(0), &Architecture::default(), &AdaptConfig::default(), &plan).is_err());
    }

    #[test]
    fn large_translation_hurts_source_classifier() {
        let s = ShiftScenario {
            translation: vec![5.0, 0.0],
            target_proportions: ProportionSpec::new(vec![0.5, 0.5]).unwrap(),
            ..small(2)
        };
        let data = generate_scenario(&s).unwrap();
        let (model, _) = pretrain_on(&data, &canonical_architecture(), &canonical_config(2)).unwrap();
        let src = evaluate_model(&model, &data.source).unwrap().accuracy;
        let tgt = evaluate_model(&model, &data.target_test).unwrap().accuracy;
        assert!(src - tgt >= 0.2, "source {src}, target {tgt}");
    }

    #[test]
    fn canonical_nearest_centroid_misses_counts() {
        use crate::adapt::{nearest_centroid_epoch, pseudo_label_epoch, CentroidSource};
        let s = ShiftScenario::canonical(0);
        let data = generate_scenario(&s).unwrap();
        let (model, _) = pretrain_on(&data, &canonical_architecture(), &canonical_config(0)).unwrap();
        let counts = proportions_to_counts(&s.target_proportions, data.target_train.len());
        let nc = nearest_centroid_epoch(&model, &data.source, &data.target_train, CentroidSource::Recompute).unwrap();
        let nc_counts = crate::types::class_counts(&nc.class_of, 2).unwrap();
        assert!(nc_counts.l1_distance(&counts) > 0);
        let pc = pseudo_label_epoch(&model, &data.source, &data.target_train, &counts, CentroidSource::Recompute).unwrap();
        assert_eq!(pc.counts, counts);
    }
}
