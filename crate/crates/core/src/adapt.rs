//! Source pre-training and the proportion-constrained adaptation loop.
//!
//! Each adaptation epoch:
//! 1. extracts target features with the current network,
//! 2. assigns pseudo-labels by solving the count-constrained assignment
//!    against source class centroids,
//! 3. makes one pass of class-balanced mixed source/target batches with
//!    cross-entropy on source labels and target pseudo-labels.
//!
//! Validation macro-F1 drives early stopping; the returned network is the
//! best one seen, including the starting point.

use rand::SeedableRng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::model::{cross_entropy_loss, proportion_loss, Adam, Classifier, ClassSampler};
use crate::solver::{build_cost_matrix, nearest_centroid_assignment, solve_assignment};
use crate::types::{
    class_counts, compute_centroids, proportions_to_counts, Assignment, Centroids, CountVector,
    LabeledDataset, ProportionSpec, UnlabeledDataset,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub pretrain_lr: f64,
    pub adapt_lr: f64,
    pub batch_size: usize,
    /// Recompute source centroids under the current extractor every epoch.
    /// When false, the centroids from the starting network are reused.
    pub recompute_centroids: bool,
    pub source_fraction: f64,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            max_epochs: 100,
            patience: 20,
            pretrain_lr: 1e-5,
            adapt_lr: 1e-6,
            batch_size: 64,
            recompute_centroids: true,
            source_fraction: 0.5,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs > 0 && self.patience > self.max_epochs {
            return Err(Error::validation(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if !(self.pretrain_lr > 0.0 && self.pretrain_lr.is_finite())
            || !(self.adapt_lr > 0.0 && self.adapt_lr.is_finite())
        {
            return Err(Error::validation("learning rates must be positive and finite"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.source_fraction) {
            return Err(Error::validation("source_fraction must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// How target pseudo-supervision is produced during adaptation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Count-constrained assignment to source centroids.
    ProportionConstrained,
    /// Each target sample takes its nearest source centroid.
    NearestCentroid,
    /// No pseudo-labels; target batches are pulled toward the known proportions.
    ProportionLoss,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub accuracy: f64,
    pub mrecall: f64,
    pub mprecision: f64,
    pub mf1: f64,
}

impl From<&MetricsReport> for Scores {
    fn from(m: &MetricsReport) -> Self {
        Self {
            accuracy: m.accuracy,
            mrecall: m.mrecall,
            mprecision: m.mprecision,
            mf1: m.mf1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub assignment_cost: Option<f64>,
    pub train_loss: f64,
    pub val: Scores,
    pub pseudo_counts: Option<CountVector>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub method: Method,
    pub target_counts: CountVector,
    pub initial_val: Scores,
    pub epochs: Vec<EpochRecord>,
    /// 0 when no epoch improved on the starting network.
    pub best_epoch: usize,
    pub final_assignment: Option<Assignment>,
    /// Filled by callers that hold a labeled target test split.
    pub test_metrics: Option<MetricsReport>,
}

/// Per-epoch pre-training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainHistory {
    pub initial_val: Scores,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

pub fn evaluate_model(model: &Classifier, ds: &LabeledDataset) -> Result<MetricsReport> {
    let pred = model.predict(ds.features())?;
    evaluate(ds.labels(), &pred, ds.num_classes())
}

fn check_compatible(model: &Classifier, sets: &[(&str, usize, usize)]) -> Result<()> {
    for &(name, dim, classes) in sets {
        if dim != model.input_dim() {
            return Err(Error::validation(format!(
                "{name} features have dimension {dim}, model expects {}",
                model.input_dim()
            )));
        }
        if classes != model.num_classes() {
            return Err(Error::validation(format!(
                "{name} has {classes} classes, model has {}",
                model.num_classes()
            )));
        }
    }
    Ok(())
}

/// Tracks the best validation macro-F1 and the patience counter.
struct EarlyStopping {
    best_mf1: f64,
    best_epoch: usize,
    best_model: Classifier,
    stale: usize,
    patience: usize,
}

impl EarlyStopping {
    fn new(model: &Classifier, initial: f64, patience: usize) -> Self {
        Self {
            best_mf1: initial,
            best_epoch: 0,
            best_model: model.clone(),
            stale: 0,
            patience,
        }
    }

    /// Returns true when training should stop.
    fn observe(&mut self, epoch: usize, mf1: f64, model: &Classifier) -> bool {
        if mf1 > self.best_mf1 {
            self.best_mf1 = mf1;
            self.best_epoch = epoch;
            self.best_model = model.clone();
            self.stale = 0;
            false
        } else {
            self.stale += 1;
            self.stale >= self.patience
        }
    }
}

/// One forward/backward/Adam step; returns the batch loss.
fn train_step(
    model: &mut Classifier,
    opt: &mut Adam,
    inputs: &[&[f64]],
    loss: impl FnOnce(&[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)>,
) -> Result<f64> {
    let trace = model.forward_batch(inputs)?;
    let (value, grad_logits) = loss(&trace.probs)?;
    if !value.is_finite() {
        return Err(Error::Training(format!("non-finite loss {value}")));
    }
    let grads = model.backward(&trace, &grad_logits);
    opt.step(&mut model.params_mut(), &grads)?;
    Ok(value)
}

/// Supervised training on the source domain with class-balanced batches.
///
/// Returns the parameters with the best validation macro-F1 (the initial
/// network counts as epoch 0).
pub fn pretrain(
    model: &Classifier,
    source: &LabeledDataset,
    val: &LabeledDataset,
    cfg: &AdaptConfig,
) -> Result<(Classifier, PretrainHistory)> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::validation("source dataset is empty"));
    }
    check_compatible(
        model,
        &[
            ("source", source.features().d(), source.num_classes()),
            ("validation", val.features().d(), val.num_classes()),
        ],
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sampler = ClassSampler::new(source.labels(), source.num_classes())?;
    let mut opt = Adam::new(cfg.pretrain_lr);
    let mut net = model.clone();
    let initial_val = Scores::from(&evaluate_model(&net, val)?);
    let mut stopper = EarlyStopping::new(&net, initial_val.mf1, cfg.patience);
    let mut epochs = Vec::new();
    let steps = source.len().div_ceil(cfg.batch_size);

    for epoch in 1..=cfg.max_epochs {
        let mut loss_sum = 0.0;
        for _ in 0..steps {
            let idx: Vec<usize> = (0..cfg.batch_size).map(|_| sampler.draw(&mut rng)).collect();
            let inputs: Vec<&[f64]> = idx.iter().map(|&i| source.features().row(i)).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| source.labels()[i]).collect();
            loss_sum += train_step(&mut net, &mut opt, &inputs, |p| cross_entropy_loss(p, &labels))
                .map_err(|e| e.at_epoch(epoch))?;
        }
        let val_scores = Scores::from(&evaluate_model(&net, val)?);
        epochs.push(EpochRecord {
            epoch,
            assignment_cost: None,
            train_loss: loss_sum / steps as f64,
            val: val_scores,
            pseudo_counts: None,
        });
        if stopper.observe(epoch, val_scores.mf1, &net) {
            break;
        }
    }

    Ok((
        stopper.best_model,
        PretrainHistory {
            initial_val,
            epochs,
            best_epoch: stopper.best_epoch,
        },
    ))
}

/// Where the source centroids for an epoch come from.
#[derive(Clone, Copy, Debug)]
pub enum CentroidSource<'a> {
    /// Source features re-extracted with the current network.
    Recompute,
    /// A fixed table, e.g. computed once from the starting network.
    Fixed(&'a Centroids),
}

/// Source centroids in the feature space of `model`.
pub fn source_centroids(model: &Classifier, source: &LabeledDataset) -> Result<Centroids> {
    let feats = model.extract(source.features())?;
    Ok(compute_centroids(&LabeledDataset::new(
        feats,
        source.labels().to_vec(),
        source.num_classes(),
    )?))
}

fn target_costs(
    model: &Classifier,
    source: &LabeledDataset,
    target: &UnlabeledDataset,
    centroids: CentroidSource<'_>,
) -> Result<crate::solver::CostMatrix> {
    let target_feats = model.extract(target.features())?;
    match centroids {
        CentroidSource::Recompute => {
            build_cost_matrix(&target_feats, &source_centroids(model, source)?)
        }
        CentroidSource::Fixed(c) => build_cost_matrix(&target_feats, c),
    }
}

/// Pseudo-labels for the whole target set under the current network.
pub fn pseudo_label_epoch(
    model: &Classifier,
    source: &LabeledDataset,
    target: &UnlabeledDataset,
    counts: &CountVector,
    centroids: CentroidSource<'_>,
) -> Result<Assignment> {
    if counts.total() != target.len() {
        return Err(Error::Infeasible(format!(
            "class counts sum to {}, target has {} samples",
            counts.total(),
            target.len()
        )));
    }
    let costs = target_costs(model, source, target, centroids)?;
    solve_assignment(&costs, counts)
}

/// Unconstrained counterpart of [`pseudo_label_epoch`].
pub fn nearest_centroid_epoch(
    model: &Classifier,
    source: &LabeledDataset,
    target: &UnlabeledDataset,
    centroids: CentroidSource<'_>,
) -> Result<Assignment> {
    Ok(nearest_centroid_assignment(&target_costs(
        model, source, target, centroids,
    )?))
}

/// Adaptation with proportion-constrained pseudo-labels.
pub fn adapt(
    model: &Classifier,
    source: &LabeledDataset,
    target: &UnlabeledDataset,
    target_val: &LabeledDataset,
    p: &ProportionSpec,
    cfg: &AdaptConfig,
) -> Result<(Classifier, AdaptReport)> {
    adapt_with(Method::ProportionConstrained, model, source, target, target_val, p, cfg)
}

/// Fine-tuning where target batches are trained with the proportion loss
/// against the overall target proportions.
pub fn adapt_proportion_loss_baseline(
    model: &Classifier,
    source: &LabeledDataset,
    target: &UnlabeledDataset,
    target_val: &LabeledDataset,
    p: &ProportionSpec,
    cfg: &AdaptConfig,
) -> Result<(Classifier, AdaptReport)> {
    adapt_with(Method::ProportionLoss, model, source, target, target_val, p, cfg)
}

/// Self-training with unconstrained nearest-centroid pseudo-labels.
pub fn adapt_nearest_centroid_baseline(
    model: &Classifier,
    source: &LabeledDataset,
    target: &UnlabeledDataset,
    target_val: &LabeledDataset,
    p: &ProportionSpec,
    cfg: &AdaptConfig,
) -> Result<(Classifier, AdaptReport)> {
    adapt_with(Method::NearestCentroid, model, source, target, target_val, p, cfg)
}

pub fn adapt_with(
    method: Method,
    model: &Classifier,
    source: &LabeledDataset,
    target: &UnlabeledDataset,
    target_val: &LabeledDataset,
    p: &ProportionSpec,
    cfg: &AdaptConfig,
) -> Result<(Classifier, AdaptReport)> {
    cfg.validate()?;
    check_compatible(
        model,
        &[
            ("source", source.features().d(), source.num_classes()),
            ("target", target.features().d(), target.num_classes()),
            ("target validation", target_val.features().d(), target_val.num_classes()),
        ],
    )?;
    if p.num_classes() != target.num_classes() {
        return Err(Error::validation(format!(
            "{} proportions for {} target classes",
            p.num_classes(),
            target.num_classes()
        )));
    }

    let k = target.num_classes();
    let target_counts = proportions_to_counts(p, target.len());
    let fixed = if cfg.recompute_centroids {
        None
    } else {
        Some(source_centroids(model, source)?)
    };
    let centroid_source = || match &fixed {
        Some(c) => CentroidSource::Fixed(c),
        None => CentroidSource::Recompute,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let source_sampler = ClassSampler::new(source.labels(), source.num_classes())?;
    let mut opt = Adam::new(cfg.adapt_lr);
    let mut net = model.clone();
    let initial_val = Scores::from(&evaluate_model(&net, target_val)?);
    let mut stopper = EarlyStopping::new(&net, initial_val.mf1, cfg.patience);
    let mut epochs = Vec::new();
    let mut final_assignment = None;

    let steps = (source.len() + target.len()).div_ceil(cfg.batch_size);
    let n_src = (cfg.source_fraction * cfg.batch_size as f64).round() as usize;
    let n_tgt = cfg.batch_size - n_src;

    for epoch in 1..=cfg.max_epochs {
        let assignment = match method {
            Method::ProportionConstrained => Some(pseudo_label_epoch(
                &net,
                source,
                target,
                &target_counts,
                centroid_source(),
            )),
            Method::NearestCentroid => Some(nearest_centroid_epoch(
                &net,
                source,
                target,
                centroid_source(),
            )),
            Method::ProportionLoss => None,
        }
        .transpose()
        .map_err(|e| e.at_epoch(epoch))?;

        let target_sampler = match &assignment {
            Some(a) => Some(ClassSampler::new(&a.class_of, k)?),
            None => None,
        };

        let mut loss_sum = 0.0;
        for _ in 0..steps {
            let src: Vec<usize> = (0..n_src).map(|_| source_sampler.draw(&mut rng)).collect();
            let tgt: Vec<usize> = (0..n_tgt)
                .map(|_| match &target_sampler {
                    Some(s) => s.draw(&mut rng),
                    None => rng.random_range(0..target.len()),
                })
                .collect();
            let inputs: Vec<&[f64]> = src
                .iter()
                .map(|&i| source.features().row(i))
                .chain(tgt.iter().map(|&j| target.features().row(j)))
                .collect();

            let step_loss = match &assignment {
                Some(a) => {
                    let labels: Vec<usize> = src
                        .iter()
                        .map(|&i| source.labels()[i])
                        .chain(tgt.iter().map(|&j| a.class_of[j]))
                        .collect();
                    train_step(&mut net, &mut opt, &inputs, |probs| {
                        cross_entropy_loss(probs, &labels)
                    })
                }
                None => {
                    let labels: Vec<usize> = src.iter().map(|&i| source.labels()[i]).collect();
                    train_step(&mut net, &mut opt, &inputs, |probs| {
                        let (src_probs, tgt_probs) = probs.split_at(n_src);
                        let (mut loss, mut grad) = (0.0, Vec::with_capacity(probs.len()));
                        if n_src > 0 {
                            let (l, g) = cross_entropy_loss(src_probs, &labels)?;
                            loss += l;
                            grad.extend(g);
                        }
                        if n_tgt > 0 {
                            let (l, g) = proportion_loss(tgt_probs, p)?;
                            loss += l;
                            grad.extend(g);
                        }
                        Ok((loss, grad))
                    })
                }
            };
            loss_sum += step_loss.map_err(|e| e.at_epoch(epoch))?;
        }

        let val_scores = Scores::from(&evaluate_model(&net, target_val)?);
        let pseudo_counts = match &assignment {
            Some(a) => Some(class_counts(&a.class_of, k)?),
            None => None,
        };
        epochs.push(EpochRecord {
            epoch,
            assignment_cost: assignment.as_ref().map(|a| a.total_cost),
            train_loss: loss_sum / steps as f64,
            val: val_scores,
            pseudo_counts,
        });
        final_assignment = assignment;
        if stopper.observe(epoch, val_scores.mf1, &net) {
            break;
        }
    }

    Ok((
        stopper.best_model,
        AdaptReport {
            method,
            target_counts,
            initial_val,
            epochs,
            best_epoch: stopper.best_epoch,
            final_assignment,
            test_metrics: None,
        },
    ))
}
