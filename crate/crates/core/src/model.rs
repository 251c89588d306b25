//! Feed-forward classifier with hand-derived gradients.
//!
//! A [`Classifier`] is an MLP feature extractor followed by a linear softmax
//! head. The extractor may have zero layers, in which case features are the
//! raw inputs (useful when features come from an external backbone).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{FeatureMatrix, LabeledDataset, ProportionSpec};

/// Lower clamp for arguments of `ln` in the losses.
pub const LOG_CLAMP: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Softplus,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Softplus => z.max(0.0) + (-z.abs()).exp().ln_1p(),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative at pre-activation `z`, given `a = apply(z)`.
    #[inline]
    pub fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => 1.0 / (1.0 + (-z).exp()),
            Activation::Tanh => 1.0 - a * a,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Softplus => 2,
            Activation::Tanh => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => Activation::Identity,
            1 => Activation::Relu,
            2 => Activation::Softplus,
            3 => Activation::Tanh,
            _ => return None,
        })
    }
}

/// Affine layer `act(W x + b)`; `weight` is `rows x cols` row-major with
/// `rows` outputs and `cols` inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    /// Weights uniform in `±1/sqrt(cols)`, zero bias.
    pub fn init<R: Rng>(rows: usize, cols: usize, activation: Activation, rng: &mut R) -> Self {
        let bound = 1.0 / (cols as f64).sqrt();
        Self {
            rows,
            cols,
            weight: (0..rows * cols)
                .map(|_| rng.random_range(-bound..bound))
                .collect(),
            bias: vec![0.0; rows],
            activation,
        }
    }

    pub fn zeros(rows: usize, cols: usize, activation: Activation) -> Self {
        Self {
            rows,
            cols,
            weight: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
            activation,
        }
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .chunks_exact(self.cols)
            .zip(&self.bias)
            .map(|(w, b)| w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect()
    }

    fn check(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::validation("layer dimensions must be positive"));
        }
        if self.weight.len() != self.rows * self.cols || self.bias.len() != self.rows {
            return Err(Error::validation(format!(
                "layer {}x{} has {} weights and {} biases",
                self.rows,
                self.cols,
                self.weight.len(),
                self.bias.len()
            )));
        }
        if self.weight.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::validation("non-finite layer parameter"));
        }
        Ok(())
    }
}

/// Layer widths and activation for building a fresh [`Classifier`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    /// Extractor widths; the last one is the feature dimension. Empty means
    /// the identity extractor.
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            hidden: vec![64, 32],
            activation: Activation::Softplus,
        }
    }
}

impl Architecture {
    pub fn build(&self, input_dim: usize, num_classes: usize, seed: u64) -> Result<Classifier> {
        Classifier::new(input_dim, &self.hidden, num_classes, self.activation, seed)
    }
}

/// Output of a single forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Forward {
    pub features: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Per-sample intermediate values kept for backpropagation.
#[derive(Clone, Debug)]
pub struct BatchTrace {
    // inputs[l] is the input of extractor layer l; inputs[L] holds the features
    inputs: Vec<Vec<Vec<f64>>>,
    pre: Vec<Vec<Vec<f64>>>,
    pub logits: Vec<Vec<f64>>,
    pub probs: Vec<Vec<f64>>,
}

impl BatchTrace {
    pub fn features(&self) -> &[Vec<f64>] {
        self.inputs.last().expect("trace always holds the input layer")
    }
}

/// Gradient tensors in [`Classifier::params`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    extractor: Vec<Dense>,
    head: Dense,
    seed: u64,
}

impl Classifier {
    /// MLP `input_dim -> hidden[0] -> ... -> hidden[last]` followed by a
    /// linear head to `num_classes` logits. The last hidden width is the
    /// feature dimension; an empty `hidden` gives the identity extractor.
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        num_classes: usize,
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || num_classes == 0 || hidden.contains(&0) {
            return Err(Error::validation("layer widths must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut extractor = Vec::with_capacity(hidden.len());
        let mut width = input_dim;
        for &h in hidden {
            extractor.push(Dense::init(h, width, activation, &mut rng));
            width = h;
        }
        let head = Dense::init(num_classes, width, Activation::Identity, &mut rng);
        Ok(Self {
            extractor,
            head,
            seed,
        })
    }

    /// No extractor layers: features equal inputs.
    pub fn identity(dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        Self::new(dim, &[], num_classes, Activation::Identity, seed)
    }

    pub fn from_layers(extractor: Vec<Dense>, head: Dense, seed: u64) -> Result<Self> {
        for layer in extractor.iter().chain(std::iter::once(&head)) {
            layer.check()?;
        }
        for (i, pair) in extractor
            .iter()
            .chain(std::iter::once(&head))
            .collect::<Vec<_>>()
            .windows(2)
            .enumerate()
        {
            if pair[0].rows != pair[1].cols {
                return Err(Error::validation(format!(
                    "layer {i} outputs {} values but layer {} expects {}",
                    pair[0].rows,
                    i + 1,
                    pair[1].cols
                )));
            }
        }
        Ok(Self {
            extractor,
            head,
            seed,
        })
    }

    pub fn extractor(&self) -> &[Dense] {
        &self.extractor
    }

    pub fn head(&self) -> &Dense {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut Dense {
        &mut self.head
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.extractor.first().unwrap_or(&self.head).cols
    }

    pub fn feature_dim(&self) -> usize {
        self.head.cols
    }

    pub fn num_classes(&self) -> usize {
        self.head.rows
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::validation(format!(
                "input has dimension {}, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut a = x.to_vec();
        for layer in &self.extractor {
            a = layer
                .affine(&a)
                .into_iter()
                .map(|z| layer.activation.apply(z))
                .collect();
        }
        Ok(a)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Forward> {
        let features = self.features(x)?;
        let probs = softmax(&self.head.affine(&features));
        Ok(Forward { features, probs })
    }

    /// Extractor output for every row.
    pub fn extract(&self, m: &FeatureMatrix) -> Result<FeatureMatrix> {
        if m.d() != self.input_dim() {
            return Err(Error::validation(format!(
                "features have dimension {}, model expects {}",
                m.d(),
                self.input_dim()
            )));
        }
        let mut data = Vec::with_capacity(m.n() * self.feature_dim());
        for row in m.rows() {
            data.extend(self.features(row)?);
        }
        FeatureMatrix::new(m.n(), self.feature_dim(), data)
    }

    pub fn predict_proba(&self, m: &FeatureMatrix) -> Result<Vec<Vec<f64>>> {
        m.rows().map(|r| Ok(self.forward(r)?.probs)).collect()
    }

    /// Argmax class per row, ties to the lowest index.
    pub fn predict(&self, m: &FeatureMatrix) -> Result<Vec<usize>> {
        Ok(self.predict_proba(m)?.iter().map(|p| argmax(p)).collect())
    }

    pub fn forward_batch(&self, inputs: &[&[f64]]) -> Result<BatchTrace> {
        let mut trace = BatchTrace {
            inputs: vec![Vec::with_capacity(inputs.len()); self.extractor.len() + 1],
            pre: vec![Vec::with_capacity(inputs.len()); self.extractor.len()],
            logits: Vec::with_capacity(inputs.len()),
            probs: Vec::with_capacity(inputs.len()),
        };
        for x in inputs {
            self.check_input(x)?;
            let mut a = x.to_vec();
            for (l, layer) in self.extractor.iter().enumerate() {
                let z = layer.affine(&a);
                let next = z.iter().map(|&z| layer.activation.apply(z)).collect();
                trace.inputs[l].push(a);
                trace.pre[l].push(z);
                a = next;
            }
            let logits = self.head.affine(&a);
            trace.probs.push(softmax(&logits));
            trace.logits.push(logits);
            trace.inputs[self.extractor.len()].push(a);
        }
        Ok(trace)
    }

    /// Backpropagates per-sample logit gradients through the network. The
    /// result is summed over the batch; loss functions already fold in any
    /// `1/batch` factor.
    pub fn backward(&self, trace: &BatchTrace, grad_logits: &[Vec<f64>]) -> Gradients {
        let depth = self.extractor.len();
        let mut grads: Vec<(Vec<f64>, Vec<f64>)> = self
            .extractor
            .iter()
            .chain(std::iter::once(&self.head))
            .map(|l| (vec![0.0; l.weight.len()], vec![0.0; l.bias.len()]))
            .collect();

        for (s, g_out) in grad_logits.iter().enumerate() {
            let feats = &trace.inputs[depth][s];
            let (gw, gb) = &mut grads[depth];
            accumulate_outer(gw, gb, g_out, feats);
            let mut g_a = transpose_mul(&self.head, g_out);

            for l in (0..depth).rev() {
                let layer = &self.extractor[l];
                let z = &trace.pre[l][s];
                let a = &trace.inputs[l + 1][s];
                let g_z: Vec<f64> = g_a
                    .iter()
                    .zip(z)
                    .zip(a)
                    .map(|((g, &z), &a)| g * layer.activation.derivative(z, a))
                    .collect();
                let (gw, gb) = &mut grads[l];
                accumulate_outer(gw, gb, &g_z, &trace.inputs[l][s]);
                if l > 0 {
                    g_a = transpose_mul(layer, &g_z);
                }
            }
        }
        Gradients(
            grads
                .into_iter()
                .flat_map(|(w, b)| [w, b])
                .collect(),
        )
    }

    /// Parameter tensors: weight then bias of each extractor layer, then the head.
    pub fn params(&self) -> Vec<&[f64]> {
        self.extractor
            .iter()
            .chain(std::iter::once(&self.head))
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.extractor
            .iter_mut()
            .chain(std::iter::once(&mut self.head))
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }
}

fn accumulate_outer(gw: &mut [f64], gb: &mut [f64], g: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, &gr) in g.iter().enumerate() {
        gb[r] += gr;
        for (w, xv) in gw[r * cols..(r + 1) * cols].iter_mut().zip(x) {
            *w += gr * xv;
        }
    }
}

fn transpose_mul(layer: &Dense, g: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; layer.cols];
    for (row, &gr) in layer.weight.chunks_exact(layer.cols).zip(g) {
        for (o, w) in out.iter_mut().zip(row) {
            *o += w * gr;
        }
    }
    out
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Max-subtracted softmax. Entries are floored at the smallest positive
/// normal so no probability is exactly zero.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter()
        .map(|e| (e / sum).max(f64::MIN_POSITIVE))
        .collect()
}

fn check_batch(probs: &[Vec<f64>]) -> Result<usize> {
    let k = probs.first().map(Vec::len).unwrap_or(0);
    if probs.is_empty() || k == 0 {
        return Err(Error::validation("empty probability batch"));
    }
    if probs.iter().any(|p| p.len() != k) {
        return Err(Error::validation("ragged probability batch"));
    }
    Ok(k)
}

/// Mean negative log-likelihood of the labels and its gradient with respect
/// to the logits, `(probs - onehot) / batch`.
pub fn cross_entropy_loss(probs: &[Vec<f64>], labels: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
    let k = check_batch(probs)?;
    if labels.len() != probs.len() {
        return Err(Error::validation(format!(
            "{} labels for a batch of {}",
            labels.len(),
            probs.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::validation(format!("label {l} out of range for {k} classes")));
    }
    let b = probs.len() as f64;
    let loss = -probs
        .iter()
        .zip(labels)
        .map(|(p, &l)| p[l].max(LOG_CLAMP).ln())
        .sum::<f64>()
        / b;
    let grad = probs
        .iter()
        .zip(labels)
        .map(|(p, &l)| {
            p.iter()
                .enumerate()
                .map(|(c, &pc)| (pc - if c == l { 1.0 } else { 0.0 }) / b)
                .collect()
        })
        .collect();
    Ok((loss, grad))
}

/// Cross-entropy between the target proportions and the batch-mean
/// prediction, `-sum_c p_c ln(mean_c + 1e-8)`, with its logit gradient.
pub fn proportion_loss(probs: &[Vec<f64>], p: &ProportionSpec) -> Result<(f64, Vec<Vec<f64>>)> {
    let k = check_batch(probs)?;
    if p.num_classes() != k {
        return Err(Error::validation(format!(
            "{} proportions for {k} classes",
            p.num_classes()
        )));
    }
    let b = probs.len() as f64;
    let mut mean = vec![0.0; k];
    for row in probs {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= b);

    let target = p.as_slice();
    let loss = -target
        .iter()
        .zip(&mean)
        .map(|(t, m)| t * (m + LOG_CLAMP).ln())
        .sum::<f64>();
    // dL/d(prob_ic) = g_c / b with g_c = -p_c / (mean_c + eps)
    let g: Vec<f64> = target
        .iter()
        .zip(&mean)
        .map(|(t, m)| -t / (m + LOG_CLAMP))
        .collect();
    let grad = probs
        .iter()
        .map(|s| {
            let dot: f64 = g.iter().zip(s).map(|(g, s)| g * s).sum();
            s.iter().zip(&g).map(|(s, g)| s * (g - dot) / b).collect()
        })
        .collect();
    Ok((loss, grad))
}

/// Adam with bias correction. Moment buffers are created on the first step
/// to mirror the parameter shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &Gradients) -> Result<()> {
        let grads = &grads.0;
        if grads.len() != params.len()
            || params.iter().zip(grads).any(|(p, g)| p.len() != g.len())
        {
            return Err(Error::validation("gradient shapes do not match parameters"));
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite gradient at optimizer step {}",
                self.step + 1
            )));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != grads.len()
            || self.m.iter().zip(grads).any(|(m, g)| m.len() != g.len())
        {
            return Err(Error::validation("optimizer state shape does not match parameters"));
        }

        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub balanced: bool,
    pub source_fraction: f64,
    pub seed: u64,
}

impl Default for BatchPlan {
    fn default() -> Self {
        Self {
            batch_size: 64,
            balanced: true,
            source_fraction: 0.5,
            seed: 0,
        }
    }
}

/// Draws indices by picking a non-empty class uniformly, then a member of
/// that class uniformly, with replacement.
#[derive(Clone, Debug)]
pub struct ClassSampler {
    members: Vec<Vec<usize>>,
}

impl ClassSampler {
    pub fn new(labels: &[usize], num_classes: usize) -> Result<Self> {
        let mut members = vec![Vec::new(); num_classes];
        for (i, &l) in labels.iter().enumerate() {
            members
                .get_mut(l)
                .ok_or_else(|| Error::validation(format!("label {l} out of range")))?
                .push(i);
        }
        members.retain(|m| !m.is_empty());
        if members.is_empty() {
            return Err(Error::validation("every class is empty"));
        }
        Ok(Self { members })
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> usize {
        let class = &self.members[rng.random_range(0..self.members.len())];
        class[rng.random_range(0..class.len())]
    }
}

/// One epoch of index batches: `ceil(N / batch_size)` batches.
///
/// Balanced plans oversample with [`ClassSampler`] and every batch is full;
/// unbalanced plans walk a shuffled permutation, so the last batch may be short.
pub fn balanced_batches(ds: &LabeledDataset, plan: &BatchPlan) -> Result<Vec<Vec<usize>>> {
    if plan.batch_size == 0 {
        return Err(Error::validation("batch_size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let n = ds.len();
    let batches = n.div_ceil(plan.batch_size);
    if plan.balanced {
        let sampler = ClassSampler::new(ds.labels(), ds.num_classes())?;
        Ok((0..batches)
            .map(|_| (0..plan.batch_size).map(|_| sampler.draw(&mut rng)).collect())
            .collect())
    } else {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Ok(order.chunks(plan.batch_size).map(<[usize]>::to_vec).collect())
    }
}
