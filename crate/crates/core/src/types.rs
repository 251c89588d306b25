//! Domain types shared across the crate.
//!
//! Every type validates its invariants at construction and is immutable
//! afterwards, so values can be shared freely between threads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `|sum(p) - 1|` for a valid proportion vector.
pub const PROPORTION_SUM_TOLERANCE: f64 = 1e-6;

/// Dense `n x d` matrix of finite features, row-major. Row `i` is sample `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::validation(format!(
                "feature matrix must be non-empty, got {n}x{d}"
            )));
        }
        let expected = n
            .checked_mul(d)
            .ok_or_else(|| Error::validation("feature matrix size overflows"))?;
        if data.len() != expected {
            return Err(Error::validation(format!(
                "feature matrix {n}x{d} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "non-finite feature at row {}, column {}",
                pos / d,
                pos % d
            )));
        }
        Ok(Self { n, d, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if let Some(i) = rows.iter().position(|r| r.len() != d) {
            return Err(Error::validation(format!(
                "row {i} has {} columns, expected {d}",
                rows[i].len()
            )));
        }
        Self::new(rows.len(), d, rows.concat())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.d)
    }

    /// New matrix holding the given rows, in order. Indices may repeat.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.d);
        for &i in indices {
            if i >= self.n {
                return Err(Error::validation(format!(
                    "row index {i} out of range for {} rows",
                    self.n
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Self::new(indices.len(), self.d, data)
    }
}

/// Features with one class id per row.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    features: FeatureMatrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(features: FeatureMatrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::validation("num_classes must be at least 1"));
        }
        if labels.len() != features.n() {
            return Err(Error::validation(format!(
                "{} labels for {} feature rows",
                labels.len(),
                features.n()
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::validation(format!(
                "label {l} at row {i} is not below num_classes {num_classes}"
            )));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn features(&self) -> &FeatureMatrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> CountVector {
        // labels were validated on construction
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        CountVector(counts)
    }

    /// Drops the labels, keeping the class count.
    pub fn to_unlabeled(&self) -> UnlabeledDataset {
        UnlabeledDataset {
            features: self.features.clone(),
            num_classes: self.num_classes,
        }
    }
}

/// Features without labels, for a known number of classes.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledDataset {
    features: FeatureMatrix,
    num_classes: usize,
}

impl UnlabeledDataset {
    pub fn new(features: FeatureMatrix, num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::validation("num_classes must be at least 1"));
        }
        Ok(Self {
            features,
            num_classes,
        })
    }

    pub fn features(&self) -> &FeatureMatrix {
        &self.features
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.features.n()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Fraction of samples per class.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ProportionSpec(Vec<f64>);

impl ProportionSpec {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::validation("proportion vector is empty"));
        }
        if let Some((c, v)) = p.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < 0.0) {
            return Err(Error::validation(format!(
                "proportion for class {c} is {v}, must be finite and non-negative"
            )));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > PROPORTION_SUM_TOLERANCE {
            return Err(Error::validation(format!(
                "proportions sum to {sum}, expected 1 within {PROPORTION_SUM_TOLERANCE}"
            )));
        }
        Ok(Self(p))
    }

    pub fn uniform(num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::validation("num_classes must be at least 1"));
        }
        Self::new(vec![1.0 / num_classes as f64; num_classes])
    }

    /// Empirical proportions of a count vector.
    pub fn from_counts(counts: &CountVector) -> Result<Self> {
        let total = counts.total();
        if total == 0 {
            return Err(Error::validation("cannot derive proportions from zero counts"));
        }
        Self::new(counts.iter().map(|&c| c as f64 / total as f64).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    /// L1 distance to another proportion vector of the same length.
    pub fn l1_distance(&self, other: &ProportionSpec) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .sum()
    }
}

impl<'de> Deserialize<'de> for ProportionSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = Vec::<f64>::deserialize(d)?;
        ProportionSpec::new(raw).map_err(serde::de::Error::custom)
    }
}

/// Integer number of samples per class.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CountVector(pub Vec<usize>);

impl CountVector {
    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, usize> {
        self.0.iter()
    }

    /// Sum of absolute per-class differences.
    pub fn l1_distance(&self, other: &CountVector) -> usize {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(&a, &b)| a.abs_diff(b))
            .sum()
    }
}

impl std::ops::Index<usize> for CountVector {
    type Output = usize;

    fn index(&self, c: usize) -> &usize {
        &self.0[c]
    }
}

/// One class id per sample together with the per-class counts and the
/// objective value it achieved against its cost matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub class_of: Vec<usize>,
    pub counts: CountVector,
    pub total_cost: f64,
}

impl Assignment {
    /// The equivalent binary `C x N` indicator matrix.
    pub fn indicator(&self) -> Vec<Vec<u8>> {
        let mut y = vec![vec![0u8; self.class_of.len()]; self.counts.num_classes()];
        for (j, &c) in self.class_of.iter().enumerate() {
            y[c][j] = 1;
        }
        y
    }
}

/// Per-class mean feature vectors. Classes without samples have a zero mean
/// and `present[c] == false`.
#[derive(Clone, Debug, PartialEq)]
pub struct Centroids {
    dim: usize,
    means: Vec<f64>,
    present: Vec<bool>,
}

impl Centroids {
    pub fn new(dim: usize, means: Vec<f64>, present: Vec<bool>) -> Result<Self> {
        if dim == 0 || means.len() != dim * present.len() {
            return Err(Error::validation(format!(
                "centroid table of {} values does not fit {} classes of dimension {dim}",
                means.len(),
                present.len()
            )));
        }
        if means.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("non-finite centroid coordinate"));
        }
        Ok(Self {
            dim,
            means,
            present,
        })
    }

    /// All classes present, one row per class.
    pub fn from_matrix(m: &FeatureMatrix) -> Self {
        Self {
            dim: m.d(),
            means: m.data().to_vec(),
            present: vec![true; m.n()],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.present.len()
    }

    pub fn mean(&self, c: usize) -> &[f64] {
        &self.means[c * self.dim..(c + 1) * self.dim]
    }

    pub fn is_present(&self, c: usize) -> bool {
        self.present[c]
    }

    pub fn present(&self) -> &[bool] {
        &self.present
    }
}

pub fn class_counts(labels: &[usize], num_classes: usize) -> Result<CountVector> {
    let mut counts = vec![0; num_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::validation(format!(
                "label {l} at position {i} is not below num_classes {num_classes}"
            )));
        }
        counts[l] += 1;
    }
    Ok(CountVector(counts))
}

/// Integer class counts summing to `n`, by largest-remainder rounding.
///
/// Each class gets `floor(p_c * n)`; the leftover units go one each to the
/// classes with the largest fractional parts. Fractional parts are compared
/// after quantizing to 1e-9 so that values equal up to float noise tie, and
/// ties go to the lower class index.
pub fn proportions_to_counts(p: &ProportionSpec, n: usize) -> CountVector {
    const QUANTUM: f64 = 1e9;
    let exact: Vec<f64> = p.as_slice().iter().map(|&pc| pc * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let remainders: Vec<u64> = exact
        .iter()
        .zip(&counts)
        .map(|(&x, &f)| ((x - f as f64) * QUANTUM).round() as u64)
        .collect();

    let mut order: Vec<usize> = (0..counts.len()).collect();
    // Stable sort keeps ascending class index among equal remainders.
    order.sort_by(|&a, &b| remainders[b].cmp(&remainders[a]));

    let assigned: usize = counts.iter().sum();
    if assigned <= n {
        for &c in order.iter().cycle().take(n - assigned) {
            counts[c] += 1;
        }
    } else {
        // Only reachable when sum(p) exceeds 1 by float slack and n is huge.
        let mut excess = assigned - n;
        for &c in order.iter().rev() {
            if excess == 0 {
                break;
            }
            if counts[c] > 0 {
                counts[c] -= 1;
                excess -= 1;
            }
        }
    }
    CountVector(counts)
}

pub fn compute_centroids(ds: &LabeledDataset) -> Centroids {
    let d = ds.features().d();
    let k = ds.num_classes();
    let mut sums = vec![0.0; k * d];
    let mut counts = vec![0usize; k];
    for (row, &label) in ds.features().rows().zip(ds.labels()) {
        counts[label] += 1;
        for (s, v) in sums[label * d..(label + 1) * d].iter_mut().zip(row) {
            *s += v;
        }
    }
    for (c, &cnt) in counts.iter().enumerate() {
        if cnt > 0 {
            for s in &mut sums[c * d..(c + 1) * d] {
                *s /= cnt as f64;
            }
        }
    }
    Centroids {
        dim: d,
        means: sums,
        present: counts.iter().map(|&c| c > 0).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ds(rows: &[Vec<f64>], labels: Vec<usize>, k: usize) -> LabeledDataset {
        LabeledDataset::new(FeatureMatrix::from_rows(rows).unwrap(), labels, k).unwrap()
    }

    #[test]
    fn class_counts_examples() {
        assert_eq!(class_counts(&[0, 0, 1], 2).unwrap(), CountVector(vec![2, 1]));
        assert_eq!(class_counts(&[], 3).unwrap(), CountVector(vec![0, 0, 0]));
        assert!(matches!(class_counts(&[3], 3), Err(Error::Validation(_))));
    }

    #[test]
    fn counts_exact_split() {
        let p = ProportionSpec::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(proportions_to_counts(&p, 4).0, vec![2, 2]);
    }

    #[test]
    fn counts_tie_goes_to_lower_class() {
        let p = ProportionSpec::new(vec![0.55, 0.45]).unwrap();
        assert_eq!(proportions_to_counts(&p, 10).0, vec![6, 4]);
        let p = ProportionSpec::new(vec![0.45, 0.55]).unwrap();
        assert_eq!(proportions_to_counts(&p, 10).0, vec![5, 5]);
    }

    #[test]
    fn counts_imbalanced_four_class_proportions() {
        // floors (54, 27, 11, 7); the one leftover unit goes to the largest
        // remainder 0.67 of the last class.
        let p = ProportionSpec::new(vec![0.5414, 0.2707, 0.1112, 0.0767]).unwrap();
        let counts = proportions_to_counts(&p, 100);
        assert_eq!(counts.0, vec![54, 27, 11, 8]);
        for (c, &nc) in counts.iter().enumerate() {
            assert!((nc as f64 - 100.0 * p.as_slice()[c]).abs() < 1.0);
        }
    }

    #[test]
    fn counts_zero_samples() {
        let p = ProportionSpec::uniform(3).unwrap();
        assert_eq!(proportions_to_counts(&p, 0).0, vec![0, 0, 0]);
    }

    #[test]
    fn proportion_validation() {
        assert!(ProportionSpec::new(vec![0.5, 0.6]).is_err());
        assert!(ProportionSpec::new(vec![1.5, -0.5]).is_err());
        assert!(ProportionSpec::new(vec![]).is_err());
        assert!(ProportionSpec::new(vec![0.3, 0.7 + 5e-7]).is_ok());
    }

    #[test]
    fn feature_matrix_rejects_non_finite() {
        assert!(FeatureMatrix::new(1, 2, vec![0.0, f64::NAN]).is_err());
        assert!(FeatureMatrix::new(1, 2, vec![0.0, f64::INFINITY]).is_err());
        assert!(FeatureMatrix::new(0, 2, vec![]).is_err());
        assert!(FeatureMatrix::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn labeled_dataset_rejects_bad_labels() {
        let f = FeatureMatrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert!(LabeledDataset::new(f.clone(), vec![0, 2], 2).is_err());
        assert!(LabeledDataset::new(f, vec![0], 2).is_err());
    }

    #[test]
    fn centroid_of_two_points() {
        let c = compute_centroids(&ds(&[vec![0.0, 0.0], vec![2.0, 2.0]], vec![0, 0], 1));
        assert_eq!(c.mean(0), &[1.0, 1.0]);
    }

    #[test]
    fn singleton_centroids() {
        let rows = vec![vec![1.5, -2.0], vec![3.0, 7.0]];
        let c = compute_centroids(&ds(&rows, vec![0, 1], 2));
        assert_eq!(c.mean(0), rows[0].as_slice());
        assert_eq!(c.mean(1), rows[1].as_slice());
    }

    #[test]
    fn centroids_hand_example_and_empty_class() {
        let c = compute_centroids(&ds(
            &[vec![1.0, 0.0], vec![3.0, 0.0], vec![0.0, 5.0]],
            vec![0, 0, 1],
            3,
        ));
        assert_eq!(c.mean(0), &[2.0, 0.0]);
        assert_eq!(c.mean(1), &[0.0, 5.0]);
        assert_eq!(c.mean(2), &[0.0, 0.0]);
        assert_eq!(c.present(), &[true, true, false]);
    }

    fn arb_proportions() -> impl Strategy<Value = ProportionSpec> {
        prop::collection::vec(0.0f64..1.0, 1..8).prop_filter_map("zero mass", |w| {
            let s: f64 = w.iter().sum();
            (s > 1e-3).then(|| ProportionSpec::new(w.iter().map(|x| x / s).collect()).unwrap())
        })
    }

    proptest! {
        #[test]
        fn counts_sum_to_n_and_stay_within_one(p in arb_proportions(), n in 0usize..=1000) {
            let counts = proportions_to_counts(&p, n);
            prop_assert_eq!(counts.total(), n);
            for (c, &nc) in counts.iter().enumerate() {
                prop_assert!((nc as f64 - p.as_slice()[c] * n as f64).abs() < 1.0);
            }
            prop_assert_eq!(proportions_to_counts(&p, n), counts);
        }

        #[test]
        fn counts_permute_with_classes_absent_ties(p in arb_proportions(), n in 0usize..=1000, rot in 0usize..8) {
            let k = p.num_classes();
            let perm: Vec<usize> = (0..k).map(|i| (i + rot) % k).collect();
            let permuted = ProportionSpec::new(perm.iter().map(|&i| p.as_slice()[i]).collect()).unwrap();
            let base = proportions_to_counts(&p, n);
            let moved = proportions_to_counts(&permuted, n);
            let rem = |c: usize| ((p.as_slice()[c] * n as f64).fract() * 1e9).round() as u64;
            for (slot, &c) in perm.iter().enumerate() {
                if moved[slot] != base[c] {
                    prop_assert!((0..k).any(|o| o != c && rem(o) == rem(c)));
                }
            }
        }

        #[test]
        fn recentred_class_means_vanish(
            rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 3), 1..40),
            seed in 0usize..1000,
        ) {
            let labels: Vec<usize> = (0..rows.len()).map(|i| (i * 7 + seed) % 3).collect();
            let data = ds(&rows, labels.clone(), 3);
            let cent = compute_centroids(&data);
            let shifted: Vec<Vec<f64>> = rows.iter().zip(&labels)
                .map(|(r, &l)| r.iter().zip(cent.mean(l)).map(|(a, m)| a - m).collect())
                .collect();
            let again = compute_centroids(&ds(&shifted, labels, 3));
            let max_abs = rows.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
            for c in 0..3 {
                for v in again.mean(c) {
                    prop_assert!(v.abs() <= 1e-9 * (1.0 + max_abs));
                }
            }
        }
    }
}
