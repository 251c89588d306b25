//! Exact proportion-constrained assignment.
//!
//! The problem: give each of `N` samples one of `C` classes so that class
//! `c` receives exactly `n_c` samples and the summed cost `d[c][j]` of the
//! chosen pairs is minimal. This is a transportation problem (unit supplies,
//! integral demands); its constraint matrix is totally unimodular, so an
//! exact min-cost-flow method returns an integral optimum.
//!
//! [`solve_assignment`] runs successive shortest paths, inserting one sample
//! at a time. Every residual path from a new sample to a class with spare
//! capacity passes only through class nodes (an edge `a -> b` moves some
//! sample currently in `a` over to `b` at cost `d[b][i] - d[a][i]`), so the
//! shortest-path search runs on `C` nodes with Bellman-Ford. The cheapest
//! move for every ordered class pair comes from a lazily cleaned heap. With
//! small `C` the whole solve is `O(N C^3 + N C log N)`.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::types::{Assignment, Centroids, CountVector, FeatureMatrix};

/// Cost placed in every cell of a class that has no centroid.
pub const ABSENT_COST: f64 = f64::MAX;

/// Largest sample count [`brute_force_assignment`] will enumerate.
pub const BRUTE_FORCE_MAX_SAMPLES: usize = 12;

/// `C x N` non-negative costs, row per class.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    classes: usize,
    samples: usize,
    values: Vec<f64>,
    absent: Vec<bool>,
}

impl CostMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let samples = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != samples) {
            return Err(Error::validation("cost matrix rows differ in length"));
        }
        Self::from_flat(rows.len(), samples, rows.concat())
    }

    pub fn from_flat(classes: usize, samples: usize, values: Vec<f64>) -> Result<Self> {
        if classes == 0 {
            return Err(Error::validation("cost matrix needs at least one class"));
        }
        if values.len() != classes * samples {
            return Err(Error::validation(format!(
                "cost matrix {classes}x{samples} needs {} values, got {}",
                classes * samples,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::validation(format!(
                "cost at class {}, sample {} is {}, must be finite and non-negative",
                pos / samples.max(1),
                pos % samples.max(1),
                values[pos]
            )));
        }
        Ok(Self {
            classes,
            samples,
            values,
            absent: vec![false; classes],
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn num_samples(&self) -> usize {
        self.samples
    }

    #[inline]
    pub fn get(&self, c: usize, j: usize) -> f64 {
        self.values[c * self.samples + j]
    }

    pub fn row(&self, c: usize) -> &[f64] {
        &self.values[c * self.samples..(c + 1) * self.samples]
    }

    /// True when the class had no centroid and its row holds [`ABSENT_COST`].
    pub fn is_absent(&self, c: usize) -> bool {
        self.absent[c]
    }

    /// Objective value of a labeling, summed in sample order.
    pub fn cost_of(&self, class_of: &[usize]) -> f64 {
        class_of
            .iter()
            .enumerate()
            .map(|(j, &c)| self.get(c, j))
            .sum()
    }
}

/// Squared Euclidean distance from every target row to every centroid.
pub fn build_cost_matrix(target: &FeatureMatrix, centroids: &Centroids) -> Result<CostMatrix> {
    if target.d() != centroids.dim() {
        return Err(Error::validation(format!(
            "target features have dimension {}, centroids have {}",
            target.d(),
            centroids.dim()
        )));
    }
    let classes = centroids.num_classes();
    let samples = target.n();
    let mut values = Vec::with_capacity(classes * samples);
    for c in 0..classes {
        if !centroids.is_present(c) {
            values.extend(std::iter::repeat_n(ABSENT_COST, samples));
            continue;
        }
        let mu = centroids.mean(c);
        values.extend(target.rows().map(|x| {
            x.iter()
                .zip(mu)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        }));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::validation(format!(
            "squared distance overflowed to {v}"
        )));
    }
    Ok(CostMatrix {
        classes,
        samples,
        values,
        absent: centroids.present().iter().map(|p| !p).collect(),
    })
}

fn check_feasible(costs: &CostMatrix, counts: &CountVector) -> Result<()> {
    if counts.num_classes() != costs.num_classes() {
        return Err(Error::Infeasible(format!(
            "count vector has {} classes, cost matrix has {}",
            counts.num_classes(),
            costs.num_classes()
        )));
    }
    if counts.total() != costs.num_samples() {
        return Err(Error::Infeasible(format!(
            "class counts sum to {}, but there are {} samples (each sample needs exactly one class)",
            counts.total(),
            costs.num_samples()
        )));
    }
    if let Some(c) = (0..costs.num_classes()).find(|&c| costs.is_absent(c) && counts[c] > 0) {
        return Err(Error::Infeasible(format!(
            "class {c} requires {} samples but has no centroid",
            counts[c]
        )));
    }
    Ok(())
}

/// Heap entry: moving `sample` out of its class costs `delta`.
#[derive(Clone, Copy, Debug)]
struct Move {
    delta: f64,
    sample: usize,
}

impl PartialEq for Move {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Move {}

impl PartialOrd for Move {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Move {
    fn cmp(&self, other: &Self) -> Ordering {
        self.delta
            .total_cmp(&other.delta)
            .then(self.sample.cmp(&other.sample))
    }
}

struct ExchangeGraph<'a> {
    costs: &'a CostMatrix,
    classes: Vec<usize>,
    k: usize,
    class_of: Vec<usize>,
    // heaps[a * k + b]: samples in class a, keyed by d[b][i] - d[a][i]
    heaps: Vec<BinaryHeap<Reverse<Move>>>,
}

impl<'a> ExchangeGraph<'a> {
    fn place(&mut self, sample: usize, class: usize) {
        self.class_of[sample] = class;
        let own = self.costs.get(class, sample);
        for &b in &self.classes {
            if b != class {
                self.heaps[class * self.k + b].push(Reverse(Move {
                    delta: self.costs.get(b, sample) - own,
                    sample,
                }));
            }
        }
    }

    /// Cheapest move from class `a` to class `b`, dropping stale entries.
    fn best_move(&mut self, a: usize, b: usize) -> Option<Move> {
        let heap = &mut self.heaps[a * self.k + b];
        while let Some(&Reverse(m)) = heap.peek() {
            if self.class_of[m.sample] == a {
                return Some(m);
            }
            heap.pop();
        }
        None
    }
}

const UNASSIGNED: usize = usize::MAX;

/// Minimum-cost assignment with exact class counts.
///
/// Returns any optimal assignment; when several exist, only `total_cost` is
/// guaranteed to be the same across equivalent inputs.
pub fn solve_assignment(costs: &CostMatrix, counts: &CountVector) -> Result<Assignment> {
    check_feasible(costs, counts)?;
    let k = costs.num_classes();
    let n = costs.num_samples();
    let classes: Vec<usize> = (0..k).filter(|&c| counts[c] > 0).collect();

    let mut graph = ExchangeGraph {
        costs,
        classes: classes.clone(),
        k,
        class_of: vec![UNASSIGNED; n],
        heaps: (0..k * k).map(|_| BinaryHeap::new()).collect(),
    };
    let mut filled = vec![0usize; k];
    let mut dist = vec![f64::INFINITY; k];
    // pred[b] = (a, sample moved from a into b); None when the new sample enters b directly
    let mut pred: Vec<Option<(usize, usize)>> = vec![None; k];

    for j in 0..n {
        for &c in &classes {
            dist[c] = costs.get(c, j);
            pred[c] = None;
        }
        for _ in 0..classes.len() {
            let mut changed = false;
            for &a in &classes {
                for &b in &classes {
                    if a == b {
                        continue;
                    }
                    let Some(m) = graph.best_move(a, b) else {
                        continue;
                    };
                    let cand = dist[a] + m.delta;
                    if cand < dist[b] - 1e-12 * dist[b].abs().max(1.0) {
                        dist[b] = cand;
                        pred[b] = Some((a, m.sample));
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }

        let target = classes
            .iter()
            .copied()
            .filter(|&c| filled[c] < counts[c])
            .min_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)))
            .expect("a class with spare capacity exists while samples remain");

        let mut moves = Vec::new();
        let mut at = target;
        while let Some((from, sample)) = pred[at] {
            moves.push((sample, at));
            at = from;
            if moves.len() > classes.len() {
                return Err(Error::Training(
                    "assignment solver hit a cycle in its shortest-path tree".into(),
                ));
            }
        }
        for (sample, to) in moves {
            graph.place(sample, to);
        }
        graph.place(j, at);
        filled[target] += 1;
    }

    let class_of = graph.class_of;
    let total_cost = costs.cost_of(&class_of);
    Ok(Assignment {
        class_of,
        counts: counts.clone(),
        total_cost,
    })
}

/// Exhaustive search over every count-feasible labeling. Test oracle.
pub fn brute_force_assignment(costs: &CostMatrix, counts: &CountVector) -> Result<Assignment> {
    let n = costs.num_samples();
    if n > BRUTE_FORCE_MAX_SAMPLES {
        return Err(Error::validation(format!(
            "brute force refuses {n} samples (limit {BRUTE_FORCE_MAX_SAMPLES})"
        )));
    }
    check_feasible(costs, counts)?;

    struct Search<'a> {
        costs: &'a CostMatrix,
        remaining: Vec<usize>,
        current: Vec<usize>,
        best: Option<(f64, Vec<usize>)>,
    }

    impl Search<'_> {
        fn visit(&mut self, j: usize) {
            if j == self.current.len() {
                let cost = self.costs.cost_of(&self.current);
                if self.best.as_ref().is_none_or(|(b, _)| cost < *b) {
                    self.best = Some((cost, self.current.clone()));
                }
                return;
            }
            for c in 0..self.remaining.len() {
                if self.remaining[c] == 0 {
                    continue;
                }
                self.remaining[c] -= 1;
                self.current[j] = c;
                self.visit(j + 1);
                self.remaining[c] += 1;
            }
        }
    }

    let mut search = Search {
        costs,
        remaining: counts.0.clone(),
        current: vec![0; n],
        best: None,
    };
    search.visit(0);
    let (total_cost, class_of) = search.best.expect("feasible counts admit a labeling");
    Ok(Assignment {
        class_of,
        counts: counts.clone(),
        total_cost,
    })
}

/// Unconstrained baseline: every sample takes its cheapest class, ties to
/// the lowest class index.
pub fn nearest_centroid_assignment(costs: &CostMatrix) -> Assignment {
    let k = costs.num_classes();
    let mut counts = vec![0usize; k];
    let class_of: Vec<usize> = (0..costs.num_samples())
        .map(|j| {
            let mut best = 0;
            for c in 1..k {
                if costs.get(c, j) < costs.get(best, j) {
                    best = c;
                }
            }
            counts[best] += 1;
            best
        })
        .collect();
    Assignment {
        total_cost: costs.cost_of(&class_of),
        class_of,
        counts: CountVector(counts),
    }
}
