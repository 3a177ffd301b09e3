//! CART random forest (gini / variance impurity) with impurity-decrease
//! feature importances.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_split: usize,
    pub bootstrap: bool,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 100,
            max_depth: 8,
            min_samples_split: 2,
            bootstrap: true,
        }
    }
}

/// Training targets: class indices with the class count, or real values.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    Classes(&'a [usize], usize),
    Values(&'a [f64]),
}

#[derive(Debug, Clone)]
enum Node {
    /// Class distribution, or a single mean for regression.
    Leaf(Vec<f64>),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn leaf(&self, columns: &[Vec<f64>], row: usize) -> &[f64] {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if columns[*feature][row] <= *threshold { *left } else { *right },
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct RandomForest {
    trees: Vec<Tree>,
    n_features: usize,
    n_classes: Option<usize>,
    importances: Vec<f64>,
}

struct Builder<'a> {
    columns: &'a [Vec<f64>],
    target: Target<'a>,
    config: &'a ForestConfig,
    mtry: usize,
    nodes: Vec<Node>,
    gain: Vec<f64>,
}

impl Builder<'_> {
    fn impurity(&self, rows: &[usize]) -> f64 {
        let n = rows.len() as f64;
        match self.target {
            Target::Classes(y, k) => {
                let mut counts = vec![0usize; k];
                for &r in rows {
                    counts[y[r]] += 1;
                }
                1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
            }
            Target::Values(y) => {
                let mean = rows.iter().map(|&r| y[r]).sum::<f64>() / n;
                rows.iter().map(|&r| (y[r] - mean).powi(2)).sum::<f64>() / n
            }
        }
    }

    fn leaf_value(&self, rows: &[usize]) -> Vec<f64> {
        let n = rows.len() as f64;
        match self.target {
            Target::Classes(y, k) => {
                let mut dist = vec![0.0; k];
                for &r in rows {
                    dist[y[r]] += 1.0;
                }
                dist.iter_mut().for_each(|d| *d /= n);
                dist
            }
            Target::Values(y) => vec![rows.iter().map(|&r| y[r]).sum::<f64>() / n],
        }
    }

    /// Best (gain, threshold) for one feature, where gain is the
    /// sample-weighted impurity decrease.
    fn best_split(&self, rows: &[usize], feature: usize, parent: f64) -> Option<(f64, f64)> {
        let x = &self.columns[feature];
        let mut order = rows.to_vec();
        order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
        let n = order.len();
        let total = n as f64 * parent;
        let mut best: Option<(f64, f64)> = None;
        match self.target {
            Target::Classes(y, k) => {
                let mut right = vec![0usize; k];
                for &r in &order {
                    right[y[r]] += 1;
                }
                let mut left = vec![0usize; k];
                let (mut sl, mut sr) = (0.0f64, right.iter().map(|&c| (c * c) as f64).sum::<f64>());
                for i in 0..n - 1 {
                    let c = y[order[i]];
                    sl += (2 * left[c] + 1) as f64;
                    sr -= (2 * right[c] - 1) as f64;
                    left[c] += 1;
                    right[c] -= 1;
                    if x[order[i]] == x[order[i + 1]] {
                        continue;
                    }
                    let nl = (i + 1) as f64;
                    let nr = (n - i - 1) as f64;
                    // n_l * gini_l = n_l - Σc_l² / n_l
                    let child = (nl - sl / nl) + (nr - sr / nr);
                    let gain = total - child;
                    if best.is_none_or(|(g, _)| gain > g) {
                        best = Some((gain, 0.5 * (x[order[i]] + x[order[i + 1]])));
                    }
                }
            }
            Target::Values(y) => {
                let (mut sum_r, mut sq_r) = (0.0, 0.0);
                for &r in &order {
                    sum_r += y[r];
                    sq_r += y[r] * y[r];
                }
                let (mut sum_l, mut sq_l) = (0.0, 0.0);
                for i in 0..n - 1 {
                    let v = y[order[i]];
                    sum_l += v;
                    sq_l += v * v;
                    sum_r -= v;
                    sq_r -= v * v;
                    if x[order[i]] == x[order[i + 1]] {
                        continue;
                    }
                    let nl = (i + 1) as f64;
                    let nr = (n - i - 1) as f64;
                    let child = (sq_l - sum_l * sum_l / nl) + (sq_r - sum_r * sum_r / nr);
                    let gain = total - child;
                    if best.is_none_or(|(g, _)| gain > g) {
                        best = Some((gain, 0.5 * (x[order[i]] + x[order[i + 1]])));
                    }
                }
            }
        }
        best
    }

    fn build(&mut self, rows: Vec<usize>, depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf(Vec::new()));
        let parent = self.impurity(&rows);
        let mut chosen = None;
        if depth < self.config.max_depth && rows.len() >= self.config.min_samples_split && parent > 1e-12 {
            let d = self.columns.len();
            for feature in sample(rng, d, self.mtry.min(d)).into_iter() {
                if let Some((gain, threshold)) = self.best_split(&rows, feature, parent) {
                    if gain > 1e-12 && chosen.is_none_or(|(g, _, _)| gain > g) {
                        chosen = Some((gain, feature, threshold));
                    }
                }
            }
        }
        match chosen {
            None => self.nodes[id] = Node::Leaf(self.leaf_value(&rows)),
            Some((gain, feature, threshold)) => {
                self.gain[feature] += gain;
                let x = &self.columns[feature];
                let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| x[i] <= threshold);
                let left = self.build(l, depth + 1, rng);
                let right = self.build(r, depth + 1, rng);
                self.nodes[id] = Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                };
            }
        }
        id
    }
}

impl RandomForest {
    /// Fits on `rows` of the column-major `columns`. Tree `i` draws from its
    /// own seeded stream, so results do not depend on thread scheduling.
    pub fn fit(columns: &[Vec<f64>], target: Target, rows: &[usize], config: &ForestConfig, seed: u64) -> Self {
        let d = columns.len();
        let mtry = ((d as f64).sqrt().floor() as usize).max(1);
        let built: Vec<(Tree, Vec<f64>)> = (0..config.n_trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed::derive_indexed(seed, "tree", t as u64));
                let sample_rows: Vec<usize> = if config.bootstrap {
                    (0..rows.len()).map(|_| rows[rng.random_range(0..rows.len())]).collect()
                } else {
                    rows.to_vec()
                };
                let mut b = Builder {
                    columns,
                    target,
                    config,
                    mtry,
                    nodes: Vec::new(),
                    gain: vec![0.0; d],
                };
                b.build(sample_rows, 0, &mut rng);
                (Tree { nodes: b.nodes }, b.gain)
            })
            .collect();
        let mut importances = vec![0.0; d];
        for (_, gain) in &built {
            let total: f64 = gain.iter().sum();
            if total > 0.0 {
                for (imp, g) in importances.iter_mut().zip(gain) {
                    *imp += g / total;
                }
            }
        }
        let total: f64 = importances.iter().sum();
        if total > 0.0 {
            importances.iter_mut().for_each(|v| *v /= total);
        } else if d > 0 {
            importances = vec![1.0 / d as f64; d];
        }
        RandomForest {
            trees: built.into_iter().map(|(t, _)| t).collect(),
            n_features: d,
            n_classes: match target {
                Target::Classes(_, k) => Some(k),
                Target::Values(_) => None,
            },
            importances,
        }
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    /// Normalized impurity-decrease importances (sum to 1).
    pub fn importances(&self) -> &[f64] {
        &self.importances
    }

    /// Averaged class distribution for one row.
    fn proba(&self, columns: &[Vec<f64>], row: usize) -> Vec<f64> {
        let k = self.n_classes.unwrap_or(1);
        let mut acc = vec![0.0; k];
        for t in &self.trees {
            for (a, p) in acc.iter_mut().zip(t.leaf(columns, row)) {
                *a += p;
            }
        }
        acc
    }

    /// Majority class by averaged leaf distributions; ties go to the lower
    /// class index.
    pub fn predict_class(&self, columns: &[Vec<f64>], rows: &[usize]) -> Vec<usize> {
        rows.iter()
            .map(|&r| {
                let p = self.proba(columns, r);
                let mut best = 0;
                for (i, v) in p.iter().enumerate() {
                    if *v > p[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    pub fn predict_value(&self, columns: &[Vec<f64>], rows: &[usize]) -> Vec<f64> {
        rows.iter()
            .map(|&r| self.proba(columns, r)[0] / self.trees.len() as f64)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_data_is_fit_exactly() {
        let x: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let noise: Vec<f64> = (0..40).map(|i| ((i * 7919) % 13) as f64).collect();
        let y: Vec<usize> = (0..40).map(|i| usize::from(i >= 20)).collect();
        let cols = vec![x, noise];
        let rows: Vec<usize> = (0..40).collect();
        let rf = RandomForest::fit(&cols, Target::Classes(&y, 2), &rows, &ForestConfig::default(), 1);
        assert_eq!(rf.predict_class(&cols, &rows), y);
        assert!(rf.importances()[0] > rf.importances()[1]);
        assert!((rf.importances().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn regression_tracks_target() {
        let x: Vec<f64> = (0..100).map(|i| i as f64 / 10.0).collect();
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v).collect();
        let cols = vec![x];
        let rows: Vec<usize> = (0..100).collect();
        let rf = RandomForest::fit(&cols, Target::Values(&y), &rows, &ForestConfig::default(), 2);
        let pred = rf.predict_value(&cols, &rows);
        assert!(super::super::metrics::r2(&pred, &y) > 0.99);
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let x: Vec<f64> = (0..60).map(|i| ((i * 37) % 17) as f64).collect();
        let z: Vec<f64> = (0..60).map(|i| ((i * 11) % 7) as f64).collect();
        let y: Vec<usize> = (0..60).map(|i| (i * 13 % 3) % 2).collect();
        let cols = vec![x, z];
        let rows: Vec<usize> = (0..60).collect();
        let a = RandomForest::fit(&cols, Target::Classes(&y, 2), &rows, &ForestConfig::default(), 9);
        let b = RandomForest::fit(&cols, Target::Classes(&y, 2), &rows, &ForestConfig::default(), 9);
        assert_eq!(a.importances(), b.importances());
        assert_eq!(a.predict_class(&cols, &rows), b.predict_class(&cols, &rows));
    }
}
