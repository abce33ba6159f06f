//! CART-style binary decision tree on dense real features.

use std::fmt;
use std::str::FromStr;

use ndarray::ArrayView2;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest impurity decrease that counts as a gain.
pub const MIN_GAIN: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    #[default]
    Gini,
    Entropy,
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criterion::Gini => "gini",
            Criterion::Entropy => "entropy",
        })
    }
}

impl FromStr for Criterion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gini" => Ok(Criterion::Gini),
            "entropy" => Ok(Criterion::Entropy),
            o => Err(Error::Config(format!("unknown split criterion {o:?}"))),
        }
    }
}

/// Gini `1 - sum p^2` or entropy `-sum p log2 p` of class counts.
pub fn impurity(counts: &[usize], criterion: Criterion) -> f64 {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    match criterion {
        Criterion::Gini => 1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>(),
        Criterion::Entropy => -counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                p * p.log2()
            })
            .sum::<f64>(),
    }
}

/// Impurity decrease of splitting `parent` into `left` and the remainder.
pub fn split_gain(parent: [usize; 2], left: [usize; 2], criterion: Criterion) -> f64 {
    let right = [parent[0] - left[0], parent[1] - left[1]];
    let n = (parent[0] + parent[1]) as f64;
    let nl = (left[0] + left[1]) as f64;
    let nr = (right[0] + right[1]) as f64;
    impurity(&parent, criterion) - (nl / n) * impurity(&left, criterion) - (nr / n) * impurity(&right, criterion)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitCandidate {
    pub feature: usize,
    pub threshold: f64,
    pub gain: f64,
}

fn midpoint(a: f64, b: f64) -> f64 {
    let m = (a + b) / 2.0;
    if m >= b {
        a
    } else {
        m
    }
}

/// Best `x[feature] <= threshold` split of `rows` over `features`.
///
/// Thresholds are midpoints between consecutive distinct values. Ties keep
/// the lowest feature index, then the lowest threshold. `features` must be
/// ascending. Returns `None` when no split gains more than [`MIN_GAIN`].
pub fn best_split(
    x: ArrayView2<'_, f64>,
    y: &[u8],
    rows: &[usize],
    features: &[usize],
    criterion: Criterion,
) -> Option<SplitCandidate> {
    if rows.len() < 2 {
        return None;
    }
    let mut parent = [0usize; 2];
    for &r in rows {
        parent[y[r] as usize] += 1;
    }
    if parent[0] == 0 || parent[1] == 0 {
        return None;
    }
    let mut best: Option<SplitCandidate> = None;
    let mut pairs: Vec<(f64, u8)> = Vec::with_capacity(rows.len());
    for &f in features {
        pairs.clear();
        pairs.extend(rows.iter().map(|&r| (x[[r, f]], y[r])));
        pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
        let mut left = [0usize; 2];
        for i in 0..pairs.len() - 1 {
            left[pairs[i].1 as usize] += 1;
            let (a, b) = (pairs[i].0, pairs[i + 1].0);
            if a == b {
                continue;
            }
            let gain = split_gain(parent, left, criterion);
            if gain > MIN_GAIN && best.is_none_or(|s| gain > s.gain) {
                best = Some(SplitCandidate {
                    feature: f,
                    threshold: midpoint(a, b),
                    gain,
                });
            }
        }
    }
    best
}

/// Arena node. Serialized as `{f, t, l, r}` or `{c, n0, n1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Node {
    Split {
        #[serde(rename = "f")]
        feature: usize,
        #[serde(rename = "t")]
        threshold: f64,
        #[serde(rename = "l")]
        left: usize,
        #[serde(rename = "r")]
        right: usize,
    },
    Leaf {
        #[serde(rename = "c")]
        class: u8,
        n0: u32,
        n1: u32,
    },
}

/// Tree stored as a node arena with the root at index 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DecisionTree {
    pub nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeParams {
    pub criterion: Criterion,
    pub max_depth: Option<usize>,
    /// Candidate features drawn per node.
    pub max_features: usize,
}

impl DecisionTree {
    /// Grows a tree on `rows` (duplicates allowed, as from a bootstrap).
    pub fn fit<R: Rng>(x: ArrayView2<'_, f64>, y: &[u8], rows: Vec<usize>, params: &TreeParams, rng: &mut R) -> Self {
        let mut tree = DecisionTree { nodes: Vec::new() };
        tree.grow(x, y, rows, 0, params, rng);
        tree
    }

    fn grow<R: Rng>(
        &mut self,
        x: ArrayView2<'_, f64>,
        y: &[u8],
        rows: Vec<usize>,
        depth: usize,
        params: &TreeParams,
        rng: &mut R,
    ) -> usize {
        let id = self.nodes.len();
        let mut counts = [0usize; 2];
        for &r in &rows {
            counts[y[r] as usize] += 1;
        }
        let leaf = Node::Leaf {
            class: (counts[1] > counts[0]) as u8,
            n0: counts[0] as u32,
            n1: counts[1] as u32,
        };
        self.nodes.push(leaf);
        let pure = counts[0] == 0 || counts[1] == 0;
        if pure || rows.len() < 2 || params.max_depth.is_some_and(|d| depth >= d) {
            return id;
        }
        let d = x.ncols();
        let m = params.max_features.clamp(1, d);
        let mut features = if m == d {
            (0..d).collect()
        } else {
            index::sample(rng, d, m).into_vec()
        };
        features.sort_unstable();
        let Some(split) = best_split(x, y, &rows, &features, params.criterion) else {
            return id;
        };
        let (l_rows, r_rows): (Vec<usize>, Vec<usize>) =
            rows.into_iter().partition(|&r| x[[r, split.feature]] <= split.threshold);
        let left = self.grow(x, y, l_rows, depth + 1, params, rng);
        let right = self.grow(x, y, r_rows, depth + 1, params, rng);
        self.nodes[id] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
        };
        id
    }

    /// Leaf class reached by a row whose feature `f` reads `value(f)`.
    #[inline]
    pub fn predict_with(&self, value: impl Fn(usize) -> f64) -> u8 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { class, .. } => return *class,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if value(*feature) <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn predict_row(&self, row: ndarray::ArrayView1<'_, f64>) -> u8 {
        self.predict_with(|f| row[f])
    }

    /// Depth of the deepest leaf (root has depth 0).
    pub fn depth(&self) -> usize {
        fn walk(t: &DecisionTree, i: usize) -> usize {
            match &t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(t, *left).max(walk(t, *right)),
            }
        }
        walk(self, 0)
    }

    pub fn features_used(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            Node::Split { feature, .. } => Some(*feature),
            Node::Leaf { .. } => None,
        })
    }
}
