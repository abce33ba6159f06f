//! Bagged ensemble of decision trees with majority voting.

use ndarray::{ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::tree::{Criterion, DecisionTree, TreeParams};
use super::{derive_seed, Classifier, ColumnScorer};
use crate::error::{Error, Result};
use crate::par;

/// Candidate features per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaxFeatures {
    /// `floor(sqrt(D))`, at least 1.
    #[default]
    Sqrt,
    All,
    Count(usize),
}

impl MaxFeatures {
    pub fn resolve(self, d: usize) -> usize {
        match self {
            MaxFeatures::Sqrt => ((d as f64).sqrt().floor() as usize).max(1),
            MaxFeatures::All => d,
            MaxFeatures::Count(n) => n.clamp(1, d.max(1)),
        }
    }
}

impl Serialize for MaxFeatures {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            MaxFeatures::Sqrt => s.serialize_str("sqrt"),
            MaxFeatures::All => s.serialize_str("all"),
            MaxFeatures::Count(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for MaxFeatures {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Name(String),
            Count(usize),
        }
        match Repr::deserialize(d)? {
            Repr::Name(s) if s == "sqrt" => Ok(MaxFeatures::Sqrt),
            Repr::Name(s) if s == "all" => Ok(MaxFeatures::All),
            Repr::Name(s) => Err(serde::de::Error::custom(format!("unknown max_features {s:?}"))),
            Repr::Count(n) => Ok(MaxFeatures::Count(n)),
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_estimators: usize,
    pub criterion: Criterion,
    /// `None` grows until purity.
    pub max_depth: Option<usize>,
    /// Bootstrap sample size as a fraction of the training rows, in (0, 1].
    pub max_samples: f64,
    #[serde(default)]
    pub max_features: MaxFeatures,
    /// When false every tree sees all rows once, in order.
    #[serde(default = "default_true")]
    pub bootstrap: bool,
}

impl Default for ForestParams {
    /// The selected configuration: 100 trees, entropy, depth 15, half-size
    /// bootstrap samples.
    fn default() -> Self {
        ForestParams {
            n_estimators: 100,
            criterion: Criterion::Entropy,
            max_depth: Some(15),
            max_samples: 0.5,
            max_features: MaxFeatures::Sqrt,
            bootstrap: true,
        }
    }
}

impl ForestParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_estimators == 0 {
            return Err(Error::Config("n_estimators must be positive".into()));
        }
        if !(self.max_samples > 0.0 && self.max_samples <= 1.0) {
            return Err(Error::Config(format!("max_samples {} not in (0, 1]", self.max_samples)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub params: ForestParams,
    pub seed: u64,
    pub feature_names: Vec<String>,
    /// Set when the training labels held a single class.
    #[serde(default)]
    pub degenerate: bool,
    pub trees: Vec<DecisionTree>,
}

/// Fits `params.n_estimators` trees, each from its own derived seed, so the
/// model is identical for any worker count.
pub fn train_forest(
    x: ArrayView2<'_, f64>,
    y: &[u8],
    params: &ForestParams,
    seed: u64,
    feature_names: &[String],
) -> Result<ForestModel> {
    params.validate()?;
    let n = x.nrows();
    if n < 2 || y.len() != n {
        return Err(Error::Data(format!("need at least 2 labeled rows, got {n} rows / {} labels", y.len())));
    }
    if feature_names.len() != x.ncols() {
        return Err(Error::Schema("feature name count differs from matrix width".into()));
    }
    if let Some(bad) = y.iter().find(|&&c| c > 1) {
        return Err(Error::Data(format!("label {bad} is not binary")));
    }
    let degenerate = y.iter().all(|&c| c == y[0]);
    let tp = TreeParams {
        criterion: params.criterion,
        max_depth: params.max_depth,
        max_features: params.max_features.resolve(x.ncols()),
    };
    let draws = ((params.max_samples * n as f64).ceil() as usize).clamp(1, n);
    let trees = par::map_range(params.n_estimators, |t| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, t as u64));
        let rows: Vec<usize> = if params.bootstrap {
            (0..draws).map(|_| rng.random_range(0..n)).collect()
        } else {
            (0..n).collect()
        };
        DecisionTree::fit(x, y, rows, &tp, &mut rng)
    });
    Ok(ForestModel {
        params: params.clone(),
        seed,
        feature_names: feature_names.to_vec(),
        degenerate,
        trees,
    })
}

impl ForestModel {
    fn check_width(&self, x: &ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.feature_names.len() {
            return Err(Error::Schema(format!(
                "model expects {} features, matrix has {}",
                self.feature_names.len(),
                x.ncols()
            )));
        }
        Ok(())
    }

    fn votes_for_row(&self, row: ArrayView1<'_, f64>) -> usize {
        self.trees.iter().map(|t| t.predict_row(row) as usize).sum()
    }

    /// Class per row (exact tie goes to 0) and the fraction of trees voting 1.
    pub fn predict_with_votes(&self, x: ArrayView2<'_, f64>) -> Result<(Vec<u8>, Vec<f64>)> {
        self.check_width(&x)?;
        let n_trees = self.trees.len();
        let votes = par::map_range(x.nrows(), |i| self.votes_for_row(x.row(i)));
        let classes = votes.iter().map(|&v| (2 * v > n_trees) as u8).collect();
        let fractions = votes.iter().map(|&v| v as f64 / n_trees as f64).collect();
        Ok((classes, fractions))
    }
}

/// Majority vote and vote fractions.
pub fn predict_forest(model: &ForestModel, x: ArrayView2<'_, f64>) -> Result<(Vec<u8>, Vec<f64>)> {
    model.predict_with_votes(x)
}

impl Classifier for ForestModel {
    fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<u8>> {
        Ok(self.predict_with_votes(x)?.0)
    }

    fn feature_used(&self, j: usize) -> bool {
        self.trees.iter().any(|t| t.features_used().any(|f| f == j))
    }

    fn column_scorer<'a>(&'a self, x: ArrayView2<'a, f64>) -> Result<Box<dyn ColumnScorer + 'a>> {
        self.check_width(&x)?;
        let per_tree: Vec<Vec<u8>> = par::map_slice(&self.trees, |t| {
            (0..x.nrows()).map(|i| t.predict_row(x.row(i))).collect()
        });
        let mut votes = vec![0usize; x.nrows()];
        for p in &per_tree {
            for (v, &c) in votes.iter_mut().zip(p) {
                *v += c as usize;
            }
        }
        let mut users = vec![Vec::new(); x.ncols()];
        for (ti, t) in self.trees.iter().enumerate() {
            let mut fs: Vec<usize> = t.features_used().collect();
            fs.sort_unstable();
            fs.dedup();
            for f in fs {
                users[f].push(ti);
            }
        }
        Ok(Box::new(ForestScorer {
            model: self,
            x,
            per_tree,
            votes,
            users,
        }))
    }
}

/// Re-evaluates only the trees that split on the perturbed column.
struct ForestScorer<'a> {
    model: &'a ForestModel,
    x: ArrayView2<'a, f64>,
    per_tree: Vec<Vec<u8>>,
    votes: Vec<usize>,
    users: Vec<Vec<usize>>,
}

impl ColumnScorer for ForestScorer<'_> {
    fn baseline(&self) -> Vec<u8> {
        let n = self.model.trees.len();
        self.votes.iter().map(|&v| (2 * v > n) as u8).collect()
    }

    fn predict_with_column(&self, j: usize, column: &[f64]) -> Vec<u8> {
        let n = self.model.trees.len();
        (0..self.x.nrows())
            .map(|i| {
                let row = self.x.row(i);
                let mut v = self.votes[i];
                for &t in &self.users[j] {
                    v -= self.per_tree[t][i] as usize;
                    v += self.model.trees[t].predict_with(|f| if f == j { column[i] } else { row[f] }) as usize;
                }
                (2 * v > n) as u8
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::super::tree::Node;
    use super::*;
    use ndarray::Array2;

    fn names(d: usize) -> Vec<String> {
        (0..d).map(|i| format!("f{i}")).collect()
    }

    fn data(n: usize, seed: u64) -> (Array2<f64>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, 4), |_| rng.random::<f64>());
        let y = x.rows().into_iter().map(|r| (r[0] + 0.3 * r[2] > 0.6) as u8).collect();
        (x, y)
    }

    #[test]
    fn single_class_is_degenerate() {
        let (x, _) = data(30, 1);
        let y = vec![1u8; 30];
        let m = train_forest(x.view(), &y, &ForestParams::default(), 5, &names(4)).unwrap();
        assert!(m.degenerate);
        let (pred, frac) = m.predict_with_votes(x.view()).unwrap();
        assert!(pred.iter().all(|&p| p == 1));
        assert!(frac.iter().all(|&f| f == 1.0));
    }

    #[test]
    fn vote_tie_goes_to_zero() {
        let leaf = |c| DecisionTree {
            nodes: vec![Node::Leaf { class: c, n0: 1, n1: 1 }],
        };
        let m = ForestModel {
            params: ForestParams::default(),
            seed: 0,
            feature_names: names(1),
            degenerate: false,
            trees: vec![leaf(0), leaf(1)],
        };
        let x = Array2::zeros((1, 1));
        let (p, f) = predict_forest(&m, x.view()).unwrap();
        assert_eq!((p[0], f[0]), (0, 0.5));
    }

    #[test]
    fn width_mismatch_is_schema_error() {
        let (x, y) = data(20, 2);
        let m = train_forest(x.view(), &y, &ForestParams { n_estimators: 3, ..Default::default() }, 1, &names(4)).unwrap();
        let wrong = Array2::zeros((2, 3));
        assert!(matches!(m.predict(wrong.view()), Err(Error::Schema(_))));
    }

    #[test]
    fn schedule_independent() {
        let (x, y) = data(120, 3);
        let p = ForestParams { n_estimators: 12, ..Default::default() };
        let a = par::with_threads(Some(1), || train_forest(x.view(), &y, &p, 9, &names(4)).unwrap());
        let b = par::with_threads(Some(4), || train_forest(x.view(), &y, &p, 9, &names(4)).unwrap());
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn scorer_matches_full_prediction() {
        let (x, y) = data(80, 4);
        let m = train_forest(x.view(), &y, &ForestParams { n_estimators: 9, ..Default::default() }, 2, &names(4)).unwrap();
        let s = m.column_scorer(x.view()).unwrap();
        assert_eq!(s.baseline(), m.predict(x.view()).unwrap());
        let col: Vec<f64> = x.column(0).iter().rev().copied().collect();
        let mut x2 = x.clone();
        x2.column_mut(0).assign(&ndarray::Array1::from(col.clone()));
        assert_eq!(s.predict_with_column(0, &col), m.predict(x2.view()).unwrap());
    }

    #[test]
    fn max_features_resolution() {
        assert_eq!(MaxFeatures::Sqrt.resolve(667), 25);
        assert_eq!(MaxFeatures::All.resolve(7), 7);
        assert_eq!(MaxFeatures::Count(100).resolve(7), 7);
        let j = serde_json::to_string(&[MaxFeatures::Sqrt, MaxFeatures::Count(3)]).unwrap();
        assert_eq!(j, r#"["sqrt",3]"#);
    }
}
