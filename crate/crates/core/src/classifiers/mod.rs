//! From-scratch classifiers: decision tree, random forest, SMO-trained SVM,
//! and grid search over spatial CV splits.

pub mod forest;
pub mod grid;
pub mod svm;
pub mod tree;

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use forest::{predict_forest, train_forest, ForestModel, ForestParams, MaxFeatures};
pub use grid::{grid_search, GridResult, HyperParamGrid};
pub use svm::{train_svm, Gamma, KernelKind, SvmModel, SvmParams};
pub use tree::{best_split, impurity, Criterion, DecisionTree, Node};

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for sub-task `index` of a run seeded with `master`:
/// `splitmix64(splitmix64(master) ^ index)`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master) ^ index)
}

/// Predicts rows with a fixed column replaced, reusing work from the
/// unperturbed input where the model allows it.
pub trait ColumnScorer: Sync {
    fn baseline(&self) -> Vec<u8>;
    fn predict_with_column(&self, j: usize, column: &[f64]) -> Vec<u8>;
}

pub trait Classifier: Sync {
    fn n_features(&self) -> usize;
    fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<u8>>;

    /// False only when the model provably ignores column `j`.
    fn feature_used(&self, _j: usize) -> bool {
        true
    }

    fn column_scorer<'a>(&'a self, x: ArrayView2<'a, f64>) -> Result<Box<dyn ColumnScorer + 'a>>;
}

/// Scorer that copies the matrix and predicts from scratch.
pub struct RepredictScorer<'a, C: Classifier + ?Sized> {
    model: &'a C,
    x: ArrayView2<'a, f64>,
    baseline: Vec<u8>,
}

impl<'a, C: Classifier + ?Sized> RepredictScorer<'a, C> {
    pub fn new(model: &'a C, x: ArrayView2<'a, f64>) -> Result<Self> {
        Ok(RepredictScorer {
            baseline: model.predict(x)?,
            model,
            x,
        })
    }
}

impl<C: Classifier + ?Sized> ColumnScorer for RepredictScorer<'_, C> {
    fn baseline(&self) -> Vec<u8> {
        self.baseline.clone()
    }

    fn predict_with_column(&self, j: usize, column: &[f64]) -> Vec<u8> {
        let mut x: Array2<f64> = self.x.to_owned();
        x.column_mut(j).iter_mut().zip(column).for_each(|(d, s)| *d = *s);
        self.model.predict(x.view()).expect("width checked at construction")
    }
}

/// Hyper-parameters of either model family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelParams {
    Rf(ForestParams),
    Svm(SvmParams),
}

impl ModelParams {
    /// `name=[value]; ...` listing of the searched hyper-parameters.
    pub fn echo(&self) -> String {
        match self {
            ModelParams::Rf(p) => format!(
                "n_estimators=[{}]; criterion=[{}]; max_depth=[{}]; max_samples=[{}]",
                p.n_estimators,
                p.criterion,
                p.max_depth.map_or("None".to_string(), |d| d.to_string()),
                p.max_samples
            ),
            ModelParams::Svm(p) => format!(
                "C=[{}]; kernel=[{}]; gamma=[{}]",
                p.c,
                p.kernel,
                match p.gamma {
                    Gamma::Scale => "scale".to_string(),
                    Gamma::Fixed(g) => g.to_string(),
                }
            ),
        }
    }
}

/// A trained model of either family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Model {
    Rf(ForestModel),
    Svm(SvmModel),
}

pub fn train_model(
    params: &ModelParams,
    x: ArrayView2<'_, f64>,
    y: &[u8],
    seed: u64,
    feature_names: &[String],
) -> Result<Model> {
    match params {
        ModelParams::Rf(p) => Ok(Model::Rf(train_forest(x, y, p, seed, feature_names)?)),
        ModelParams::Svm(p) => Ok(Model::Svm(train_svm(x, y, p, feature_names)?)),
    }
}

impl Model {
    pub fn feature_names(&self) -> &[String] {
        match self {
            Model::Rf(m) => &m.feature_names,
            Model::Svm(m) => &m.feature_names,
        }
    }

    fn inner(&self) -> &dyn Classifier {
        match self {
            Model::Rf(m) => m,
            Model::Svm(m) => m,
        }
    }

    /// Classes plus the cropland vote fraction; an SVM reports 0 or 1.
    pub fn predict_scores(&self, x: ArrayView2<'_, f64>) -> Result<(Vec<u8>, Vec<f64>)> {
        match self {
            Model::Rf(m) => m.predict_with_votes(x),
            Model::Svm(m) => {
                let c = m.predict(x)?;
                let f = c.iter().map(|&v| v as f64).collect();
                Ok((c, f))
            }
        }
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        serde_json::to_vec(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(bytes: &[u8]) -> Result<Model> {
        serde_json::from_slice(bytes).map_err(|e| Error::Format(format!("model file: {e}")))
    }

    pub fn read(path: &Path) -> Result<Model> {
        Self::from_json(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

impl Classifier for Model {
    fn n_features(&self) -> usize {
        self.inner().n_features()
    }

    fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<u8>> {
        self.inner().predict(x)
    }

    fn feature_used(&self, j: usize) -> bool {
        self.inner().feature_used(j)
    }

    fn column_scorer<'a>(&'a self, x: ArrayView2<'a, f64>) -> Result<Box<dyn ColumnScorer + 'a>> {
        self.inner().column_scorer(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ() {
        let s: Vec<u64> = (0..100).map(|i| derive_seed(42, i)).collect();
        let mut u = s.clone();
        u.sort();
        u.dedup();
        assert_eq!(u.len(), 100);
        assert_eq!(derive_seed(42, 3), derive_seed(42, 3));
        // reference value of the SplitMix64 finalizer on zero
        assert_eq!(splitmix64(0), 0xE220_A839_7B1D_CDAF);
    }

    #[test]
    fn echo_format() {
        assert_eq!(
            ModelParams::Rf(ForestParams::default()).echo(),
            "n_estimators=[100]; criterion=[entropy]; max_depth=[15]; max_samples=[0.5]"
        );
        assert_eq!(ModelParams::Svm(SvmParams::default()).echo(), "C=[0.5]; kernel=[poly]; gamma=[scale]");
    }

    #[test]
    fn model_params_json() {
        let p: ModelParams = serde_json::from_str(
            r#"{"kind":"rf","n_estimators":10,"criterion":"gini","max_depth":null,"max_samples":1}"#,
        )
        .unwrap();
        match p {
            ModelParams::Rf(f) => {
                assert_eq!(f.max_depth, None);
                assert!(f.bootstrap);
                assert_eq!(f.max_features, MaxFeatures::Sqrt);
            }
            _ => panic!(),
        }
    }
}
