//! Exhaustive hyper-parameter search scored by mean validation accuracy.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use super::forest::ForestParams;
use super::svm::{KernelKind, SvmParams};
use super::tree::Criterion;
use super::{train_model, Classifier, ModelParams};
use crate::error::{Error, Result};
use crate::evaluation::{fmt_metric, metrics, ConfusionCounts, Metrics};
use crate::par;
use crate::spatial_cv::Split;

/// Candidate values per hyper-parameter. Combinations enumerate in
/// lexicographic order of the fields as declared (first field outermost).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HyperParamGrid {
    Rf {
        n_estimators: Vec<usize>,
        criterion: Vec<Criterion>,
        max_depth: Vec<Option<usize>>,
        max_samples: Vec<f64>,
        #[serde(default)]
        base: Option<ForestParams>,
    },
    Svm {
        #[serde(rename = "C")]
        c: Vec<f64>,
        kernel: Vec<KernelKind>,
        #[serde(default)]
        base: Option<SvmParams>,
    },
}

impl HyperParamGrid {
    /// Random-forest search space: 3 x 2 x 3 x 3 = 54 combinations.
    pub fn forest_default() -> Self {
        HyperParamGrid::Rf {
            n_estimators: vec![100, 300, 500],
            criterion: vec![Criterion::Gini, Criterion::Entropy],
            max_depth: vec![Some(5), Some(10), Some(15)],
            max_samples: vec![0.5, 0.8, 1.0],
            base: None,
        }
    }

    /// SVM search space: C in {0.5, 1, 10, 100}, poly and rbf kernels.
    pub fn svm_default() -> Self {
        HyperParamGrid::Svm {
            c: vec![0.5, 1.0, 10.0, 100.0],
            kernel: vec![KernelKind::Poly, KernelKind::Rbf],
            base: None,
        }
    }

    /// A grid holding exactly one combination.
    pub fn single(params: &ModelParams) -> Self {
        match params {
            ModelParams::Rf(p) => HyperParamGrid::Rf {
                n_estimators: vec![p.n_estimators],
                criterion: vec![p.criterion],
                max_depth: vec![p.max_depth],
                max_samples: vec![p.max_samples],
                base: Some(p.clone()),
            },
            ModelParams::Svm(p) => HyperParamGrid::Svm {
                c: vec![p.c],
                kernel: vec![p.kernel],
                base: Some(p.clone()),
            },
        }
    }

    pub fn combinations(&self) -> Vec<ModelParams> {
        let mut out = Vec::new();
        match self {
            HyperParamGrid::Rf {
                n_estimators,
                criterion,
                max_depth,
                max_samples,
                base,
            } => {
                let base = base.clone().unwrap_or_default();
                for &n in n_estimators {
                    for &c in criterion {
                        for &d in max_depth {
                            for &s in max_samples {
                                out.push(ModelParams::Rf(ForestParams {
                                    n_estimators: n,
                                    criterion: c,
                                    max_depth: d,
                                    max_samples: s,
                                    ..base.clone()
                                }));
                            }
                        }
                    }
                }
            }
            HyperParamGrid::Svm { c, kernel, base } => {
                let base = base.clone().unwrap_or_default();
                for &cv in c {
                    for &k in kernel {
                        out.push(ModelParams::Svm(SvmParams {
                            c: cv,
                            kernel: k,
                            ..base.clone()
                        }));
                    }
                }
            }
        }
        out
    }

    fn param_columns(&self) -> &'static [&'static str] {
        match self {
            HyperParamGrid::Rf { .. } => &["n_estimators", "criterion", "max_depth", "max_samples"],
            HyperParamGrid::Svm { .. } => &["C", "kernel", "gamma"],
        }
    }
}

fn param_values(p: &ModelParams) -> Vec<String> {
    match p {
        ModelParams::Rf(f) => vec![
            f.n_estimators.to_string(),
            f.criterion.to_string(),
            f.max_depth.map_or("None".into(), |d| d.to_string()),
            f.max_samples.to_string(),
        ],
        ModelParams::Svm(s) => vec![s.c.to_string(), s.kernel.to_string(), "scale".into()],
    }
}

/// Scores of one combination.
#[derive(Debug, Clone, PartialEq)]
pub struct CvRow {
    pub params: ModelParams,
    pub folds: Vec<Metrics>,
    pub mean: Metrics,
    /// Set when any fold failed to train; such rows never win.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub best_index: usize,
    pub best: ModelParams,
    pub table: Vec<CvRow>,
    columns: &'static [&'static str],
}

impl GridResult {
    /// One row per combination: parameters, mean metrics, per-fold metrics.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let k = self.table.first().map_or(0, |r| r.folds.len());
        let mut header: Vec<String> = self.columns.iter().map(|s| s.to_string()).collect();
        header.extend(["mean_accuracy", "mean_precision", "mean_recall", "mean_f1"].map(String::from));
        for f in 0..k {
            for m in ["accuracy", "precision", "recall", "f1"] {
                header.push(format!("fold{f}_{m}"));
            }
        }
        header.push("status".into());
        let mut w = csv::Writer::from_writer(Vec::new());
        let e = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(&header).map_err(e)?;
        for row in &self.table {
            let mut rec = param_values(&row.params);
            rec.extend(row.mean.as_array().map(fmt_metric));
            for f in 0..k {
                match row.folds.get(f) {
                    Some(m) => rec.extend(m.as_array().map(fmt_metric)),
                    None => rec.extend(std::iter::repeat_n(String::new(), 4)),
                }
            }
            rec.push(row.error.clone().unwrap_or_else(|| "ok".into()));
            w.write_record(&rec).map_err(e)?;
        }
        w.into_inner().map_err(|e| Error::Format(e.to_string()))
    }
}

/// Trains every combination on every split (in parallel) and picks the one
/// with the highest mean validation accuracy; ties keep the earlier one.
pub fn grid_search(
    x: ArrayView2<'_, f64>,
    y: &[u8],
    splits: &[Split],
    grid: &HyperParamGrid,
    seed: u64,
    feature_names: &[String],
) -> Result<GridResult> {
    let combos = grid.combinations();
    if combos.is_empty() {
        return Err(Error::Config("hyper-parameter grid is empty".into()));
    }
    if splits.is_empty() {
        return Err(Error::Fold("no CV splits".into()));
    }
    let k = splits.len();
    let cells: Vec<Result<Metrics>> = par::map_range(combos.len() * k, |cell| {
        let (ci, fi) = (cell / k, cell % k);
        let split = &splits[fi];
        let xt = x.select(ndarray::Axis(0), &split.train);
        let yt: Vec<u8> = split.train.iter().map(|&i| y[i]).collect();
        let model = train_model(&combos[ci], xt.view(), &yt, seed, feature_names)?;
        let xv = x.select(ndarray::Axis(0), &split.validation);
        let yv: Vec<u8> = split.validation.iter().map(|&i| y[i]).collect();
        let pred = model.predict(xv.view())?;
        Ok(metrics(&ConfusionCounts::from_labels(&yv, &pred)))
    });
    let mut table = Vec::with_capacity(combos.len());
    let mut first_error: Option<Error> = None;
    let mut cells = cells.into_iter();
    for params in combos {
        let mut folds = Vec::with_capacity(k);
        let mut error = None;
        for r in cells.by_ref().take(k) {
            match r {
                Ok(m) => folds.push(m),
                Err(e) => {
                    error.get_or_insert_with(|| e.to_string());
                    first_error.get_or_insert(e);
                }
            }
        }
        let mean = if error.is_none() { Metrics::mean(&folds) } else { Metrics::default() };
        table.push(CvRow {
            params,
            folds,
            mean,
            error,
        });
    }
    let mut best_index = None;
    for (i, row) in table.iter().enumerate() {
        if row.error.is_some() {
            continue;
        }
        if best_index.is_none_or(|b: usize| row.mean.accuracy > table[b].mean.accuracy) {
            best_index = Some(i);
        }
    }
    // every combination failed: surface the first failure as is
    let Some(best_index) = best_index else {
        return Err(first_error.expect("a failed row carries an error"));
    };
    Ok(GridResult {
        best_index,
        best: table[best_index].params.clone(),
        table,
        columns: grid.param_columns(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_grid_sizes() {
        assert_eq!(HyperParamGrid::forest_default().combinations().len(), 54);
        assert_eq!(HyperParamGrid::svm_default().combinations().len(), 8);
        let first = &HyperParamGrid::forest_default().combinations()[0];
        assert_eq!(first.echo(), "n_estimators=[100]; criterion=[gini]; max_depth=[5]; max_samples=[0.5]");
    }

    fn toy() -> (Array2<f64>, Vec<u8>, Vec<Split>) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_fn((90, 3), |_| rng.random::<f64>());
        let y: Vec<u8> = x.rows().into_iter().map(|r| (r[1] > 0.5) as u8).collect();
        let splits = (0..3)
            .map(|f| Split {
                train: (0..90).filter(|i| i % 3 != f).collect(),
                validation: (0..90).filter(|i| i % 3 == f).collect(),
            })
            .collect();
        (x, y, splits)
    }

    #[test]
    fn single_combination_wins() {
        let (x, y, splits) = toy();
        let p = ModelParams::Rf(ForestParams { n_estimators: 5, ..Default::default() });
        let names: Vec<String> = (0..3).map(|i| i.to_string()).collect();
        let r = grid_search(x.view(), &y, &splits, &HyperParamGrid::single(&p), 0, &names).unwrap();
        assert_eq!(r.best, p);
        assert_eq!(r.table.len(), 1);
        assert!(r.table[0].mean.accuracy > 0.8);
        let csv = String::from_utf8(r.to_csv().unwrap()).unwrap();
        assert!(csv.starts_with("n_estimators,criterion,max_depth,max_samples,mean_accuracy"));
        assert!(csv.contains("fold2_f1,status"));
    }

    #[test]
    fn failing_cells_are_disqualified() {
        let (x, y, splits) = toy();
        let names: Vec<String> = (0..3).map(|i| i.to_string()).collect();
        let grid = HyperParamGrid::Rf {
            n_estimators: vec![0, 4],
            criterion: vec![Criterion::Gini],
            max_depth: vec![Some(3)],
            max_samples: vec![1.0],
            base: None,
        };
        let r = grid_search(x.view(), &y, &splits, &grid, 0, &names).unwrap();
        assert!(r.table[0].error.is_some());
        assert_eq!(r.best_index, 1);
    }
}
