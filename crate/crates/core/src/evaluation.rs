//! Binary confusion metrics, pixel-weighted aggregation over regions and
//! permutation feature importance.

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifiers::{derive_seed, Classifier};
use crate::error::{Error, Result};
use crate::par;

/// Confusion counts with cropland (1) as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn from_labels(truth: &[u8], predicted: &[u8]) -> ConfusionCounts {
        let mut c = ConfusionCounts::default();
        for (&t, &p) in truth.iter().zip(predicted) {
            match (t == 1, p == 1) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (true, false) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Metrics {
    pub fn as_array(&self) -> [f64; 4] {
        [self.accuracy, self.precision, self.recall, self.f1]
    }

    fn from_array(a: [f64; 4]) -> Self {
        Metrics {
            accuracy: a[0],
            precision: a[1],
            recall: a[2],
            f1: a[3],
        }
    }

    /// Unweighted mean over folds.
    pub fn mean(items: &[Metrics]) -> Metrics {
        let mut s = [0.0; 4];
        for m in items {
            for (a, b) in s.iter_mut().zip(m.as_array()) {
                *a += b;
            }
        }
        let n = items.len().max(1) as f64;
        Metrics::from_array(s.map(|v| v / n))
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy, precision, recall and F1; every 0/0 evaluates to 0.
pub fn metrics(c: &ConfusionCounts) -> Metrics {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Metrics {
        accuracy: ratio(c.tp + c.tn, c.total()),
        precision,
        recall,
        f1,
    }
}

/// Fraction of matching labels.
pub fn accuracy(truth: &[u8], predicted: &[u8]) -> f64 {
    let hits = truth.iter().zip(predicted).filter(|(a, b)| a == b).count();
    ratio(hits as u64, truth.len() as u64)
}

/// Per-metric average weighted by pixel count.
pub fn weighted_average(per_region: &[(Metrics, u64)]) -> Result<Metrics> {
    if per_region.is_empty() || per_region.iter().any(|&(_, n)| n == 0) {
        return Err(Error::Data("weighted average needs regions with positive pixel counts".into()));
    }
    let total: f64 = per_region.iter().map(|&(_, n)| n as f64).sum();
    let mut acc = [0.0; 4];
    for (m, n) in per_region {
        for (a, v) in acc.iter_mut().zip(m.as_array()) {
            *a += *n as f64 * v;
        }
    }
    Ok(Metrics::from_array(acc.map(|v| v / total)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub name: String,
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
    pub pixel_count: u64,
}

impl RegionReport {
    pub fn new(name: impl Into<String>, truth: &[u8], predicted: &[u8]) -> Self {
        let counts = ConfusionCounts::from_labels(truth, predicted);
        RegionReport {
            name: name.into(),
            metrics: metrics(&counts),
            pixel_count: counts.total(),
            counts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub model_id: String,
    pub regions: Vec<RegionReport>,
    pub weighted: Metrics,
}

impl EvaluationReport {
    pub fn new(model_id: impl Into<String>, regions: Vec<RegionReport>) -> Result<Self> {
        let weights: Vec<(Metrics, u64)> = regions.iter().map(|r| (r.metrics, r.pixel_count)).collect();
        Ok(EvaluationReport {
            model_id: model_id.into(),
            weighted: weighted_average(&weights)?,
            regions,
        })
    }

    /// One row per region plus a final weighted-average row.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let e = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(["region", "pixels", "tp", "fp", "fn", "tn", "accuracy", "precision", "recall", "f1"])
            .map_err(e)?;
        for r in &self.regions {
            let c = r.counts;
            let mut rec = vec![r.name.clone(), r.pixel_count.to_string()];
            rec.extend([c.tp, c.fp, c.fn_, c.tn].map(|v| v.to_string()));
            rec.extend(r.metrics.as_array().map(fmt_metric));
            w.write_record(&rec).map_err(e)?;
        }
        let total: u64 = self.regions.iter().map(|r| r.pixel_count).sum();
        let mut rec = vec!["weighted_average".to_string(), total.to_string()];
        rec.extend(["", "", "", ""].map(String::from));
        rec.extend(self.weighted.as_array().map(fmt_metric));
        w.write_record(&rec).map_err(e)?;
        w.into_inner().map_err(|e| Error::Format(e.to_string()))
    }
}

pub(crate) fn fmt_metric(v: f64) -> String {
    format!("{v:.6}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceEntry {
    pub feature: usize,
    pub name: String,
    pub mean: f64,
    pub std: f64,
    pub n_repeats: usize,
}

/// Importances sorted by decreasing mean (ties by column index).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTable {
    pub baseline_accuracy: f64,
    pub entries: Vec<ImportanceEntry>,
}

impl ImportanceTable {
    pub fn rank_of(&self, feature: usize) -> Option<usize> {
        self.entries.iter().position(|e| e.feature == feature)
    }

    pub fn by_feature(&self, feature: usize) -> Option<&ImportanceEntry> {
        self.entries.iter().find(|e| e.feature == feature)
    }

    /// Entries whose mean exceeds `threshold`.
    pub fn headline(&self, threshold: f64) -> Vec<&ImportanceEntry> {
        self.entries.iter().filter(|e| e.mean > threshold).collect()
    }

    /// `feature_name,mean,std,rank` CSV, rank starting at 1.
    pub fn to_csv(&self, threshold: Option<f64>) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let e = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(["feature_name", "mean", "std", "rank"]).map_err(e)?;
        for (i, en) in self.entries.iter().enumerate() {
            if threshold.is_some_and(|t| en.mean <= t) {
                continue;
            }
            w.write_record([en.name.clone(), format!("{:.9}", en.mean), format!("{:.9}", en.std), (i + 1).to_string()])
                .map_err(e)?;
        }
        w.into_inner().map_err(|e| Error::Format(e.to_string()))
    }
}

/// Accuracy drop when each column is shuffled, over `n_repeats` seeded
/// permutations per column. Permutation `(j, r)` uses a seed derived from
/// `(seed, j, r)`, so results do not depend on scheduling.
pub fn permutation_importance<C: Classifier + ?Sized>(
    model: &C,
    x: ArrayView2<'_, f64>,
    y: &[u8],
    names: &[String],
    n_repeats: usize,
    seed: u64,
) -> Result<ImportanceTable> {
    if x.ncols() != model.n_features() {
        return Err(Error::Schema(format!(
            "model expects {} features, matrix has {}",
            model.n_features(),
            x.ncols()
        )));
    }
    if x.nrows() != y.len() || names.len() != x.ncols() {
        return Err(Error::Schema("labels or names do not match the matrix".into()));
    }
    if n_repeats == 0 {
        return Err(Error::Config("n_repeats must be positive".into()));
    }
    let scorer = model.column_scorer(x)?;
    let base = accuracy(y, &scorer.baseline());
    let drops: Vec<Vec<f64>> = par::map_range(x.ncols(), |j| {
        if !model.feature_used(j) {
            return vec![0.0; n_repeats];
        }
        let original: Vec<f64> = x.column(j).to_vec();
        (0..n_repeats)
            .map(|r| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(seed, j as u64), r as u64));
                let mut col = original.clone();
                col.shuffle(&mut rng);
                base - accuracy(y, &scorer.predict_with_column(j, &col))
            })
            .collect()
    });
    let mut entries: Vec<ImportanceEntry> = drops
        .iter()
        .enumerate()
        .map(|(j, d)| {
            let n = d.len() as f64;
            let mean = d.iter().sum::<f64>() / n;
            let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            ImportanceEntry {
                feature: j,
                name: names[j].clone(),
                mean,
                std: var.sqrt(),
                n_repeats,
            }
        })
        .collect();
    entries.sort_by(|a, b| b.mean.total_cmp(&a.mean).then(a.feature.cmp(&b.feature)));
    Ok(ImportanceTable {
        baseline_accuracy: base,
        entries,
    })
}
