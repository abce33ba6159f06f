//! Soft-margin kernel SVM trained by sequential minimal optimization.
//!
//! The dual is solved in the form `min 1/2 a'Qa - e'a` subject to
//! `0 <= a_i <= C` and `y'a = 0`, with `Q_ij = y_i y_j K(x_i, x_j)`. Each
//! step updates the maximal-violating pair chosen with second-order
//! information, and stops once the KKT gap falls under the tolerance.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{Classifier, ColumnScorer, RepredictScorer};
use crate::error::{Error, Result};
use crate::par;

const TAU: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Poly,
    Rbf,
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelKind::Poly => "poly",
            KernelKind::Rbf => "rbf",
        })
    }
}

impl FromStr for KernelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "poly" => Ok(KernelKind::Poly),
            "rbf" => Ok(KernelKind::Rbf),
            o => Err(Error::Config(format!("unknown kernel {o:?}"))),
        }
    }
}

/// Kernel width. Only the data-driven `scale` rule is exposed in configs,
/// a fixed value is kept for tests and embedding.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gamma {
    /// `1 / (D * var(X))` over all entries of the training matrix.
    #[default]
    Scale,
    Fixed(f64),
}

fn default_degree() -> u32 {
    3
}
fn default_tol() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmParams {
    #[serde(rename = "C")]
    pub c: f64,
    pub kernel: KernelKind,
    #[serde(default)]
    pub gamma: Gamma,
    #[serde(default = "default_degree")]
    pub degree: u32,
    #[serde(default)]
    pub coef0: f64,
    /// KKT gap at which SMO stops.
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Iteration budget; defaults to `max(10^7, 100 N)`.
    #[serde(default)]
    pub max_iter: Option<usize>,
}

impl Default for SvmParams {
    fn default() -> Self {
        SvmParams {
            c: 0.5,
            kernel: KernelKind::Poly,
            gamma: Gamma::Scale,
            degree: 3,
            coef0: 0.0,
            tol: 1e-3,
            max_iter: None,
        }
    }
}

impl SvmParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0) || !self.c.is_finite() {
            return Err(Error::Config(format!("C must be positive, got {}", self.c)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config("tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// `1 / (D * var)` with the population variance of every entry of `x`.
pub fn gamma_scale(x: ArrayView2<'_, f64>) -> Result<f64> {
    let n = x.len() as f64;
    if n == 0.0 {
        return Err(Error::Config("cannot derive gamma from an empty matrix".into()));
    }
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if !(var > 0.0) {
        return Err(Error::Config("gamma=scale undefined: training matrix has zero variance".into()));
    }
    Ok(1.0 / (x.ncols() as f64 * var))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub kind: KernelKind,
    pub gamma: f64,
    pub degree: u32,
    pub coef0: f64,
}

impl Kernel {
    #[inline]
    pub fn eval(&self, a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
        match self.kind {
            KernelKind::Rbf => {
                let d2: f64 = a.iter().zip(b.iter()).map(|(u, v)| (u - v) * (u - v)).sum();
                (-self.gamma * d2).exp()
            }
            KernelKind::Poly => (self.gamma * a.dot(&b) + self.coef0).powi(self.degree as i32),
        }
    }
}

/// Solution of the dual problem.
#[derive(Debug, Clone, PartialEq)]
pub struct DualSolution {
    pub alpha: Vec<f64>,
    /// Intercept of `f(x) = sum a_i y_i K(x_i, x) + b`.
    pub b: f64,
    /// Dual objective `sum a - 1/2 a'Qa` at `alpha`.
    pub objective: f64,
    pub iterations: usize,
    /// Final KKT gap.
    pub gap: f64,
}

/// Bounded FIFO cache of kernel matrix rows.
struct KernelRows<'a> {
    x: ArrayView2<'a, f64>,
    kernel: Kernel,
    capacity: usize,
    rows: Mutex<(Vec<Option<std::sync::Arc<Vec<f64>>>>, VecDeque<usize>)>,
}

impl<'a> KernelRows<'a> {
    fn new(x: ArrayView2<'a, f64>, kernel: Kernel, budget_bytes: usize) -> Self {
        let n = x.nrows();
        let capacity = (budget_bytes / (8 * n.max(1))).max(2);
        KernelRows {
            x,
            kernel,
            capacity,
            rows: Mutex::new((vec![None; n], VecDeque::new())),
        }
    }

    fn row(&self, i: usize) -> std::sync::Arc<Vec<f64>> {
        if let Some(r) = &self.rows.lock().unwrap().0[i] {
            return r.clone();
        }
        let xi = self.x.row(i);
        let r = std::sync::Arc::new(par::map_range(self.x.nrows(), |j| self.kernel.eval(xi, self.x.row(j))));
        let mut g = self.rows.lock().unwrap();
        let (slots, order) = &mut *g;
        if order.len() >= self.capacity {
            if let Some(old) = order.pop_front() {
                slots[old] = None;
            }
        }
        slots[i] = Some(r.clone());
        order.push_back(i);
        r
    }
}

/// Runs SMO on rows of `x` with labels `y` in {-1, +1}.
pub fn solve_dual(x: ArrayView2<'_, f64>, y: &[f64], c: f64, kernel: Kernel, tol: f64, max_iter: usize) -> Result<DualSolution> {
    let n = x.nrows();
    let cache = KernelRows::new(x, kernel, 256 << 20);
    let diag: Vec<f64> = (0..n).map(|i| kernel.eval(x.row(i), x.row(i))).collect();
    let mut alpha = vec![0.0; n];
    // gradient of 1/2 a'Qa - e'a
    let mut grad = vec![-1.0; n];
    let up = |a: f64, yi: f64| (yi > 0.0 && a < c) || (yi < 0.0 && a > 0.0);
    let low = |a: f64, yi: f64| (yi > 0.0 && a > 0.0) || (yi < 0.0 && a < c);

    let mut iter = 0;
    let mut gap;
    loop {
        // first index: maximal violation over the "up" set
        let mut g_max = f64::NEG_INFINITY;
        let mut i_sel = usize::MAX;
        for t in 0..n {
            if up(alpha[t], y[t]) && -y[t] * grad[t] >= g_max {
                g_max = -y[t] * grad[t];
                i_sel = t;
            }
        }
        let mut g_min = f64::INFINITY;
        for t in 0..n {
            if low(alpha[t], y[t]) {
                g_min = g_min.min(-y[t] * grad[t]);
            }
        }
        gap = g_max - g_min;
        if i_sel == usize::MAX || gap < tol {
            break;
        }
        if iter >= max_iter {
            return Err(Error::Convergence {
                iterations: iter,
                violation: gap,
            });
        }
        let i = i_sel;
        let ki = cache.row(i);
        // second index: largest objective decrease among violators
        let mut j_sel = usize::MAX;
        let mut best = f64::INFINITY;
        for t in 0..n {
            if !low(alpha[t], y[t]) {
                continue;
            }
            let b = g_max + y[t] * grad[t];
            if b <= 0.0 {
                continue;
            }
            let mut a = diag[i] + diag[t] - 2.0 * ki[t];
            if a <= 0.0 {
                a = TAU;
            }
            let score = -(b * b) / a;
            if score <= best {
                best = score;
                j_sel = t;
            }
        }
        if j_sel == usize::MAX {
            break;
        }
        let j = j_sel;
        let kj = cache.row(j);
        let (old_i, old_j) = (alpha[i], alpha[j]);
        let mut quad = diag[i] + diag[j] - 2.0 * ki[j];
        if quad <= 0.0 {
            quad = TAU;
        }
        if y[i] != y[j] {
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for t in 0..n {
            grad[t] += y[t] * (y[i] * ki[t] * di + y[j] * kj[t] * dj);
        }
        iter += 1;
    }

    // intercept from free vectors, or the midpoint of the feasible interval
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut n_free, mut sum_free) = (0usize, 0.0);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            n_free += 1;
            sum_free += yg;
        }
    }
    let rho = if n_free > 0 { sum_free / n_free as f64 } else { (ub + lb) / 2.0 };
    // 1/2 a'Qa - e'a = 1/2 sum a_i (g_i - 1)
    let primal_form: f64 = alpha.iter().zip(&grad).map(|(a, g)| a * (g - 1.0)).sum::<f64>() / 2.0;
    Ok(DualSolution {
        alpha,
        b: -rho,
        objective: -primal_form,
        iterations: iter,
        gap,
    })
}

/// Dual objective `sum a - 1/2 sum_ij a_i a_j y_i y_j K_ij` from an explicit
/// kernel matrix.
pub fn dual_objective(alpha: &[f64], y: &[f64], k: &[Vec<f64>]) -> f64 {
    let mut quad = 0.0;
    for i in 0..alpha.len() {
        for j in 0..alpha.len() {
            quad += alpha[i] * alpha[j] * y[i] * y[j] * k[i][j];
        }
    }
    alpha.iter().sum::<f64>() - 0.5 * quad
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    #[serde(rename = "sv")]
    pub support_vectors: Vec<Vec<f64>>,
    pub alpha_y: Vec<f64>,
    pub b: f64,
    pub params: SvmParams,
    pub kernel: Kernel,
    pub feature_names: Vec<String>,
    pub iterations: usize,
}

/// Trains on binary labels; class 1 maps to +1 and class 0 to -1.
pub fn train_svm(x: ArrayView2<'_, f64>, y: &[u8], params: &SvmParams, feature_names: &[String]) -> Result<SvmModel> {
    params.validate()?;
    if x.nrows() != y.len() || x.nrows() < 2 {
        return Err(Error::Data("SVM needs at least 2 rows with matching labels".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("SVM input contains non-finite values".into()));
    }
    if feature_names.len() != x.ncols() {
        return Err(Error::Schema("feature name count differs from matrix width".into()));
    }
    let ys: Vec<f64> = y.iter().map(|&c| if c == 1 { 1.0 } else { -1.0 }).collect();
    if ys.iter().all(|&v| v == ys[0]) {
        return Err(Error::Data("SVM training labels hold a single class".into()));
    }
    let gamma = match params.gamma {
        Gamma::Scale => gamma_scale(x)?,
        Gamma::Fixed(g) => g,
    };
    let kernel = Kernel {
        kind: params.kernel,
        gamma,
        degree: params.degree,
        coef0: params.coef0,
    };
    let max_iter = params.max_iter.unwrap_or_else(|| (100 * x.nrows()).max(10_000_000));
    let sol = solve_dual(x, &ys, params.c, kernel, params.tol, max_iter)?;
    let mut support_vectors = Vec::new();
    let mut alpha_y = Vec::new();
    for (i, &a) in sol.alpha.iter().enumerate() {
        if a > 0.0 {
            support_vectors.push(x.row(i).to_vec());
            alpha_y.push(a * ys[i]);
        }
    }
    Ok(SvmModel {
        support_vectors,
        alpha_y,
        b: sol.b,
        params: params.clone(),
        kernel,
        feature_names: feature_names.to_vec(),
        iterations: sol.iterations,
    })
}

impl SvmModel {
    pub fn decision(&self, row: ArrayView1<'_, f64>) -> f64 {
        self.support_vectors
            .iter()
            .zip(&self.alpha_y)
            .map(|(sv, ay)| ay * self.kernel.eval(ArrayView1::from(sv.as_slice()), row))
            .sum::<f64>()
            + self.b
    }
}

impl Classifier for SvmModel {
    fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<u8>> {
        if x.ncols() != self.n_features() {
            return Err(Error::Schema(format!(
                "model expects {} features, matrix has {}",
                self.n_features(),
                x.ncols()
            )));
        }
        Ok(par::map_range(x.nrows(), |i| (self.decision(x.row(i)) > 0.0) as u8))
    }

    fn column_scorer<'a>(&'a self, x: ArrayView2<'a, f64>) -> Result<Box<dyn ColumnScorer + 'a>> {
        Ok(Box::new(RepredictScorer::new(self, x)?))
    }
}
