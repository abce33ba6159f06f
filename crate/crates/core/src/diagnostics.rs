//! Label-quality and spatial-autocorrelation diagnostics.
//!
//! Savitzky-Golay smoothing, per-class weekly NDVI profiles, the empirical
//! semivariogram and a weighted spherical-model fit.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::fmt_metric;
use crate::features::ndvi;
use crate::par;
use crate::preprocess::{CompositeStack, WEEKS};
use crate::raster_io::{Band, LabelRaster, CROPLAND, NON_CROPLAND};

/// How windows are formed near the ends of the series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeMode {
    /// Fit the polynomial to the first (last) full window and evaluate it
    /// at the edge position. Reproduces polynomials up to `order` exactly.
    #[default]
    Interp,
    /// Reflect the series about its end points (the end sample is not
    /// repeated).
    Mirror,
}

impl FromStr for EdgeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "interp" => Ok(EdgeMode::Interp),
            "mirror" => Ok(EdgeMode::Mirror),
            o => Err(Error::Config(format!("unknown edge mode {o:?}"))),
        }
    }
}

impl fmt::Display for EdgeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EdgeMode::Interp => "interp",
            EdgeMode::Mirror => "mirror",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SavgolParams {
    pub window: usize,
    pub order: usize,
    #[serde(default)]
    pub edge: EdgeMode,
}

impl Default for SavgolParams {
    fn default() -> Self {
        SavgolParams {
            window: 9,
            order: 3,
            edge: EdgeMode::Interp,
        }
    }
}

/// Weights that evaluate, at offset `u` from the window center, the
/// least-squares polynomial of degree `order` through `window` samples.
pub fn savgol_weights(window: usize, order: usize, u: f64) -> Vec<f64> {
    let half = (window / 2) as f64;
    let a = DMatrix::from_fn(window, order + 1, |i, j| (i as f64 - half).powi(j as i32));
    let pinv = a.clone().pseudo_inverse(1e-12).expect("svd of a Vandermonde block");
    let basis: Vec<f64> = (0..=order).map(|j| u.powi(j as i32)).collect();
    (0..window)
        .map(|i| (0..=order).map(|j| basis[j] * pinv[(j, i)]).sum())
        .collect()
}

fn check_savgol(len: usize, window: usize, order: usize) -> Result<()> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::Config(format!("Savitzky-Golay window must be odd, got {window}")));
    }
    if order >= window {
        return Err(Error::Config(format!("polynomial order {order} must be below window {window}")));
    }
    if window > len {
        return Err(Error::Config(format!("window {window} exceeds series length {len}")));
    }
    Ok(())
}

/// Savitzky-Golay smoothing with [`EdgeMode::Interp`] edges.
pub fn savgol_smooth(series: &[f64], window: usize, order: usize) -> Result<Vec<f64>> {
    savgol_smooth_with(series, window, order, EdgeMode::Interp)
}

pub fn savgol_smooth_with(series: &[f64], window: usize, order: usize, edge: EdgeMode) -> Result<Vec<f64>> {
    let n = series.len();
    check_savgol(n, window, order)?;
    let half = window / 2;
    let center = savgol_weights(window, order, 0.0);
    let dot = |w: &[f64], start: usize| -> f64 { w.iter().zip(&series[start..start + window]).map(|(a, b)| a * b).sum() };
    let mut out = vec![0.0; n];
    for i in half..n - half {
        out[i] = dot(&center, i - half);
    }
    match edge {
        EdgeMode::Interp => {
            for i in (0..half).chain(n - half..n) {
                let start = if i < half { 0 } else { n - window };
                let u = i as f64 - (start + half) as f64;
                out[i] = dot(&savgol_weights(window, order, u), start);
            }
        }
        EdgeMode::Mirror => {
            if n == 1 {
                out[0] = series[0] * center.iter().sum::<f64>();
                return Ok(out);
            }
            let at = |k: isize| -> f64 {
                let m = (n - 1) as isize;
                let mut k = k;
                // repeated reflection handles windows longer than the series
                loop {
                    if k < 0 {
                        k = -k;
                    } else if k > m {
                        k = 2 * m - k;
                    } else {
                        return series[k as usize];
                    }
                }
            };
            for i in (0..half).chain(n - half..n) {
                out[i] = center
                    .iter()
                    .enumerate()
                    .map(|(j, w)| w * at(i as isize + j as isize - half as isize))
                    .sum();
            }
        }
    }
    Ok(out)
}

/// Weekly NDVI statistics of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub n_pixels: usize,
    pub mean: Vec<f64>,
    /// Population standard deviation.
    pub std: Vec<f64>,
    pub smoothed_mean: Vec<f64>,
    pub smoothed_std: Vec<f64>,
}

/// Per-class profiles indexed by class code; `None` marks a class without
/// labeled pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NdviProfile {
    pub smoothing: SavgolParams,
    pub classes: [Option<ClassProfile>; 2],
}

impl NdviProfile {
    pub fn cropland(&self) -> Option<&ClassProfile> {
        self.classes[CROPLAND as usize].as_ref()
    }

    pub fn non_cropland(&self) -> Option<&ClassProfile> {
        self.classes[NON_CROPLAND as usize].as_ref()
    }

    /// `week,class,n_pixels,mean,std,smoothed_mean,smoothed_std`; absent
    /// classes contribute no rows.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let e = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(["week", "class", "n_pixels", "mean", "std", "smoothed_mean", "smoothed_std"])
            .map_err(e)?;
        for (c, p) in self.classes.iter().enumerate() {
            let Some(p) = p else { continue };
            let name = if c as u8 == CROPLAND { "cropland" } else { "non_cropland" };
            for wk in 0..p.mean.len() {
                w.write_record([
                    wk.to_string(),
                    name.to_string(),
                    p.n_pixels.to_string(),
                    fmt_float(p.mean[wk]),
                    fmt_float(p.std[wk]),
                    fmt_float(p.smoothed_mean[wk]),
                    fmt_float(p.smoothed_std[wk]),
                ])
                .map_err(e)?;
            }
        }
        w.into_inner().map_err(|e| Error::Format(e.to_string()))
    }
}

fn fmt_float(v: f64) -> String {
    format!("{v:.9}")
}

/// Per-pixel weekly NDVI of an imputed composite.
pub fn ndvi_series(stack: &CompositeStack, p: usize) -> Result<Vec<f64>> {
    let red = stack
        .band_index(Band::B04)
        .ok_or_else(|| Error::Schema("composite lacks band B04".into()))?;
    let nir = stack
        .band_index(Band::B08)
        .ok_or_else(|| Error::Schema("composite lacks band B08".into()))?;
    let (r, n) = (stack.series(p, red), stack.series(p, nir));
    let out: Vec<f64> = n.iter().zip(r).map(|(&n, &r)| ndvi(n, r)).collect();
    if out.iter().any(|v| v.is_nan()) {
        return Err(Error::Data(format!("pixel {p} has gaps; impute before profiling")));
    }
    Ok(out)
}

/// Weekly mean and population std of NDVI per class over labeled,
/// non-removed pixels, plus their Savitzky-Golay smoothed versions.
pub fn class_ndvi_profile(stack: &CompositeStack, labels: &LabelRaster, smooth: SavgolParams) -> Result<NdviProfile> {
    if labels.width != stack.width || labels.height != stack.height {
        return Err(Error::Schema(format!(
            "label raster {}x{} does not match composite {}x{}",
            labels.height, labels.width, stack.height, stack.width
        )));
    }
    check_savgol(WEEKS, smooth.window, smooth.order)?;
    let mut groups: [Vec<Vec<f64>>; 2] = [Vec::new(), Vec::new()];
    for (p, &lab) in labels.values.iter().enumerate() {
        if lab > 1 || stack.removed[p] {
            continue;
        }
        groups[lab as usize].push(ndvi_series(stack, p)?);
    }
    let mut classes: [Option<ClassProfile>; 2] = [None, None];
    for (c, g) in groups.iter().enumerate() {
        if g.is_empty() {
            continue;
        }
        let n = g.len() as f64;
        let mut mean = vec![0.0; WEEKS];
        let mut std = vec![0.0; WEEKS];
        for wk in 0..WEEKS {
            let m = g.iter().map(|s| s[wk]).sum::<f64>() / n;
            mean[wk] = m;
            std[wk] = (g.iter().map(|s| (s[wk] - m).powi(2)).sum::<f64>() / n).sqrt();
        }
        classes[c] = Some(ClassProfile {
            n_pixels: g.len(),
            smoothed_mean: savgol_smooth_with(&mean, smooth.window, smooth.order, smooth.edge)?,
            smoothed_std: savgol_smooth_with(&std, smooth.window, smooth.order, smooth.edge)?,
            mean,
            std,
        });
    }
    Ok(NdviProfile {
        smoothing: smooth,
        classes,
    })
}

/// Point subsampling applied before pair accumulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subsample {
    /// Keep every `n`-th sample starting with the first.
    Stride(usize),
    /// Keep `n` samples drawn without replacement, in input order.
    Random { n: usize, seed: u64 },
}

impl Default for Subsample {
    fn default() -> Self {
        Subsample::Stride(2000)
    }
}

impl Subsample {
    pub fn apply<T: Copy>(&self, samples: &[T]) -> Result<Vec<T>> {
        match *self {
            Subsample::Stride(0) => Err(Error::Config("subsample stride must be positive".into())),
            Subsample::Stride(s) => Ok(samples.iter().step_by(s).copied().collect()),
            Subsample::Random { n, seed } => {
                if n >= samples.len() {
                    return Ok(samples.to_vec());
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut idx = index::sample(&mut rng, samples.len(), n).into_vec();
                idx.sort_unstable();
                Ok(idx.into_iter().map(|i| samples[i]).collect())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphericalFit {
    pub nugget: f64,
    pub sill: f64,
    pub range: f64,
    /// Pair-weighted squared error at the returned parameters.
    pub objective: f64,
    /// Set when every bin has zero semivariance.
    pub degenerate: bool,
}

/// Binned empirical semivariogram. Only non-empty bins are kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Semivariogram {
    pub bin_width: f64,
    pub max_lag: f64,
    /// Bin centers in map units.
    pub lags: Vec<f64>,
    pub counts: Vec<u64>,
    pub gamma: Vec<f64>,
    pub fit: Option<SphericalFit>,
}

impl Semivariogram {
    /// `lag,count,gamma` rows.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let e = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(["lag", "count", "gamma"]).map_err(e)?;
        for i in 0..self.lags.len() {
            w.write_record([fmt_metric(self.lags[i]), self.counts[i].to_string(), fmt_float(self.gamma[i])])
                .map_err(e)?;
        }
        w.into_inner().map_err(|e| Error::Format(e.to_string()))
    }

    /// Bin width, lag limit and fitted parameters.
    pub fn sidecar_json(&self) -> String {
        serde_json::to_string_pretty(&serde_json::json!({
            "bin_width": self.bin_width,
            "max_lag": self.max_lag,
            "fit": self.fit,
        }))
        .expect("variogram sidecar")
    }
}

/// Rows of the outer loop handled per task; fixed so that the reduction
/// order, and hence every floating-point sum, is schedule independent.
const PAIR_CHUNK: usize = 64;

/// `gamma(h) = sum (z_i - z_j)^2 / (2 N(h))` over unordered pairs with
/// distance at most `max_lag`, binned by `floor(d / bin_width)`.
pub fn empirical_semivariogram(
    samples: &[(f64, f64, f64)],
    bin_width: f64,
    max_lag: f64,
    subsample: Subsample,
) -> Result<Semivariogram> {
    if !(bin_width > 0.0) || !(max_lag > 0.0) {
        return Err(Error::Config("bin width and maximum lag must be positive".into()));
    }
    let pts = subsample.apply(samples)?;
    if pts.len() < 2 {
        return Err(Error::Data(format!("semivariogram needs at least 2 samples, have {}", pts.len())));
    }
    let nbins = (max_lag / bin_width).ceil() as usize;
    let n = pts.len();
    let partial: Vec<(Vec<u64>, Vec<f64>)> = par::map_range(n.div_ceil(PAIR_CHUNK), |c| {
        let mut cnt = vec![0u64; nbins];
        let mut sum = vec![0.0f64; nbins];
        for i in c * PAIR_CHUNK..((c + 1) * PAIR_CHUNK).min(n) {
            let (xi, yi, zi) = pts[i];
            for &(xj, yj, zj) in &pts[i + 1..] {
                let d = (xi - xj).hypot(yi - yj);
                if d > max_lag {
                    continue;
                }
                let b = ((d / bin_width) as usize).min(nbins - 1);
                cnt[b] += 1;
                sum[b] += (zi - zj) * (zi - zj);
            }
        }
        (cnt, sum)
    });
    let mut cnt = vec![0u64; nbins];
    let mut sum = vec![0.0f64; nbins];
    for (c, s) in &partial {
        for b in 0..nbins {
            cnt[b] += c[b];
            sum[b] += s[b];
        }
    }
    let mut vg = Semivariogram {
        bin_width,
        max_lag,
        lags: Vec::new(),
        counts: Vec::new(),
        gamma: Vec::new(),
        fit: None,
    };
    for b in 0..nbins {
        if cnt[b] > 0 {
            vg.lags.push((b as f64 + 0.5) * bin_width);
            vg.counts.push(cnt[b]);
            vg.gamma.push(sum[b] / (2.0 * cnt[b] as f64));
        }
    }
    Ok(vg)
}

/// `n + s (1.5 h/a - 0.5 (h/a)^3)` for `h <= a`, `n + s` beyond.
pub fn spherical(h: f64, nugget: f64, sill: f64, range: f64) -> f64 {
    if h >= range {
        nugget + sill
    } else {
        let r = h / range;
        nugget + sill * (1.5 * r - 0.5 * r * r * r)
    }
}

/// Pair-weighted squared error of a spherical model against `vg`.
pub fn spherical_objective(vg: &Semivariogram, p: [f64; 3]) -> f64 {
    vg.lags
        .iter()
        .zip(&vg.counts)
        .zip(&vg.gamma)
        .map(|((&h, &c), &g)| c as f64 * (g - spherical(h, p[0], p[1], p[2])).powi(2))
        .sum()
}

const GRID_STEPS: usize = 20;
const REFINE_CYCLES: usize = 60;

/// Spherical model parameters minimizing [`spherical_objective`].
///
/// A coarse grid over nugget, sill and range is followed by cycles of
/// golden-section searches along one coordinate at a time; a move is kept
/// only if it lowers the objective, so the result is never worse than the
/// best grid point.
pub fn fit_spherical(vg: &Semivariogram) -> Result<SphericalFit> {
    if vg.lags.len() < 3 {
        return Err(Error::Data(format!("spherical fit needs at least 3 non-empty bins, have {}", vg.lags.len())));
    }
    let gmax = vg.gamma.iter().cloned().fold(0.0, f64::max);
    if gmax == 0.0 {
        return Ok(SphericalFit {
            nugget: 0.0,
            sill: 0.0,
            range: vg.lags[0],
            objective: 0.0,
            degenerate: true,
        });
    }
    let a_max = vg.max_lag;
    let lo = [0.0, 0.0, a_max * 1e-6];
    let hi = [2.0 * gmax, 2.0 * gmax, a_max];
    let step = [gmax / GRID_STEPS as f64, 1.5 * gmax / GRID_STEPS as f64, a_max / GRID_STEPS as f64];
    let mut best = [0.0, 0.0, a_max];
    let mut best_f = f64::INFINITY;
    for i in 0..=GRID_STEPS {
        for j in 0..=GRID_STEPS {
            for k in 1..=GRID_STEPS {
                let p = [
                    gmax * i as f64 / GRID_STEPS as f64,
                    1.5 * gmax * j as f64 / GRID_STEPS as f64,
                    a_max * k as f64 / GRID_STEPS as f64,
                ];
                let f = spherical_objective(vg, p);
                if f < best_f {
                    best_f = f;
                    best = p;
                }
            }
        }
    }
    let mut width = step;
    for _ in 0..REFINE_CYCLES {
        for c in 0..3 {
            let a = (best[c] - width[c]).max(lo[c]);
            let b = (best[c] + width[c]).min(hi[c]);
            let mut trial = best;
            let x = golden_section(a, b, |v| {
                trial[c] = v;
                spherical_objective(vg, trial)
            });
            trial[c] = x;
            let f = spherical_objective(vg, trial);
            if f < best_f {
                best_f = f;
                best = trial;
            }
        }
        for w in &mut width {
            *w *= 0.75;
        }
    }
    Ok(SphericalFit {
        nugget: best[0],
        sill: best[1],
        range: best[2],
        objective: best_f,
        degenerate: false,
    })
}

fn golden_section(mut a: f64, mut b: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..80 {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    if fc <= fd {
        c
    } else {
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn savgol_center_weights_match_tables() {
        // classic 5-point quadratic smoothing weights (-3, 12, 17, 12, -3) / 35
        let w = savgol_weights(5, 2, 0.0);
        let want = [-3.0, 12.0, 17.0, 12.0, -3.0].map(|v| v / 35.0);
        for (a, b) in w.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn savgol_preconditions() {
        let s = vec![0.0; 10];
        assert!(matches!(savgol_smooth(&s, 4, 2), Err(Error::Config(_))));
        assert!(matches!(savgol_smooth(&s, 5, 5), Err(Error::Config(_))));
        assert!(matches!(savgol_smooth(&s, 11, 3), Err(Error::Config(_))));
        assert!(savgol_smooth(&s, 9, 3).is_ok());
    }

    #[test]
    fn cubic_is_reproduced_in_both_interior_and_edges() {
        let s: Vec<f64> = (0..53).map(|i| {
            let t = i as f64 / 10.0;
            0.3 - 0.2 * t + 0.05 * t * t - 0.01 * t * t * t
        }).collect();
        let out = savgol_smooth(&s, 9, 3).unwrap();
        for (a, b) in out.iter().zip(&s) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn mirror_keeps_constants_and_linear_interior() {
        let s = vec![0.4; 20];
        for v in savgol_smooth_with(&s, 9, 3, EdgeMode::Mirror).unwrap() {
            assert!((v - 0.4).abs() < 1e-12);
        }
    }

    #[test]
    fn two_point_variogram() {
        let vg = empirical_semivariogram(&[(0.0, 0.0, 0.0), (300.0, 400.0, 2.0)], 250.0, 10_000.0, Subsample::Stride(1))
            .unwrap();
        assert_eq!(vg.lags, vec![625.0]);
        assert_eq!(vg.counts, vec![1]);
        assert_eq!(vg.gamma, vec![2.0]);
    }

    #[test]
    fn spherical_shape() {
        assert_eq!(spherical(3000.0, 0.1, 0.9, 3000.0), 0.1 + 0.9);
        assert_eq!(spherical(9000.0, 0.1, 0.9, 3000.0), 1.0);
        assert_eq!(spherical(0.0, 0.1, 0.9, 3000.0), 0.1);
    }

    #[test]
    fn degenerate_fit() {
        let vg = Semivariogram {
            bin_width: 250.0,
            max_lag: 10_000.0,
            lags: vec![125.0, 375.0, 625.0],
            counts: vec![3, 4, 5],
            gamma: vec![0.0; 3],
            fit: None,
        };
        let f = fit_spherical(&vg).unwrap();
        assert!(f.degenerate);
        assert_eq!((f.nugget, f.sill, f.range), (0.0, 0.0, 125.0));
    }

    #[test]
    fn stride_and_random_subsample() {
        let v: Vec<usize> = (0..10).collect();
        assert_eq!(Subsample::Stride(4).apply(&v).unwrap(), vec![0, 4, 8]);
        let r = Subsample::Random { n: 5, seed: 1 }.apply(&v).unwrap();
        assert_eq!(r.len(), 5);
        assert!(r.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(r, Subsample::Random { n: 5, seed: 1 }.apply(&v).unwrap());
    }
}
