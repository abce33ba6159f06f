//! Cloud masking, weekly compositing, gap imputation and normalization.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::raster_io::{Band, BandStack, GeoRef, TimeKey, NODATA};

/// Length of the composited series: 52 full 7-day bins plus the remainder.
pub const WEEKS: usize = 53;

/// Which SCL classes count as unusable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CloudMaskPolicy {
    pub masked_scl_codes: BTreeSet<u8>,
}

impl Default for CloudMaskPolicy {
    /// nodata, defective, cloud shadow, unclassified (stand-in for low
    /// probability cloud), cloud medium, cloud high, thin cirrus.
    fn default() -> Self {
        CloudMaskPolicy {
            masked_scl_codes: [0, 1, 3, 7, 8, 9, 10].into_iter().collect(),
        }
    }
}

impl CloudMaskPolicy {
    pub fn validate(&self) -> Result<()> {
        match self.masked_scl_codes.iter().find(|&&c| c > 11) {
            Some(c) => Err(Error::Config(format!("SCL code {c} outside 0..11"))),
            None => Ok(()),
        }
    }

    pub fn is_masked(&self, code: u16) -> bool {
        code > 11 || self.masked_scl_codes.contains(&(code as u8))
    }
}

/// `true` where the pixel is usable.
pub fn cloud_mask(scl_plane: &[u16], policy: &CloudMaskPolicy) -> Vec<bool> {
    scl_plane.iter().map(|&c| !policy.is_masked(c)).collect()
}

/// One acquisition: the four spectral planes and the usable-pixel mask.
#[derive(Debug, Clone)]
pub struct Observation {
    pub date: NaiveDate,
    /// B02, B03, B04, B08 planes, row-major.
    pub planes: [Vec<u16>; 4],
    pub usable: Vec<bool>,
}

/// Splits date-indexed stacks into per-date observations, masking with the
/// SCL band when present.
pub fn observations_from_stacks(stacks: &[BandStack], policy: &CloudMaskPolicy) -> Result<Vec<Observation>> {
    let mut out = Vec::new();
    for s in stacks {
        let idx: Vec<usize> = Band::SPECTRAL
            .iter()
            .map(|&b| {
                s.band_index(b)
                    .ok_or_else(|| Error::Schema(format!("scene stack lacks band {b}")))
            })
            .collect::<Result<_>>()?;
        let scl = s.band_index(Band::Scl);
        for (t, key) in s.times.iter().enumerate() {
            let date = match key {
                TimeKey::Date(d) => *d,
                TimeKey::Week(_) => {
                    return Err(Error::Schema("scene stacks must use a date time axis".into()))
                }
            };
            let usable = match scl {
                Some(b) => cloud_mask(s.plane(t, b), policy),
                None => vec![true; s.plane_len()],
            };
            out.push(Observation {
                date,
                planes: [0, 1, 2, 3].map(|i| s.plane(t, idx[i]).to_vec()),
                usable,
            });
        }
    }
    Ok(out)
}

/// Week bin of `date`: 7-day bins from Jan 1, the last bin takes the remainder.
pub fn week_of(date: NaiveDate) -> usize {
    (date.ordinal0() as usize / 7).min(WEEKS - 1)
}

/// Fixed-length weekly series for every pixel.
///
/// Values are stored pixel-major (`[pixel][band][week]`) as real digital
/// numbers; entries without data are `NaN`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeStack {
    pub georef: GeoRef,
    pub width: usize,
    pub height: usize,
    pub bands: Vec<Band>,
    pub values: Vec<f64>,
    /// `[pixel][week]`, true where an observation was used.
    pub validity: Vec<bool>,
    /// Pixels with no observation in any week.
    pub removed: Vec<bool>,
}

impl CompositeStack {
    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn n_bands(&self) -> usize {
        self.bands.len()
    }

    pub fn band_index(&self, band: Band) -> Option<usize> {
        self.bands.iter().position(|&b| b == band)
    }

    /// The 53-week series of `band` at pixel `p`.
    pub fn series(&self, p: usize, band: usize) -> &[f64] {
        let o = (p * self.n_bands() + band) * WEEKS;
        &self.values[o..o + WEEKS]
    }

    pub fn pixel_values(&self, p: usize) -> &[f64] {
        let n = self.n_bands() * WEEKS;
        &self.values[p * n..(p + 1) * n]
    }

    pub fn pixel_validity(&self, p: usize) -> &[bool] {
        &self.validity[p * WEEKS..(p + 1) * WEEKS]
    }

    /// Copy of rows `[row0, row1)`.
    pub fn rows(&self, row0: usize, row1: usize) -> CompositeStack {
        let (p0, p1) = (row0 * self.width, row1 * self.width);
        let per = self.n_bands() * WEEKS;
        CompositeStack {
            georef: self.georef.offset_rows(row0),
            width: self.width,
            height: row1 - row0,
            bands: self.bands.clone(),
            values: self.values[p0 * per..p1 * per].to_vec(),
            validity: self.validity[p0 * WEEKS..p1 * WEEKS].to_vec(),
            removed: self.removed[p0..p1].to_vec(),
        }
    }

    /// Stack form for storage: the spectral bands rounded to DN plus a `MASK`
    /// band recording per-week validity (1 observed, 0 missing).
    pub fn to_bandstack(&self) -> BandStack {
        let mut bands = self.bands.clone();
        bands.push(Band::Mask);
        let times = (0..WEEKS as u32).map(TimeKey::Week).collect();
        let mut s = BandStack::new(self.georef.clone(), bands, times, self.height, self.width);
        let nb = self.n_bands();
        for p in 0..self.n_pixels() {
            let (r, c) = (p / self.width, p % self.width);
            for b in 0..nb {
                for (t, &v) in self.series(p, b).iter().enumerate() {
                    let dn = if v.is_nan() { NODATA } else { v.round().clamp(0.0, 65535.0) as u16 };
                    s.set(t, b, r, c, dn);
                }
            }
            for (t, &ok) in self.pixel_validity(p).iter().enumerate() {
                s.set(t, nb, r, c, ok as u16);
            }
        }
        s
    }

    /// Inverse of [`CompositeStack::to_bandstack`]. Without a `MASK` band,
    /// validity is inferred from non-nodata spectral values.
    pub fn from_bandstack(stack: &BandStack) -> Result<CompositeStack> {
        if stack.times.len() != WEEKS {
            return Err(Error::Schema(format!(
                "composite must have {WEEKS} weeks, found {}",
                stack.times.len()
            )));
        }
        let idx: Vec<usize> = Band::SPECTRAL
            .iter()
            .map(|&b| {
                stack
                    .band_index(b)
                    .ok_or_else(|| Error::Schema(format!("composite lacks band {b}")))
            })
            .collect::<Result<_>>()?;
        let mask = stack.band_index(Band::Mask);
        let n = stack.plane_len();
        let nb = idx.len();
        let mut values = vec![f64::NAN; n * nb * WEEKS];
        let mut validity = vec![false; n * WEEKS];
        for p in 0..n {
            let (r, c) = (p / stack.width, p % stack.width);
            for t in 0..WEEKS {
                validity[p * WEEKS + t] = match mask {
                    Some(m) => stack.get(t, m, r, c) != 0,
                    None => idx.iter().all(|&b| stack.get(t, b, r, c) != NODATA),
                };
            }
        }
        let removed: Vec<bool> = (0..n)
            .map(|p| validity[p * WEEKS..(p + 1) * WEEKS].iter().all(|v| !v))
            .collect();
        for p in 0..n {
            let (r, c) = (p / stack.width, p % stack.width);
            for (b, &sb) in idx.iter().enumerate() {
                for t in 0..WEEKS {
                    let dn = stack.get(t, sb, r, c);
                    let keep = if mask.is_some() { !removed[p] } else { validity[p * WEEKS + t] };
                    if keep {
                        values[(p * nb + b) * WEEKS + t] = dn as f64;
                    }
                }
            }
        }
        Ok(CompositeStack {
            georef: stack.georef.clone(),
            width: stack.width,
            height: stack.height,
            bands: Band::SPECTRAL.to_vec(),
            values,
            validity,
            removed,
        })
    }
}

/// Per pixel and week, keeps the earliest usable non-nodata observation.
pub fn weekly_composite(
    observations: &[Observation],
    year: i32,
    georef: &GeoRef,
    height: usize,
    width: usize,
) -> Result<CompositeStack> {
    let n = height * width;
    for o in observations {
        if o.date.year() != year {
            return Err(Error::Domain(format!(
                "observation dated {} outside target year {year}",
                o.date
            )));
        }
        if o.usable.len() != n || o.planes.iter().any(|p| p.len() != n) {
            return Err(Error::Invariant(format!(
                "observation {} does not match the {height}x{width} grid",
                o.date
            )));
        }
    }
    let mut order: Vec<usize> = (0..observations.len()).collect();
    order.sort_by_key(|&i| observations[i].date);

    let nb = Band::SPECTRAL.len();
    let per = nb * WEEKS;
    let mut values = vec![f64::NAN; n * per];
    let mut validity = vec![false; n * WEEKS];
    let chunk = 1024;
    par::for_each_chunk_mut(&mut values, chunk * per, |ci, vals| {
        let p0 = ci * chunk;
        for &oi in &order {
            let o = &observations[oi];
            let w = week_of(o.date);
            for (j, px) in vals.chunks_mut(per).enumerate() {
                let p = p0 + j;
                if !o.usable[p] || !px[w].is_nan() {
                    continue;
                }
                if o.planes.iter().any(|pl| pl[p] == NODATA) {
                    continue;
                }
                for b in 0..nb {
                    px[b * WEEKS + w] = o.planes[b][p] as f64;
                }
            }
        }
    });
    for p in 0..n {
        for w in 0..WEEKS {
            validity[p * WEEKS + w] = !values[p * per + w].is_nan();
        }
    }
    let removed = (0..n)
        .map(|p| validity[p * WEEKS..(p + 1) * WEEKS].iter().all(|v| !v))
        .collect();
    Ok(CompositeStack {
        georef: georef.clone(),
        width,
        height,
        bands: Band::SPECTRAL.to_vec(),
        values,
        validity,
        removed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImputationMethod {
    #[default]
    Linear,
    Ffill,
}

impl FromStr for ImputationMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "ffill" => Ok(Self::Ffill),
            o => Err(Error::Config(format!("unknown imputation method {o:?}"))),
        }
    }
}

impl fmt::Display for ImputationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::Ffill => "ffill",
        })
    }
}

/// Fills the invalid weeks of one series in place. `valid` must contain at
/// least one `true`.
pub fn impute_series(series: &mut [f64], valid: &[bool], method: ImputationMethod) {
    let first = match valid.iter().position(|&v| v) {
        Some(i) => i,
        None => return,
    };
    let last = valid.iter().rposition(|&v| v).unwrap();
    for w in 0..first {
        series[w] = series[first];
    }
    for w in last + 1..series.len() {
        series[w] = series[last];
    }
    let mut prev = first;
    for w in first + 1..=last {
        if !valid[w] {
            continue;
        }
        if w > prev + 1 {
            let (a, b) = (series[prev], series[w]);
            let span = (w - prev) as f64;
            for g in prev + 1..w {
                series[g] = match method {
                    ImputationMethod::Linear => a + (b - a) * ((g - prev) as f64 / span),
                    ImputationMethod::Ffill => a,
                };
            }
        }
        prev = w;
    }
}

/// Imputes every non-removed pixel's gaps; validity is left as recorded.
pub fn impute(stack: &CompositeStack, method: ImputationMethod) -> CompositeStack {
    let mut out = stack.clone();
    let per = stack.n_bands() * WEEKS;
    let chunk = 512;
    par::for_each_chunk_mut(&mut out.values, chunk * per, |ci, vals| {
        for (j, px) in vals.chunks_mut(per).enumerate() {
            let p = ci * chunk + j;
            if stack.removed[p] {
                continue;
            }
            let valid = stack.pixel_validity(p);
            for series in px.chunks_mut(WEEKS) {
                impute_series(series, valid, method);
            }
        }
    });
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationMethod {
    AsFloat,
    #[default]
    AsReflectance,
    Standardize,
    Normalize,
}

impl FromStr for NormalizationMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "as_float" => Ok(Self::AsFloat),
            "as_reflectance" => Ok(Self::AsReflectance),
            "standardize" => Ok(Self::Standardize),
            "normalize" => Ok(Self::Normalize),
            o => Err(Error::Config(format!("unknown normalization method {o:?}"))),
        }
    }
}

impl fmt::Display for NormalizationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::AsFloat => "as_float",
            Self::AsReflectance => "as_reflectance",
            Self::Standardize => "standardize",
            Self::Normalize => "normalize",
        })
    }
}

impl NormalizationMethod {
    /// True for methods that are a fixed map of each value.
    pub fn is_pointwise(self) -> bool {
        matches!(self, Self::AsFloat | Self::AsReflectance)
    }

    /// Divisor for pointwise methods.
    fn divisor(self) -> Option<f64> {
        match self {
            Self::AsFloat => Some(65535.0),
            Self::AsReflectance => Some(10000.0),
            _ => None,
        }
    }

    pub fn apply_dn(self, dn: f64) -> f64 {
        dn / self.divisor().expect("pointwise normalization")
    }
}

/// Applies a pointwise method to every value of the composite. Column
/// methods are defined over feature columns and are rejected here.
pub fn normalize_composite(stack: &mut CompositeStack, method: NormalizationMethod) -> Result<()> {
    let d = method.divisor().ok_or_else(|| {
        Error::Config(format!("{method} is a per-column method; apply it to a feature matrix"))
    })?;
    for v in &mut stack.values {
        *v /= d;
    }
    Ok(())
}

/// Per-column affine scaling `(x - offset) / scale`; zero-scale columns map to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnScaler {
    pub method: NormalizationMethod,
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl ColumnScaler {
    /// Fits column statistics on a row-major `rows x cols` block.
    pub fn fit(values: &[f64], cols: usize, method: NormalizationMethod) -> ColumnScaler {
        let rows = if cols == 0 { 0 } else { values.len() / cols };
        let (offset, scale) = match method {
            NormalizationMethod::AsFloat | NormalizationMethod::AsReflectance => {
                let d = method.divisor().unwrap();
                (vec![0.0; cols], vec![d; cols])
            }
            NormalizationMethod::Standardize => {
                let mut lo = vec![f64::INFINITY; cols];
                let mut hi = vec![f64::NEG_INFINITY; cols];
                for row in values.chunks(cols) {
                    for (j, &v) in row.iter().enumerate() {
                        lo[j] = lo[j].min(v);
                        hi[j] = hi[j].max(v);
                    }
                }
                let scale = lo.iter().zip(&hi).map(|(l, h)| h - l).collect();
                (lo, scale)
            }
            NormalizationMethod::Normalize => {
                let mut mean = vec![0.0; cols];
                for row in values.chunks(cols) {
                    for (j, &v) in row.iter().enumerate() {
                        mean[j] += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows.max(1) as f64);
                let mut var = vec![0.0; cols];
                for row in values.chunks(cols) {
                    for (j, &v) in row.iter().enumerate() {
                        var[j] += (v - mean[j]) * (v - mean[j]);
                    }
                }
                let std = var.iter().map(|s| (s / rows.max(1) as f64).sqrt()).collect();
                (mean, std)
            }
        };
        ColumnScaler { method, offset, scale }
    }

    pub fn apply(&self, values: &mut [f64]) {
        let cols = self.offset.len();
        for row in values.chunks_mut(cols) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = if self.scale[j] == 0.0 { 0.0 } else { (*v - self.offset[j]) / self.scale[j] };
            }
        }
    }
}
