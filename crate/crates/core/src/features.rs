//! Per-pixel feature vectors: temporal, statistical, differential and
//! spatial groups computed from the weekly composite plus NDVI.
//!
//! Column order is a stable contract. Groups appear in the order
//! temporal, statistical, differential, spatial; within each group the
//! layout is documented on the group's function.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::preprocess::{CompositeStack, WEEKS};
use crate::raster_io::{write_file, Band};

/// Bands entering the feature vector, in order.
pub const FEATURE_BANDS: [&str; 5] = ["B02", "B03", "B04", "B08", "NDVI"];
const NB: usize = FEATURE_BANDS.len();
const NDVI: usize = 4;
/// Four-week windows over 53 weeks; the last window holds week 52 alone.
pub const TEMPORAL_WINDOWS: usize = WEEKS.div_ceil(4);

pub const TEMPORAL_LEN: usize = TEMPORAL_WINDOWS * NB;
pub const STATISTICAL_LEN: usize = 3 * NB;
pub const DIFFERENTIAL_LEN: usize = WEEKS - 1;
pub const SPATIAL_LEN: usize = WEEKS * NB * 2;

/// `(nir - red) / (nir + red)`, 0 when the denominator vanishes.
pub fn ndvi(nir: f64, red: f64) -> f64 {
    let s = nir + red;
    if s == 0.0 {
        0.0
    } else {
        (nir - red) / s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureGroup {
    Temporal,
    Statistical,
    Differential,
    Spatial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialScope {
    #[default]
    All,
    Ndvi,
    None,
}

/// How each four-week window is summarized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalMode {
    /// Window maximum.
    #[default]
    Max,
    /// Value at the first week of the window.
    Sample,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub groups: BTreeSet<FeatureGroup>,
    pub spatial_scope: SpatialScope,
    #[serde(default)]
    pub temporal: TemporalMode,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self::full()
    }
}

impl FeatureSpec {
    /// Every group with spatial statistics on all bands (667 columns).
    pub fn full() -> Self {
        FeatureSpec {
            groups: [
                FeatureGroup::Temporal,
                FeatureGroup::Statistical,
                FeatureGroup::Differential,
                FeatureGroup::Spatial,
            ]
            .into_iter()
            .collect(),
            spatial_scope: SpatialScope::All,
            temporal: TemporalMode::Max,
        }
    }

    /// Spatial statistics on NDVI only.
    pub fn ndvi_spatial() -> Self {
        FeatureSpec {
            spatial_scope: SpatialScope::Ndvi,
            ..Self::full()
        }
    }

    pub fn no_spatial() -> Self {
        let mut s = Self::full();
        s.groups.remove(&FeatureGroup::Spatial);
        s.spatial_scope = SpatialScope::None;
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() {
            return Err(Error::Config("feature spec selects no groups".into()));
        }
        let has_spatial = self.groups.contains(&FeatureGroup::Spatial);
        if has_spatial != (self.spatial_scope != SpatialScope::None) {
            return Err(Error::Config(
                "spatial_scope must be none exactly when the spatial group is off".into(),
            ));
        }
        Ok(())
    }

    fn has(&self, g: FeatureGroup) -> bool {
        self.groups.contains(&g)
    }

    fn spatial_bands(&self) -> &'static [usize] {
        match self.spatial_scope {
            SpatialScope::All => &[0, 1, 2, 3, 4],
            SpatialScope::Ndvi => &[NDVI],
            SpatialScope::None => &[],
        }
    }

    pub fn dimension(&self) -> usize {
        let mut d = 0;
        if self.has(FeatureGroup::Temporal) {
            d += TEMPORAL_LEN;
        }
        if self.has(FeatureGroup::Statistical) {
            d += STATISTICAL_LEN;
        }
        if self.has(FeatureGroup::Differential) {
            d += DIFFERENTIAL_LEN;
        }
        if self.has(FeatureGroup::Spatial) {
            d += WEEKS * self.spatial_bands().len() * 2;
        }
        d
    }

    /// Canonical column names.
    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.dimension());
        if self.has(FeatureGroup::Temporal) {
            let tag = match self.temporal {
                TemporalMode::Max => "tmax",
                TemporalMode::Sample => "tval",
            };
            for w in 0..TEMPORAL_WINDOWS {
                for b in FEATURE_BANDS {
                    names.push(format!("{tag}_w{w:02}_{b}"));
                }
            }
        }
        if self.has(FeatureGroup::Statistical) {
            for b in FEATURE_BANDS {
                for s in ["mean", "max", "std"] {
                    names.push(format!("{s}_{b}"));
                }
            }
        }
        if self.has(FeatureGroup::Differential) {
            for w in 0..DIFFERENTIAL_LEN {
                names.push(format!("dndvi_w{w:02}"));
            }
        }
        if self.has(FeatureGroup::Spatial) {
            for w in 0..WEEKS {
                for &b in self.spatial_bands() {
                    for s in ["mean", "std"] {
                        names.push(format!("nbr_{s}_w{w:02}_{}", FEATURE_BANDS[b]));
                    }
                }
            }
        }
        names
    }
}

/// Window maxima (or first-week samples), window-major then band order.
/// `series` is band-major `[band][week]` with five bands.
pub fn temporal_features(series: &[f64], mode: TemporalMode, out: &mut Vec<f64>) {
    for w in 0..TEMPORAL_WINDOWS {
        let (lo, hi) = (4 * w, (4 * w + 4).min(WEEKS));
        for b in 0..NB {
            let s = &series[b * WEEKS..(b + 1) * WEEKS];
            out.push(match mode {
                TemporalMode::Max => s[lo..hi].iter().copied().fold(f64::NEG_INFINITY, f64::max),
                TemporalMode::Sample => s[lo],
            });
        }
    }
}

/// Mean, max and population std per band, band-major.
pub fn statistical_features(series: &[f64], out: &mut Vec<f64>) {
    for s in series.chunks(WEEKS) {
        let (mean, std) = mean_std(s.iter().copied());
        let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        out.extend([mean, max, std]);
    }
}

/// Successive week-to-week NDVI differences.
pub fn differential_features(ndvi: &[f64], out: &mut Vec<f64>) {
    out.extend(ndvi.windows(2).map(|w| w[1] - w[0]));
}

/// Population mean and std. Sums are taken relative to the first value, so
/// constant inputs give their value and a zero std exactly.
fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let mut it = values.clone();
    let Some(first) = it.next() else {
        return (f64::NAN, f64::NAN);
    };
    let (mut n, mut sum) = (1usize, 0.0);
    for v in it {
        n += 1;
        sum += v - first;
    }
    let mean = first + sum / n as f64;
    let ss: f64 = values.map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / n as f64).sqrt())
}

/// Per-pixel five-band series (`[pixel][band][week]`) for a band of rows,
/// with NDVI appended.
struct Cube {
    width: usize,
    row0: usize,
    rows: usize,
    values: Vec<f64>,
    removed: Vec<bool>,
}

impl Cube {
    fn build(stack: &CompositeStack, row0: usize, row1: usize) -> Result<Cube> {
        let idx: Vec<usize> = [Band::B02, Band::B03, Band::B04, Band::B08]
            .iter()
            .map(|&b| {
                stack
                    .band_index(b)
                    .ok_or_else(|| Error::Schema(format!("composite lacks band {b}")))
            })
            .collect::<Result<_>>()?;
        let (w, rows) = (stack.width, row1 - row0);
        let per = NB * WEEKS;
        let mut values = vec![0.0; rows * w * per];
        par::for_each_chunk_mut(&mut values, per * w, |r, row_vals| {
            for (c, px) in row_vals.chunks_mut(per).enumerate() {
                let p = (row0 + r) * w + c;
                for (b, &sb) in idx.iter().enumerate() {
                    px[b * WEEKS..(b + 1) * WEEKS].copy_from_slice(stack.series(p, sb));
                }
                for t in 0..WEEKS {
                    px[NDVI * WEEKS + t] = ndvi(px[3 * WEEKS + t], px[2 * WEEKS + t]);
                }
            }
        });
        let removed = stack.removed[row0 * w..row1 * w].to_vec();
        Ok(Cube {
            width: w,
            row0,
            rows,
            values,
            removed,
        })
    }

    fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let per = NB * WEEKS;
        let p = (row - self.row0) * self.width + col;
        &self.values[p * per..(p + 1) * per]
    }

    fn is_removed(&self, row: usize, col: usize) -> bool {
        self.removed[(row - self.row0) * self.width + col]
    }

    /// Non-removed 8-connected neighbours present in the cube.
    fn neighbours(&self, row: usize, col: usize) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(8);
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                if dr == 0 && dc == 0 {
                    continue;
                }
                let (r, c) = (row as i64 + dr, col as i64 + dc);
                if r < self.row0 as i64
                    || r >= (self.row0 + self.rows) as i64
                    || c < 0
                    || c >= self.width as i64
                {
                    continue;
                }
                let (r, c) = (r as usize, c as usize);
                if !self.is_removed(r, c) {
                    out.push(self.pixel(r, c));
                }
            }
        }
        out
    }
}

/// Neighbourhood mean and population std per week and band, week-major then
/// band then mean before std. Without any neighbour the pixel's own value
/// stands in (std 0).
pub fn spatial_features(center: &[f64], neighbours: &[&[f64]], bands: &[usize], out: &mut Vec<f64>) {
    for w in 0..WEEKS {
        for &b in bands {
            let i = b * WEEKS + w;
            if neighbours.is_empty() {
                out.extend([center[i], 0.0]);
            } else {
                let (m, s) = mean_std(neighbours.iter().map(|n| n[i]));
                out.extend([m, s]);
            }
        }
    }
}

fn pixel_features(cube: &Cube, row: usize, col: usize, spec: &FeatureSpec, out: &mut Vec<f64>) {
    let s = cube.pixel(row, col);
    if spec.has(FeatureGroup::Temporal) {
        temporal_features(s, spec.temporal, out);
    }
    if spec.has(FeatureGroup::Statistical) {
        statistical_features(s, out);
    }
    if spec.has(FeatureGroup::Differential) {
        differential_features(&s[NDVI * WEEKS..], out);
    }
    if spec.has(FeatureGroup::Spatial) {
        spatial_features(s, &cube.neighbours(row, col), spec.spatial_bands(), out);
    }
}

/// N x D feature block with column names and the pixel each row came from.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: Array2<f64>,
    pub names: Vec<String>,
    pub pixel_index: Vec<(usize, usize)>,
    pub labels: Option<Vec<u8>>,
}

impl FeatureMatrix {
    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.ncols()
    }

    /// Rows `idx` in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            values: self.values.select(ndarray::Axis(0), idx),
            names: self.names.clone(),
            pixel_index: idx.iter().map(|&i| self.pixel_index[i]).collect(),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Stacks matrices with identical columns.
    pub fn concat(parts: &[FeatureMatrix]) -> Result<FeatureMatrix> {
        let first = parts.first().ok_or_else(|| Error::Data("no matrices to concatenate".into()))?;
        if parts.iter().any(|p| p.names != first.names) {
            return Err(Error::Schema("feature columns differ between matrices".into()));
        }
        let views: Vec<_> = parts.iter().map(|p| p.values.view()).collect();
        let values = ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths");
        let labels = if parts.iter().all(|p| p.labels.is_some()) {
            Some(parts.iter().flat_map(|p| p.labels.clone().unwrap()).collect())
        } else {
            None
        };
        Ok(FeatureMatrix {
            values,
            names: first.names.clone(),
            pixel_index: parts.iter().flat_map(|p| p.pixel_index.clone()).collect(),
            labels,
        })
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(&self.names).map_err(csv_err)?;
        for row in self.values.rows() {
            w.write_record(row.iter().map(|v| v.to_string())).map_err(csv_err)?;
        }
        w.into_inner().map_err(|e| Error::Format(e.to_string()))
    }

    /// Writes `<path>` as little-endian f64 rows and `<path>.json` as sidecar.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.values.len() * 8);
        for v in self.values.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        write_file(path, &bytes)?;
        let side = MatrixSidecar {
            rows: self.n_rows(),
            cols: self.n_cols(),
            dtype: "f64le".into(),
            names: self.names.clone(),
            pixel_index: self.pixel_index.clone(),
            labels: self.labels.clone(),
        };
        let json = serde_json::to_vec(&side).map_err(|e| Error::Format(e.to_string()))?;
        write_file(&sidecar_path(path), &json)
    }

    pub fn read_binary(path: &Path) -> Result<FeatureMatrix> {
        let sp = sidecar_path(path);
        let side: MatrixSidecar = serde_json::from_slice(&fs::read(&sp).map_err(|e| Error::io(&sp, e))?)
            .map_err(|e| Error::Format(format!("{}: {e}", sp.display())))?;
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() != side.rows * side.cols * 8 {
            return Err(Error::Truncation {
                expected: side.rows * side.cols * 8,
                found: bytes.len(),
            });
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(FeatureMatrix {
            values: Array2::from_shape_vec((side.rows, side.cols), data).expect("shape checked"),
            names: side.names,
            pixel_index: side.pixel_index,
            labels: side.labels,
        })
    }
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

#[derive(Serialize, Deserialize)]
struct MatrixSidecar {
    rows: usize,
    cols: usize,
    dtype: String,
    names: Vec<String>,
    pixel_index: Vec<(usize, usize)>,
    labels: Option<Vec<u8>>,
}

/// Features of the given pixels; removed pixels are skipped.
pub fn featurize_pixels(
    stack: &CompositeStack,
    spec: &FeatureSpec,
    pixels: &[(usize, usize)],
) -> Result<FeatureMatrix> {
    spec.validate()?;
    let cube = Cube::build(stack, 0, stack.height)?;
    let kept: Vec<(usize, usize)> = pixels
        .iter()
        .copied()
        .filter(|&(r, c)| !cube.is_removed(r, c))
        .collect();
    Ok(assemble(&cube, spec, kept))
}

/// Features of every non-removed pixel, row-major.
pub fn featurize(stack: &CompositeStack, spec: &FeatureSpec) -> Result<FeatureMatrix> {
    featurize_rows(stack, spec, 0, stack.height)
}

/// Features of the non-removed pixels in rows `[row0, row1)`. Rows just
/// outside the range are read as neighbours when the stack has them.
pub fn featurize_rows(stack: &CompositeStack, spec: &FeatureSpec, row0: usize, row1: usize) -> Result<FeatureMatrix> {
    spec.validate()?;
    let (h0, h1) = (row0.saturating_sub(1), (row1 + 1).min(stack.height));
    let cube = Cube::build(stack, h0, h1)?;
    let pixels: Vec<(usize, usize)> = (row0..row1)
        .flat_map(|r| (0..stack.width).map(move |c| (r, c)))
        .filter(|&(r, c)| !cube.is_removed(r, c))
        .collect();
    Ok(assemble(&cube, spec, pixels))
}

fn assemble(cube: &Cube, spec: &FeatureSpec, pixels: Vec<(usize, usize)>) -> FeatureMatrix {
    let d = spec.dimension();
    let mut data = vec![0.0; pixels.len() * d];
    let rows_per_chunk = 64;
    par::for_each_chunk_mut(&mut data, rows_per_chunk * d.max(1), |ci, chunk| {
        let mut buf = Vec::with_capacity(d);
        for (j, row) in chunk.chunks_mut(d.max(1)).enumerate() {
            let (r, c) = pixels[ci * rows_per_chunk + j];
            buf.clear();
            pixel_features(cube, r, c, spec, &mut buf);
            row.copy_from_slice(&buf);
        }
    });
    FeatureMatrix {
        values: Array2::from_shape_vec((pixels.len(), d), data).expect("feature shape"),
        names: spec.names(),
        pixel_index: pixels,
        labels: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster_io::GeoRef;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_stack(h: usize, w: usize, seed: u64) -> CompositeStack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = h * w;
        CompositeStack {
            georef: GeoRef::north_up(0.0, 0.0, 10.0, "x"),
            width: w,
            height: h,
            bands: Band::SPECTRAL.to_vec(),
            values: (0..n * 4 * WEEKS).map(|_| rng.random_range(0.01..0.6)).collect(),
            validity: vec![true; n * WEEKS],
            removed: vec![false; n],
        }
    }

    #[test]
    fn ndvi_cases() {
        assert!((ndvi(0.8, 0.2) - 0.6).abs() < 1e-15);
        assert_eq!(ndvi(0.3, 0.3), 0.0);
        assert_eq!(ndvi(0.0, 0.0), 0.0);
    }

    #[test]
    fn dimensions_per_scenario() {
        assert_eq!(TEMPORAL_LEN, 70);
        assert_eq!(STATISTICAL_LEN, 15);
        assert_eq!(DIFFERENTIAL_LEN, 52);
        assert_eq!(SPATIAL_LEN, 530);
        assert_eq!(FeatureSpec::full().dimension(), 667);
        assert_eq!(FeatureSpec::no_spatial().dimension(), 137);
        assert_eq!(FeatureSpec::ndvi_spatial().dimension(), 243);
        for s in [FeatureSpec::full(), FeatureSpec::no_spatial(), FeatureSpec::ndvi_spatial()] {
            let names = s.names();
            assert_eq!(names.len(), s.dimension());
            assert_eq!(names.iter().collect::<BTreeSet<_>>().len(), names.len());
        }
    }

    #[test]
    fn spec_validation() {
        let mut s = FeatureSpec::full();
        s.spatial_scope = SpatialScope::None;
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        let empty = FeatureSpec {
            groups: BTreeSet::new(),
            spatial_scope: SpatialScope::None,
            temporal: TemporalMode::Max,
        };
        assert!(matches!(featurize(&random_stack(2, 2, 0), &empty), Err(Error::Config(_))));
    }

    #[test]
    fn constant_series_groups() {
        let s = vec![0.3; NB * WEEKS];
        let mut out = Vec::new();
        temporal_features(&s, TemporalMode::Max, &mut out);
        assert_eq!(out, vec![0.3; 70]);
        out.clear();
        statistical_features(&s, &mut out);
        assert_eq!(out.len(), 15);
        for ch in out.chunks(3) {
            assert_eq!(ch, [0.3, 0.3, 0.0]);
        }
        out.clear();
        differential_features(&s[..WEEKS], &mut out);
        assert_eq!(out, vec![0.0; 52]);
    }

    #[test]
    fn affine_ndvi_differences() {
        let ndvi: Vec<f64> = (0..WEEKS).map(|w| 0.1 + 0.25 * w as f64).collect();
        let mut out = Vec::new();
        differential_features(&ndvi, &mut out);
        assert!(out.iter().all(|d| (d - 0.25).abs() < 1e-12));
    }

    #[test]
    fn uniform_image_spatial() {
        let mut st = random_stack(3, 4, 1);
        st.values.iter_mut().for_each(|v| *v = 0.25);
        let m = featurize(&st, &FeatureSpec::full()).unwrap();
        let off = TEMPORAL_LEN + STATISTICAL_LEN + DIFFERENTIAL_LEN;
        for row in m.values.rows() {
            for (i, v) in row.iter().skip(off).enumerate() {
                let b = (i / 2) % NB;
                let expected_mean = if b == NDVI { 0.0 } else { 0.25 };
                if i % 2 == 0 {
                    assert!((v - expected_mean).abs() < 1e-15);
                } else {
                    assert_eq!(*v, 0.0);
                }
            }
        }
    }

    #[test]
    fn removed_pixels_are_excluded() {
        let mut st = random_stack(2, 2, 2);
        st.removed[3] = true;
        let m = featurize(&st, &FeatureSpec::full()).unwrap();
        assert_eq!(m.pixel_index, vec![(0, 0), (0, 1), (1, 0)]);
        assert!(m.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn row_ranges_match_full_featurization() {
        let st = random_stack(6, 5, 3);
        let full = featurize(&st, &FeatureSpec::full()).unwrap();
        let part = featurize_rows(&st, &FeatureSpec::full(), 2, 4).unwrap();
        let idx: Vec<usize> = (10..20).collect();
        assert_eq!(part, full.select_rows(&idx));
    }

    #[test]
    fn binary_round_trip() {
        let m = featurize(&random_stack(2, 3, 4), &FeatureSpec::no_spatial()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.bin");
        m.write_binary(&p).unwrap();
        assert_eq!(FeatureMatrix::read_binary(&p).unwrap(), m);
        let csv = String::from_utf8(m.to_csv().unwrap()).unwrap();
        assert!(csv.starts_with("tmax_w00_B02,"));
        assert_eq!(csv.lines().count(), 7);
    }
}
