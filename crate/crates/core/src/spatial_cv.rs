//! Spatial k-fold cross-validation: square blocks are assigned to folds at
//! random, polygons follow the block containing their centroid, and all
//! pixels of a polygon share its fold.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::raster_io::{Band, BandStack, Extent, LabelRaster, LabeledPolygon, TimeKey, NODATA};

/// Reseeding attempts before giving up on populating every fold.
pub const MAX_RESEEDS: u64 = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockGrid {
    /// Lower-left corner `(min_x, min_y)` of block (0, 0).
    pub origin: (f64, f64),
    pub block_size: f64,
    pub cols: usize,
    pub rows: usize,
    pub k: usize,
    /// Row-major, `rows x cols`; block row 0 is the southernmost.
    pub block_to_fold: Vec<usize>,
    /// Seed that produced `block_to_fold` after any reseeding.
    pub seed: u64,
}

impl BlockGrid {
    /// Block `(row, col)` containing a point. Points on an interior block
    /// edge go to the lower index; points on the outer boundary are inside.
    pub fn block_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let col = axis_index(x - self.origin.0, self.block_size, self.cols)?;
        let row = axis_index(y - self.origin.1, self.block_size, self.rows)?;
        Some((row, col))
    }

    pub fn fold_of_block(&self, row: usize, col: usize) -> usize {
        self.block_to_fold[row * self.cols + col]
    }

    fn assign(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for f in self.block_to_fold.iter_mut() {
            *f = rng.random_range(0..self.k);
        }
        self.seed = seed;
    }
}

fn axis_index(offset: f64, size: f64, n: usize) -> Option<usize> {
    if !(offset >= 0.0) || offset > size * n as f64 {
        return None;
    }
    let q = offset / size;
    let mut i = q.floor() as usize;
    if q == q.floor() && i > 0 {
        i -= 1;
    }
    Some(i.min(n - 1))
}

/// Tiles `extent` with square blocks and draws a fold for each block.
/// Reseeds (`seed + 1`, `seed + 2`, ...) until every fold owns a block.
pub fn build_block_grid(extent: &Extent, block_size: f64, k: usize, seed: u64) -> Result<BlockGrid> {
    if !(block_size > 0.0) || !block_size.is_finite() {
        return Err(Error::Config(format!("block size must be positive, got {block_size}")));
    }
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    if !(extent.width() > 0.0 && extent.height() > 0.0) {
        return Err(Error::Geometry(format!("degenerate extent {extent:?}")));
    }
    let cols = ((extent.width() / block_size).ceil() as usize).max(1);
    let rows = ((extent.height() / block_size).ceil() as usize).max(1);
    if rows * cols < k {
        return Err(Error::Fold(format!(
            "{} blocks cannot populate {k} folds; use a smaller block size",
            rows * cols
        )));
    }
    let mut grid = BlockGrid {
        origin: (extent.min_x, extent.min_y),
        block_size,
        cols,
        rows,
        k,
        block_to_fold: vec![0; rows * cols],
        seed,
    };
    for s in seed..seed.saturating_add(MAX_RESEEDS) {
        grid.assign(s);
        if folds_covered(&grid.block_to_fold, k) {
            return Ok(grid);
        }
    }
    Err(Error::Fold("could not populate every fold with a block".into()))
}

fn folds_covered(assignments: &[usize], k: usize) -> bool {
    let mut seen = vec![false; k];
    for &f in assignments {
        seen[f] = true;
    }
    seen.iter().all(|&s| s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub polygon_fold: BTreeMap<String, usize>,
    pub dead_zone_radius: f64,
    /// Per validation fold, training polygons dropped by the dead zone.
    pub excluded: Vec<BTreeSet<String>>,
}

impl FoldAssignment {
    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut n = vec![0; self.k];
        for &f in self.polygon_fold.values() {
            n[f] += 1;
        }
        n
    }

    /// `polygon_id,fold` CSV.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["polygon_id", "fold"]).map_err(|e| Error::Format(e.to_string()))?;
        for (id, f) in &self.polygon_fold {
            w.write_record([id.as_str(), &f.to_string()])
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        w.into_inner().map_err(|e| Error::Format(e.to_string()))
    }

    /// Single-band raster: `fold + 1` on labeled pixels, nodata elsewhere.
    pub fn fold_raster(&self, labels: &LabelRaster) -> BandStack {
        let mut s = BandStack::new(
            labels.georef.clone(),
            vec![Band::Mask],
            vec![TimeKey::Week(0)],
            labels.height,
            labels.width,
        );
        for (i, p) in labels.polygon.iter().enumerate() {
            s.pixels[i] = match p.and_then(|p| self.polygon_fold.get(&labels.polygon_ids[p as usize])) {
                Some(&f) => f as u16 + 1,
                None => NODATA,
            };
        }
        s
    }
}

/// Maps every polygon to the fold of the block holding its centroid.
pub fn assign_folds(polys: &[LabeledPolygon], grid: &BlockGrid) -> Result<FoldAssignment> {
    let mut polygon_fold = BTreeMap::new();
    for p in polys {
        let (x, y) = p
            .centroid()
            .ok_or_else(|| Error::Geometry(format!("polygon {} has zero area", p.id)))?;
        let (r, c) = grid
            .block_of(x, y)
            .ok_or_else(|| Error::Geometry(format!("centroid of {} lies outside the block grid", p.id)))?;
        polygon_fold.insert(p.id.clone(), grid.fold_of_block(r, c));
    }
    Ok(FoldAssignment {
        k: grid.k,
        polygon_fold,
        dead_zone_radius: 0.0,
        excluded: vec![BTreeSet::new(); grid.k],
    })
}

/// Builds the grid over the polygons' extent and assigns folds, reseeding
/// until every fold holds at least one polygon.
pub fn assign_folds_reseeding(
    polys: &[LabeledPolygon],
    block_size: f64,
    k: usize,
    seed: u64,
) -> Result<(BlockGrid, FoldAssignment)> {
    if polys.len() < k {
        return Err(Error::Fold(format!("{} polygons cannot fill {k} folds", polys.len())));
    }
    let extent = polys.iter().fold(Extent::empty(), |e, p| e.union(&p.bbox()));
    let mut s = seed;
    for _ in 0..MAX_RESEEDS {
        let grid = build_block_grid(&extent, block_size, k, s)?;
        let a = assign_folds(polys, &grid)?;
        if a.fold_sizes().iter().all(|&n| n > 0) {
            return Ok((grid, a));
        }
        s = grid.seed + 1;
    }
    Err(Error::Fold("no seed populated every fold with polygons".into()))
}

/// Drops, for each validation fold, training polygons whose centroid lies
/// strictly closer than `radius` to a centroid of that fold.
pub fn apply_dead_zone(assign: &FoldAssignment, polys: &[LabeledPolygon], radius: f64) -> Result<FoldAssignment> {
    if !(radius >= 0.0) {
        return Err(Error::Config(format!("dead zone radius must be >= 0, got {radius}")));
    }
    let mut out = assign.clone();
    out.dead_zone_radius = radius;
    out.excluded = vec![BTreeSet::new(); assign.k];
    if radius == 0.0 {
        return Ok(out);
    }
    let cents: Vec<(&str, usize, (f64, f64))> = polys
        .iter()
        .filter_map(|p| {
            let f = *assign.polygon_fold.get(&p.id)?;
            Some((p.id.as_str(), f, p.centroid()?))
        })
        .collect();
    let r2 = radius * radius;
    for &(_, fi, (xi, yi)) in &cents {
        for &(id_j, fj, (xj, yj)) in &cents {
            if fj != fi && (xi - xj).powi(2) + (yi - yj).powi(2) < r2 {
                out.excluded[fi].insert(id_j.to_string());
            }
        }
    }
    Ok(out)
}

/// Row indices of one train/validation split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// One split per fold over the rows of `features`. Rows are traced to their
/// polygon through `labels`; unlabeled rows are ignored.
pub fn cv_splits(assign: &FoldAssignment, labels: &LabelRaster, features: &FeatureMatrix) -> Result<Vec<Split>> {
    let mut row_poly: Vec<Option<(&str, usize)>> = Vec::with_capacity(features.n_rows());
    for &(r, c) in &features.pixel_index {
        row_poly.push(match labels.polygon_at(r, c) {
            Some(id) => {
                let f = *assign
                    .polygon_fold
                    .get(id)
                    .ok_or_else(|| Error::Fold(format!("polygon {id} has no fold")))?;
                Some((id, f))
            }
            None => None,
        });
    }
    splits_from_rows(assign, &row_poly)
}

/// Same as [`cv_splits`] given each row's `(polygon id, fold)`.
pub fn splits_from_rows(assign: &FoldAssignment, row_poly: &[Option<(&str, usize)>]) -> Result<Vec<Split>> {
    let mut out = Vec::with_capacity(assign.k);
    for f in 0..assign.k {
        let mut split = Split {
            train: Vec::new(),
            validation: Vec::new(),
        };
        for (i, rp) in row_poly.iter().enumerate() {
            let Some((id, pf)) = *rp else { continue };
            if pf == f {
                split.validation.push(i);
            } else if !assign.excluded[f].contains(id) {
                split.train.push(i);
            }
        }
        if split.validation.is_empty() || split.train.is_empty() {
            return Err(Error::Fold(format!(
                "fold {f} leaves an empty {} set",
                if split.validation.is_empty() { "validation" } else { "training" }
            )));
        }
        out.push(split);
    }
    Ok(out)
}
