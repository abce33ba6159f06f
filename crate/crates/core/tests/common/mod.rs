//! Brute-force oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use cropmap::classifiers::tree::MIN_GAIN;
use cropmap::classifiers::Criterion;
use cropmap::pipeline::{self, PipelineConfig};
use cropmap::raster_io::{read_mask, GeoRef, LabelRaster, LabeledPolygon};
use cropmap::spatial_cv::{apply_dead_zone, assign_folds_reseeding, splits_from_rows};
use nalgebra::{DMatrix, DVector};
use ndarray::ArrayView2;
use rand::Rng;

fn impurity(c0: usize, c1: usize, criterion: Criterion) -> f64 {
    let n = (c0 + c1) as f64;
    if n == 0.0 {
        return 0.0;
    }
    match criterion {
        Criterion::Gini => 1.0 - [c0, c1].iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>(),
        Criterion::Entropy => -[c0, c1]
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                p * p.log2()
            })
            .sum::<f64>(),
    }
}

/// Every feature, every midpoint between distinct sorted values, counts
/// recomputed by filtering. Returns `(feature, threshold, gain)`.
pub fn split_oracle(x: ArrayView2<'_, f64>, y: &[u8], rows: &[usize], criterion: Criterion) -> Option<(usize, f64, f64)> {
    let count = |pred: &dyn Fn(usize) -> bool| {
        let mut c = [0usize; 2];
        for &r in rows {
            if pred(r) {
                c[y[r] as usize] += 1;
            }
        }
        c
    };
    let parent = count(&|_| true);
    let n = rows.len() as f64;
    let mut cands = Vec::new();
    for f in 0..x.ncols() {
        let mut vals: Vec<f64> = rows.iter().map(|&r| x[[r, f]]).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        for w in vals.windows(2) {
            let mut t = (w[0] + w[1]) / 2.0;
            if t >= w[1] {
                t = w[0];
            }
            let left = count(&|r| x[[r, f]] <= t);
            let right = [parent[0] - left[0], parent[1] - left[1]];
            let nl = (left[0] + left[1]) as f64;
            let nr = (right[0] + right[1]) as f64;
            let gain = impurity(parent[0], parent[1], criterion)
                - (nl / n) * impurity(left[0], left[1], criterion)
                - (nr / n) * impurity(right[0], right[1], criterion);
            cands.push((f, t, gain));
        }
    }
    let best = cands.iter().map(|c| c.2).fold(f64::NEG_INFINITY, f64::max);
    if !(best > MIN_GAIN) {
        return None;
    }
    cands
        .into_iter()
        .filter(|c| c.2 == best)
        .min_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)))
}

pub fn rbf_matrix(pts: &[[f64; 2]], gamma: f64) -> Vec<Vec<f64>> {
    pts.iter()
        .map(|a| {
            pts.iter()
                .map(|b| (-gamma * ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2))).exp())
                .collect()
        })
        .collect()
}

pub fn dual_value(alpha: &[f64], y: &[f64], k: &[Vec<f64>]) -> f64 {
    let n = alpha.len();
    let mut q = 0.0;
    for i in 0..n {
        for j in 0..n {
            q += alpha[i] * alpha[j] * y[i] * y[j] * k[i][j];
        }
    }
    alpha.iter().sum::<f64>() - 0.5 * q
}

/// Exact dual optimum by enumerating which coordinates sit at 0, at C or
/// strictly inside the box. Each pattern's stationary point comes from the
/// KKT system with the equality constraint; the best feasible one is the
/// optimum of the (strictly concave) problem.
pub fn dual_optimum_active_set(y: &[f64], k: &[Vec<f64>], c: f64) -> f64 {
    let n = y.len();
    let mut best = f64::NEG_INFINITY;
    for code in 0..3usize.pow(n as u32) {
        let mut state = vec![0u8; n];
        let mut v = code;
        for s in state.iter_mut() {
            *s = (v % 3) as u8;
            v /= 3;
        }
        let mut alpha: Vec<f64> = state.iter().map(|&s| if s == 1 { c } else { 0.0 }).collect();
        let free: Vec<usize> = (0..n).filter(|&i| state[i] == 2).collect();
        let fixed_sum: f64 = (0..n).filter(|&i| state[i] != 2).map(|i| alpha[i] * y[i]).sum();
        if free.is_empty() {
            if fixed_sum.abs() > 1e-12 {
                continue;
            }
        } else {
            let m = free.len();
            let mut a = DMatrix::<f64>::zeros(m + 1, m + 1);
            let mut rhs = DVector::<f64>::zeros(m + 1);
            for (p, &i) in free.iter().enumerate() {
                for (q, &j) in free.iter().enumerate() {
                    a[(p, q)] = y[i] * y[j] * k[i][j];
                }
                a[(p, m)] = y[i];
                a[(m, p)] = y[i];
                let fixed_q: f64 = (0..n)
                    .filter(|&j| state[j] != 2)
                    .map(|j| y[i] * y[j] * k[i][j] * alpha[j])
                    .sum();
                rhs[p] = 1.0 - fixed_q;
            }
            rhs[m] = -fixed_sum;
            let Some(sol) = a.lu().solve(&rhs) else { continue };
            if free.iter().enumerate().any(|(p, _)| !(sol[p] >= -1e-12 && sol[p] <= c + 1e-12)) {
                continue;
            }
            for (p, &i) in free.iter().enumerate() {
                alpha[i] = sol[p].clamp(0.0, c);
            }
        }
        best = best.max(dual_value(&alpha, y, k));
    }
    best
}

/// Best dual value over a regular grid of the feasible box; the last
/// coordinate is pinned by the equality constraint. A lower bound on the
/// optimum.
pub fn dual_grid_lower_bound(y: &[f64], k: &[Vec<f64>], c: f64, steps: usize) -> f64 {
    let n = y.len();
    let mut best = f64::NEG_INFINITY;
    let mut idx = vec![0usize; n - 1];
    loop {
        let mut alpha: Vec<f64> = idx.iter().map(|&i| c * i as f64 / steps as f64).collect();
        let s: f64 = alpha.iter().zip(y).map(|(a, y)| a * y).sum();
        let last = -s * y[n - 1];
        if (-1e-12..=c + 1e-12).contains(&last) {
            alpha.push(last.clamp(0.0, c));
            best = best.max(dual_value(&alpha, y, k));
        }
        let mut d = 0;
        while d < n - 1 {
            idx[d] += 1;
            if idx[d] <= steps {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
        if d == n - 1 {
            return best;
        }
    }
}

/// Non-empty bins of the all-pairs semivariogram as `(center, count, gamma)`.
pub fn variogram_oracle(pts: &[(f64, f64, f64)], bin_width: f64, max_lag: f64) -> Vec<(f64, u64, f64)> {
    let nb = (max_lag / bin_width).ceil() as usize;
    let mut bins: BTreeMap<usize, (u64, f64)> = BTreeMap::new();
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            let d = ((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt();
            if d <= max_lag {
                let e = bins.entry(((d / bin_width).floor() as usize).min(nb - 1)).or_default();
                e.0 += 1;
                e.1 += (pts[i].2 - pts[j].2).powi(2);
            }
        }
    }
    bins.into_iter()
        .map(|(b, (n, s))| ((b as f64 + 0.5) * bin_width, n, s / (2.0 * n as f64)))
        .collect()
}

/// Random non-overlapping rectangular fields on a `cells x cells` lattice
/// of 100 m cells, rasterized at 10 m.
pub struct Layout {
    pub polys: Vec<LabeledPolygon>,
    pub georef: GeoRef,
    pub size: usize,
}

pub fn random_layout<R: Rng>(rng: &mut R, cells: usize, min_polys: usize) -> Layout {
    let (x0, y0) = (rng.random_range(0.0..1e5f64).floor() * 10.0, rng.random_range(0.0..1e5f64).floor() * 10.0);
    loop {
        let p = rng.random_range(0.2..0.9);
        let mut polys = Vec::new();
        for r in 0..cells {
            for c in 0..cells {
                if !rng.random_bool(p) {
                    continue;
                }
                let ins: [f64; 4] = std::array::from_fn(|_| rng.random_range(0..4) as f64 * 10.0);
                let (cx, cy) = (x0 + c as f64 * 100.0, y0 + r as f64 * 100.0);
                polys.push(LabeledPolygon::rect(
                    format!("p{r:02}_{c:02}"),
                    cx + ins[0] + 2.0,
                    cy + ins[1] + 2.0,
                    cx + 100.0 - ins[2] - 2.0,
                    cy + 100.0 - ins[3] - 2.0,
                    rng.random_range(0..2u8),
                ));
            }
        }
        if polys.len() >= min_polys {
            return Layout {
                polys,
                georef: GeoRef::north_up(x0, y0 + cells as f64 * 100.0, 10.0, "EPSG:32643"),
                size: cells * 10,
            };
        }
    }
}

/// Checks the split invariants for one layout; returns a description of the
/// first violation.
pub fn check_cv_layout(layout: &Layout, labels: &LabelRaster, k: usize, block: f64, seed: u64) -> Result<(), String> {
    let (grid, assign) = assign_folds_reseeding(&layout.polys, block, k, seed).map_err(|e| e.to_string())?;
    let (grid2, assign2) = assign_folds_reseeding(&layout.polys, block, k, seed).map_err(|e| e.to_string())?;
    if grid != grid2 || assign != assign2 {
        return Err("assignment differs between identical runs".into());
    }
    if assign.polygon_fold.len() != layout.polys.len() {
        return Err("a polygon has no fold".into());
    }
    let rows: Vec<Option<(&str, usize)>> = labels
        .labeled_pixels()
        .iter()
        .map(|&(r, c, _)| {
            let id = labels.polygon_at(r, c).expect("labeled pixel has a polygon");
            Some((id, assign.polygon_fold[id]))
        })
        .collect();
    let splits = splits_from_rows(&assign, &rows).map_err(|e| e.to_string())?;
    if splits != splits_from_rows(&assign2, &rows).map_err(|e| e.to_string())? {
        return Err("splits differ between identical runs".into());
    }
    let mut seen = vec![0usize; rows.len()];
    for (f, s) in splits.iter().enumerate() {
        let val: std::collections::BTreeSet<usize> = s.validation.iter().copied().collect();
        if s.train.iter().any(|i| val.contains(i)) {
            return Err(format!("fold {f}: a row is in train and validation"));
        }
        for &i in &s.validation {
            seen[i] += 1;
        }
        // polygon atomicity: membership is decided by the polygon alone
        for (i, rp) in rows.iter().enumerate() {
            let (_, pf) = rp.unwrap();
            if (pf == f) != val.contains(&i) {
                return Err(format!("fold {f}: row {i} split from its polygon"));
            }
        }
    }
    if seen.iter().any(|&n| n != 1) {
        return Err("validation sets do not partition the labeled rows".into());
    }
    let mut prev = apply_dead_zone(&assign, &layout.polys, 0.0).map_err(|e| e.to_string())?;
    for radius in [50.0, 120.0, 250.0, 500.0, 1000.0, 5000.0] {
        let next = apply_dead_zone(&assign, &layout.polys, radius).map_err(|e| e.to_string())?;
        for f in 0..k {
            if !prev.excluded[f].is_subset(&next.excluded[f]) {
                return Err(format!("dead zone shrank between radii at fold {f}"));
            }
            if next.excluded[f].iter().any(|id| assign.polygon_fold[id] == f) {
                return Err(format!("fold {f} excludes its own polygon"));
            }
        }
        prev = next;
    }
    let _ = grid;
    Ok(())
}

/// Runs the named stages in order.
pub fn run_stages(cfg: &PipelineConfig, stages: &[&str]) -> cropmap::Result<Option<pipeline::TrainSummary>> {
    let mut summary = None;
    for &s in stages {
        match s {
            "preprocess" => pipeline::cmd_preprocess(cfg)?,
            "rasterize-labels" => pipeline::cmd_rasterize_labels(cfg)?,
            "featurize" => pipeline::cmd_featurize(cfg)?,
            "folds" => pipeline::cmd_folds(cfg)?,
            "train" => summary = Some(pipeline::cmd_train(cfg)?),
            "evaluate" => {
                pipeline::cmd_evaluate(cfg)?;
            }
            "importance" => {
                pipeline::cmd_importance(cfg)?;
            }
            "predict" => pipeline::cmd_predict(cfg)?,
            "variogram" => {
                pipeline::cmd_variogram(cfg)?;
            }
            "profile" => pipeline::cmd_profile(cfg)?,
            other => panic!("unknown stage {other}"),
        }
    }
    Ok(summary)
}

/// Fraction of pixels whose predicted class equals the generative truth;
/// nodata predictions count as misses.
pub fn agreement(predicted: &Path, truth: &Path) -> f64 {
    let p = read_mask(predicted).expect("prediction mask");
    let t = read_mask(truth).expect("truth mask");
    assert_eq!(p.values.len(), t.values.len());
    let hits = p.values.iter().zip(&t.values).filter(|(a, b)| a == b).count();
    hits as f64 / p.values.len() as f64
}

/// Every file under `dir`, keyed by relative path, except the manifest
/// (which records wall-clock times).
pub fn artifact_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, d: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        let mut entries: Vec<_> = std::fs::read_dir(d).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                if rel != "manifest.json" {
                    out.insert(rel, std::fs::read(&p).unwrap());
                }
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}
