//! File-based orchestration of the mapping pipeline.
//!
//! Every stage reads its inputs from the output directory, checks them
//! against the digests recorded in `manifest.json` by the stage that wrote
//! them, and records what it writes in turn.
//!
//! Layout under `out_dir`:
//!
//! | stage | artifacts |
//! |---|---|
//! | preprocess | `composite/<tile>.bstk`, `composite/<tile>.removed.pgm` |
//! | rasterize-labels | `labels/<set>/<tile>.pgm`, `labels/<set>/<tile>.pixels.csv` |
//! | featurize | `features/<set>.f64` (+ `.json`), `features/<set>.rows.csv` |
//! | folds | `folds/folds.csv`, `folds/assignment.json`, `folds/<tile>.bstk` |
//! | train | `model/model.json`, `model/grid.csv`, `model/best_params.txt` |
//! | evaluate | `eval/report.csv`, `eval/report.json` |
//! | importance | `eval/importance.csv`, `eval/importance_headline.csv` |
//! | predict | `predict/<tile>.pgm`, `predict/<tile>.votes.bstk` |
//! | variogram | `diagnostics/variogram.csv`, `diagnostics/variogram.json` |
//! | profile | `diagnostics/profile_<tile>.csv` |
//!
//! `<set>` is `train` or the name of a test label set.

mod config;
mod manifest;

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use config::{
    CvConfig, DiagnosticsConfig, EvaluationConfig, LabelSetConfig, ModelConfig, ModelKind, PathsConfig,
    PipelineConfig, PredictConfig, PreprocessConfig, TileConfig, VariogramValue,
};
pub use manifest::{digest_hex, file_digest, fnv1a64, RunManifest, StageIo, StageRecord, MANIFEST_FILE};

use crate::classifiers::{grid_search, train_model, Classifier, Model, ModelParams};
use crate::diagnostics::{class_ndvi_profile, empirical_semivariogram, fit_spherical, ndvi_series};
use crate::error::{Error, Result};
use crate::evaluation::{permutation_importance, EvaluationReport, Metrics, RegionReport};
use crate::features::{featurize_pixels, featurize_rows, FeatureMatrix, FeatureSpec};
use crate::par;
use crate::preprocess::{
    impute, normalize_composite, observations_from_stacks, weekly_composite, ColumnScaler, CompositeStack,
    ImputationMethod, NormalizationMethod, WEEKS,
};
use crate::raster_io::{
    label_polygons_to_geojson, parse_label_polygons, rasterize_labels, write_bandstack, BandStack, Band,
    LabelRaster, LabeledPolygon, Mask, TimeKey, MASK_NODATA, UNLABELED,
};
use crate::spatial_cv::{apply_dead_zone, assign_folds_reseeding, splits_from_rows, BlockGrid, FoldAssignment};
use crate::synthetic::{generate, SyntheticConfig};

/// Stage names in pipeline order.
pub const STAGES: [&str; 10] = [
    "preprocess",
    "rasterize-labels",
    "featurize",
    "folds",
    "train",
    "evaluate",
    "importance",
    "predict",
    "variogram",
    "profile",
];

/// A trained model plus everything needed to apply it to new tiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub model: Model,
    pub params: ModelParams,
    /// `name=[value]; ...` echo of the selected hyper-parameters.
    pub selected: String,
    pub cv_mean: Metrics,
    pub feature_spec: FeatureSpec,
    pub imputation: ImputationMethod,
    pub normalization: NormalizationMethod,
    /// Column scaling fitted on the training matrix, for column methods.
    pub scaler: Option<ColumnScaler>,
    pub seed: u64,
    pub cv_seed: u64,
}

impl ModelFile {
    pub fn from_json(bytes: &[u8]) -> Result<ModelFile> {
        serde_json::from_slice(bytes).map_err(|e| Error::Format(format!("model file: {e}")))
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        serde_json::to_vec(self).map_err(|e| Error::Format(e.to_string()))
    }

    fn prepare(&self, fm: &FeatureMatrix) -> Result<Array2<f64>> {
        if fm.names != self.model.feature_names() {
            return Err(Error::Schema("feature matrix columns differ from the model's feature names".into()));
        }
        let mut x = fm.values.as_standard_layout().into_owned();
        if let Some(s) = &self.scaler {
            s.apply(x.as_slice_mut().expect("standard layout"));
        }
        Ok(x)
    }
}

fn config_hash(cfg: &PipelineConfig) -> String {
    digest_hex(cfg.to_json().as_bytes())
}

/// Runs `f` as stage `name` on the configured thread pool and records it.
fn stage<T>(cfg: &PipelineConfig, name: &str, f: impl FnOnce(&mut StageIo) -> Result<T> + Send) -> Result<T>
where
    T: Send,
{
    cfg.validate()?;
    par::with_threads(cfg.threads, || {
        let mut io = StageIo::begin(&cfg.paths.out_dir, name, &config_hash(cfg))?;
        let out = f(&mut io)?;
        io.finish()?;
        Ok(out)
    })
}

fn composite_rel(tile: &str) -> String {
    format!("composite/{tile}.bstk")
}

fn pixels_rel(set: &str, tile: &str) -> String {
    format!("labels/{set}/{tile}.pixels.csv")
}

fn label_sets(cfg: &PipelineConfig) -> Vec<(String, &Path)> {
    let mut v = vec![("train".to_string(), cfg.paths.labels.as_path())];
    v.extend(cfg.paths.test_labels.iter().map(|s| (s.name.clone(), s.labels.as_path())));
    v
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

fn write_mask_io(io: &mut StageIo, rel: &str, mask: &Mask) -> Result<()> {
    io.write(rel, &mask.to_pgm()?)?;
    let sidecar = rel.trim_end_matches(".pgm").to_string() + ".georef.json";
    let json = serde_json::to_vec_pretty(&mask.georef).map_err(|e| Error::Format(e.to_string()))?;
    io.write(&sidecar, &json)
}

fn load_composite(io: &mut StageIo, tile: &str) -> Result<CompositeStack> {
    let bytes = io.upstream(&composite_rel(tile), "preprocess")?;
    CompositeStack::from_bandstack(&BandStack::from_bytes(&bytes)?)
}

/// Cloud masking, weekly compositing and imputation per tile.
pub fn cmd_preprocess(cfg: &PipelineConfig) -> Result<()> {
    stage(cfg, "preprocess", |io| {
        for tile in &cfg.paths.tiles {
            if tile.scenes.is_empty() {
                return Err(Error::Config(format!("tile {} lists no scenes", tile.name)));
            }
            let mut stacks = Vec::with_capacity(tile.scenes.len());
            for p in &tile.scenes {
                stacks.push(BandStack::from_bytes(&io.raw(p)?)?);
            }
            let first = &stacks[0];
            if stacks
                .iter()
                .any(|s| s.width != first.width || s.height != first.height || s.georef != first.georef)
            {
                return Err(Error::Schema(format!("scenes of tile {} are not on one grid", tile.name)));
            }
            let obs = observations_from_stacks(&stacks, &cfg.preprocess.scl_policy)?;
            let composite = weekly_composite(&obs, cfg.year, &first.georef, first.height, first.width)?;
            if composite.removed.iter().all(|&r| r) {
                return Err(Error::Data(format!("tile {} has no usable observation", tile.name)));
            }
            let imputed = impute(&composite, cfg.preprocess.imputation);
            io.write(&composite_rel(&tile.name), &imputed.to_bandstack().to_bytes()?)?;
            let removed = Mask {
                georef: imputed.georef.clone(),
                width: imputed.width,
                height: imputed.height,
                values: imputed.removed.iter().map(|&r| r as u8).collect(),
            };
            write_mask_io(io, &format!("composite/{}.removed.pgm", tile.name), &removed)?;
        }
        Ok(())
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PixelRow {
    row: usize,
    col: usize,
    class: u8,
    polygon_id: String,
}

fn read_pixels(bytes: &[u8]) -> Result<Vec<PixelRow>> {
    csv::Reader::from_reader(bytes)
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(csv_err)
}

fn read_polygons(io: &mut StageIo, path: &Path) -> Result<Vec<LabeledPolygon>> {
    let bytes = io.raw(path)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    parse_label_polygons(&text)
}

fn label_raster_from_pixels(georef: &crate::raster_io::GeoRef, h: usize, w: usize, px: &[PixelRow]) -> LabelRaster {
    let mut lr = LabelRaster {
        georef: georef.clone(),
        width: w,
        height: h,
        values: vec![UNLABELED; h * w],
        polygon: vec![None; h * w],
        polygon_ids: Vec::new(),
    };
    let mut ids: BTreeMap<&str, u32> = BTreeMap::new();
    for p in px {
        let n = ids.len() as u32;
        let id = *ids.entry(p.polygon_id.as_str()).or_insert_with(|| {
            lr.polygon_ids.push(p.polygon_id.clone());
            n
        });
        lr.values[p.row * w + p.col] = p.class;
        lr.polygon[p.row * w + p.col] = Some(id);
    }
    lr
}

/// Rasterizes every label set onto every tile grid.
pub fn cmd_rasterize_labels(cfg: &PipelineConfig) -> Result<()> {
    stage(cfg, "rasterize-labels", |io| {
        for (set, path) in label_sets(cfg) {
            let polys = read_polygons(io, path)?;
            for tile in &cfg.paths.tiles {
                let comp = BandStack::from_bytes(&io.upstream(&composite_rel(&tile.name), "preprocess")?)?;
                let lr = rasterize_labels(&polys, &comp.georef, comp.height, comp.width)?;
                let mask = Mask {
                    georef: lr.georef.clone(),
                    width: lr.width,
                    height: lr.height,
                    values: lr.values.iter().map(|&v| if v == UNLABELED { MASK_NODATA } else { v }).collect(),
                };
                write_mask_io(io, &format!("labels/{set}/{}.pgm", tile.name), &mask)?;
                let mut w = csv::Writer::from_writer(Vec::new());
                for (row, col, class) in lr.labeled_pixels() {
                    w.serialize(PixelRow {
                        row,
                        col,
                        class,
                        polygon_id: lr.polygon_at(row, col).unwrap_or_default().to_string(),
                    })
                    .map_err(csv_err)?;
                }
                let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
                io.write(&pixels_rel(&set, &tile.name), &bytes)?;
            }
        }
        Ok(())
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FeatureRow {
    tile: String,
    row: usize,
    col: usize,
    polygon_id: String,
    class: u8,
}

fn prepare_composite(cfg: &PipelineConfig, mut comp: CompositeStack) -> Result<CompositeStack> {
    if cfg.preprocess.normalization.is_pointwise() {
        normalize_composite(&mut comp, cfg.preprocess.normalization)?;
    }
    Ok(comp)
}

/// Feature matrices of the labeled pixels of every label set.
pub fn cmd_featurize(cfg: &PipelineConfig) -> Result<()> {
    stage(cfg, "featurize", |io| {
        let mut composites = Vec::new();
        for tile in &cfg.paths.tiles {
            composites.push(prepare_composite(cfg, load_composite(io, &tile.name)?)?);
        }
        for (set, _) in label_sets(cfg) {
            let mut parts = Vec::new();
            let mut rows = Vec::new();
            for (tile, comp) in cfg.paths.tiles.iter().zip(&composites) {
                let px = read_pixels(&io.upstream(&pixels_rel(&set, &tile.name), "rasterize-labels")?)?;
                let by_pos: BTreeMap<(usize, usize), &PixelRow> = px.iter().map(|p| ((p.row, p.col), p)).collect();
                let pixels: Vec<(usize, usize)> = px.iter().map(|p| (p.row, p.col)).collect();
                let mut fm = featurize_pixels(comp, &cfg.features, &pixels)?;
                let mut labels = Vec::with_capacity(fm.n_rows());
                for pos in &fm.pixel_index {
                    let p = by_pos[pos];
                    labels.push(p.class);
                    rows.push(FeatureRow {
                        tile: tile.name.clone(),
                        row: p.row,
                        col: p.col,
                        polygon_id: p.polygon_id.clone(),
                        class: p.class,
                    });
                }
                fm.labels = Some(labels);
                parts.push(fm);
            }
            let fm = FeatureMatrix::concat(&parts)?;
            let rel = format!("features/{set}.f64");
            fm.write_binary(&io.path(&rel))?;
            io.written(&rel)?;
            io.written(&format!("{rel}.json"))?;
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in &rows {
                w.serialize(r).map_err(csv_err)?;
            }
            io.write(&format!("features/{set}.rows.csv"), &w.into_inner().map_err(|e| Error::Format(e.to_string()))?)?;
        }
        Ok(())
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FoldFile {
    grid: BlockGrid,
    assignment: FoldAssignment,
}

/// Spatial fold assignment of the training polygons.
pub fn cmd_folds(cfg: &PipelineConfig) -> Result<()> {
    stage(cfg, "folds", |io| {
        let polys = read_polygons(io, &cfg.paths.labels)?;
        let (grid, assign) = assign_folds_reseeding(&polys, cfg.cv.block_size_m, cfg.cv.k, cfg.cv_seed())?;
        let assign = apply_dead_zone(&assign, &polys, cfg.cv.dead_zone_m)?;
        io.seed("cv_seed", cfg.cv_seed());
        io.seed("cv_seed_used", grid.seed);
        io.write("folds/folds.csv", &assign.to_csv()?)?;
        let file = FoldFile {
            grid,
            assignment: assign.clone(),
        };
        io.write(
            "folds/assignment.json",
            &serde_json::to_vec_pretty(&file).map_err(|e| Error::Format(e.to_string()))?,
        )?;
        for tile in &cfg.paths.tiles {
            let px = read_pixels(&io.upstream(&pixels_rel("train", &tile.name), "rasterize-labels")?)?;
            let comp = BandStack::from_bytes(&io.upstream(&composite_rel(&tile.name), "preprocess")?)?;
            let lr = label_raster_from_pixels(&comp.georef, comp.height, comp.width, &px);
            io.write(&format!("folds/{}.bstk", tile.name), &assign.fold_raster(&lr).to_bytes()?)?;
        }
        Ok(())
    })
}

fn read_matrix(io: &mut StageIo, set: &str) -> Result<(FeatureMatrix, Vec<FeatureRow>)> {
    let rel = format!("features/{set}.f64");
    io.upstream(&format!("{rel}.json"), "featurize")?;
    let fm = FeatureMatrix::read_binary(&io.upstream_path(&rel, "featurize")?)?;
    let rows: Vec<FeatureRow> = csv::Reader::from_reader(&io.upstream(&format!("features/{set}.rows.csv"), "featurize")?[..])
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(csv_err)?;
    if rows.len() != fm.n_rows() || fm.labels.is_none() {
        return Err(Error::Schema(format!("features/{set}: rows file does not match the matrix")));
    }
    Ok((fm, rows))
}

/// Result of [`cmd_train`].
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub selected: ModelParams,
    pub cv_mean: Metrics,
    pub grid_csv: Vec<u8>,
}

/// Grid search over the spatial folds, then a final fit on all training rows.
pub fn cmd_train(cfg: &PipelineConfig) -> Result<TrainSummary> {
    stage(cfg, "train", |io| {
        let (fm, rows) = read_matrix(io, "train")?;
        let folds: FoldFile = serde_json::from_slice(&io.upstream("folds/assignment.json", "folds")?)
            .map_err(|e| Error::Format(format!("fold file: {e}")))?;
        let assign = &folds.assignment;
        let row_poly: Vec<Option<(&str, usize)>> = rows
            .iter()
            .map(|r| assign.polygon_fold.get(&r.polygon_id).map(|&f| (r.polygon_id.as_str(), f)))
            .collect();
        let splits = splits_from_rows(assign, &row_poly)?;
        let y = fm.labels.clone().expect("checked");
        let mut x = fm.values.as_standard_layout().into_owned();
        let scaler = if cfg.preprocess.normalization.is_pointwise() {
            None
        } else {
            let s = ColumnScaler::fit(x.as_slice().expect("standard layout"), x.ncols(), cfg.preprocess.normalization);
            s.apply(x.as_slice_mut().expect("standard layout"));
            Some(s)
        };
        let grid = cfg.model.resolve_grid()?;
        let result = grid_search(x.view(), &y, &splits, &grid, cfg.seed, &fm.names)?;
        let cv_mean = result.table[result.best_index].mean;
        let model = train_model(&result.best, x.view(), &y, cfg.seed, &fm.names)?;
        io.seed("seed", cfg.seed);
        let file = ModelFile {
            model,
            selected: result.best.echo(),
            params: result.best.clone(),
            cv_mean,
            feature_spec: cfg.features.clone(),
            imputation: cfg.preprocess.imputation,
            normalization: cfg.preprocess.normalization,
            scaler,
            seed: cfg.seed,
            cv_seed: folds.grid.seed,
        };
        io.write("model/model.json", &file.to_json()?)?;
        let grid_csv = result.to_csv()?;
        io.write("model/grid.csv", &grid_csv)?;
        io.write("model/best_params.txt", format!("{}\n", file.selected).as_bytes())?;
        Ok(TrainSummary {
            selected: result.best,
            cv_mean,
            grid_csv,
        })
    })
}

fn load_model(io: &mut StageIo) -> Result<(ModelFile, String)> {
    let bytes = io.upstream("model/model.json", "train")?;
    Ok((ModelFile::from_json(&bytes)?, digest_hex(&bytes)))
}

/// Per-region metrics on each test set and their pixel-weighted average.
pub fn cmd_evaluate(cfg: &PipelineConfig) -> Result<EvaluationReport> {
    stage(cfg, "evaluate", |io| {
        if cfg.paths.test_labels.is_empty() {
            return Err(Error::Config("no test label sets configured".into()));
        }
        let (mf, model_id) = load_model(io)?;
        let mut regions = Vec::new();
        for set in &cfg.paths.test_labels {
            let (fm, _) = read_matrix(io, &set.name)?;
            if fm.n_rows() == 0 {
                return Err(Error::Data(format!("test set {} has no labeled pixels on any tile", set.name)));
            }
            let x = mf.prepare(&fm)?;
            let pred = mf.model.predict(x.view())?;
            regions.push(RegionReport::new(&set.name, fm.labels.as_ref().expect("checked"), &pred));
        }
        let report = EvaluationReport::new(model_id, regions)?;
        io.write("eval/report.csv", &report.to_csv()?)?;
        io.write(
            "eval/report.json",
            &serde_json::to_vec_pretty(&report).map_err(|e| Error::Format(e.to_string()))?,
        )?;
        Ok(report)
    })
}

/// Permutation importance on the concatenated test sets (training set when
/// none are configured).
pub fn cmd_importance(cfg: &PipelineConfig) -> Result<crate::evaluation::ImportanceTable> {
    stage(cfg, "importance", |io| {
        let (mf, _) = load_model(io)?;
        let sets: Vec<String> = if cfg.paths.test_labels.is_empty() {
            vec!["train".into()]
        } else {
            cfg.paths.test_labels.iter().map(|s| s.name.clone()).collect()
        };
        let mut parts = Vec::new();
        for s in &sets {
            parts.push(read_matrix(io, s)?.0);
        }
        let fm = FeatureMatrix::concat(&parts)?;
        let x = mf.prepare(&fm)?;
        let seed = cfg.seed;
        io.seed("seed", seed);
        let table = permutation_importance(
            &mf.model,
            x.view(),
            fm.labels.as_ref().expect("checked"),
            &fm.names,
            cfg.evaluation.n_repeats,
            seed,
        )?;
        io.write("eval/importance.csv", &table.to_csv(None)?)?;
        io.write(
            "eval/importance_headline.csv",
            &table.to_csv(Some(cfg.evaluation.importance_threshold))?,
        )?;
        Ok(table)
    })
}

/// Strip height for a tile of the given width: explicit, or derived from the
/// memory budget (feature rows plus the composite rows they read).
pub fn strip_rows(cfg: &PipelineConfig, width: usize, dim: usize) -> usize {
    if let Some(s) = cfg.predict.strip_rows {
        return s;
    }
    let per_row = width * (dim + 4 * WEEKS * 2) * std::mem::size_of::<f64>();
    (cfg.predict.memory_budget_mb * 1024 * 1024 / per_row.max(1)).max(1)
}

/// Vote fractions are stored as `1 + round(f * 65534)`; 0 is nodata.
pub fn encode_vote(f: f64) -> u16 {
    1 + (f.clamp(0.0, 1.0) * 65534.0).round() as u16
}

pub fn decode_vote(v: u16) -> Option<f64> {
    (v != 0).then(|| (v - 1) as f64 / 65534.0)
}

/// Streams each tile in row strips and writes class and vote-fraction maps.
pub fn cmd_predict(cfg: &PipelineConfig) -> Result<()> {
    stage(cfg, "predict", |io| {
        let (mf, _) = load_model(io)?;
        if mf.model.feature_names() != cfg.features.names() {
            return Err(Error::Schema("model feature names do not match the configured feature spec".into()));
        }
        for tile in &cfg.paths.tiles {
            let comp = prepare_composite(cfg, load_composite(io, &tile.name)?)?;
            let (h, w) = (comp.height, comp.width);
            let strip = strip_rows(cfg, w, cfg.features.dimension());
            let mut classes = vec![MASK_NODATA; h * w];
            let mut votes = vec![0u16; h * w];
            let mut r0 = 0;
            while r0 < h {
                let r1 = (r0 + strip).min(h);
                let (h0, h1) = (r0.saturating_sub(1), (r1 + 1).min(h));
                let sub = comp.rows(h0, h1);
                let fm = featurize_rows(&sub, &cfg.features, r0 - h0, r1 - h0)?;
                if fm.n_rows() > 0 {
                    let x = mf.prepare(&fm)?;
                    let (c, f) = mf.model.predict_scores(x.view())?;
                    for (i, &(r, col)) in fm.pixel_index.iter().enumerate() {
                        let p = (r + h0) * w + col;
                        classes[p] = c[i];
                        votes[p] = encode_vote(f[i]);
                    }
                }
                r0 = r1;
            }
            let mask = Mask {
                georef: comp.georef.clone(),
                width: w,
                height: h,
                values: classes,
            };
            write_mask_io(io, &format!("predict/{}.pgm", tile.name), &mask)?;
            let mut vs = BandStack::new(comp.georef.clone(), vec![Band::Mask], vec![TimeKey::Week(0)], h, w);
            vs.pixels = votes;
            io.write(&format!("predict/{}.votes.bstk", tile.name), &vs.to_bytes()?)?;
        }
        Ok(())
    })
}

/// Semivariogram of the training pixels with a spherical fit.
pub fn cmd_variogram(cfg: &PipelineConfig) -> Result<crate::diagnostics::Semivariogram> {
    stage(cfg, "variogram", |io| {
        let d = &cfg.diagnostics;
        let mut samples = Vec::new();
        for tile in &cfg.paths.tiles {
            let px = read_pixels(&io.upstream(&pixels_rel("train", &tile.name), "rasterize-labels")?)?;
            let comp = load_composite(io, &tile.name)?;
            for p in &px {
                let idx = p.row * comp.width + p.col;
                if comp.removed[idx] {
                    continue;
                }
                let (x, y) = comp.georef.pixel_center(p.row, p.col);
                let v = match d.value {
                    VariogramValue::Label => p.class as f64,
                    VariogramValue::MeanNdvi => ndvi_series(&comp, idx)?.iter().sum::<f64>() / WEEKS as f64,
                };
                samples.push((x, y, v));
            }
        }
        let mut vg = empirical_semivariogram(&samples, d.bin_width_m, d.max_lag_m, d.subsample)?;
        if vg.lags.len() >= 3 {
            vg.fit = Some(fit_spherical(&vg)?);
        }
        io.write("diagnostics/variogram.csv", &vg.to_csv()?)?;
        io.write("diagnostics/variogram.json", vg.sidecar_json().as_bytes())?;
        Ok(vg)
    })
}

/// Per-class weekly NDVI profiles of each tile.
pub fn cmd_profile(cfg: &PipelineConfig) -> Result<()> {
    stage(cfg, "profile", |io| {
        for tile in &cfg.paths.tiles {
            let px = read_pixels(&io.upstream(&pixels_rel("train", &tile.name), "rasterize-labels")?)?;
            let comp = load_composite(io, &tile.name)?;
            let lr = label_raster_from_pixels(&comp.georef, comp.height, comp.width, &px);
            let prof = class_ndvi_profile(&comp, &lr, cfg.diagnostics.savgol)?;
            io.write(&format!("diagnostics/profile_{}.csv", tile.name), &prof.to_csv()?)?;
        }
        Ok(())
    })
}

/// Runs every stage in order; evaluation is skipped without test sets.
pub fn run_all(cfg: &PipelineConfig) -> Result<()> {
    cmd_preprocess(cfg)?;
    cmd_rasterize_labels(cfg)?;
    cmd_featurize(cfg)?;
    cmd_folds(cfg)?;
    cmd_train(cfg)?;
    if !cfg.paths.test_labels.is_empty() {
        cmd_evaluate(cfg)?;
    }
    cmd_importance(cfg)?;
    cmd_predict(cfg)?;
    cmd_variogram(cfg)?;
    cmd_profile(cfg)
}

/// Writes synthetic scenes, labels and ground truth under `dir` and returns
/// a config pointing at them: RF with the selected parameters and CV blocks
/// a quarter of the tile side wide (at most 32 pixels). With `test_tile`, a
/// second tile with its own label set is added for evaluation.
pub fn write_synthetic_project(dir: &Path, synth: &SyntheticConfig, test_tile: bool) -> Result<PipelineConfig> {
    let mut tiles = Vec::new();
    let mut test_labels = Vec::new();
    let mut specs = vec![("train".to_string(), synth.clone())];
    if test_tile {
        let mut t = synth.clone();
        t.seed = synth.seed.wrapping_add(1000);
        t.origin.0 += 2.0 * synth.size as f64 * synth.pixel_size;
        specs.push(("test".to_string(), t));
    }
    for (name, s) in &specs {
        let tile = generate(s)?;
        let scene = dir.join(format!("scenes/{name}.bstk"));
        write_bandstack(&tile.scenes, &scene)?;
        let labels = dir.join(format!("labels/{name}.geojson"));
        crate::raster_io::write_file(&labels, label_polygons_to_geojson(&tile.polygons).as_bytes())?;
        let truth = Mask {
            georef: tile.georef.clone(),
            width: s.size,
            height: s.size,
            values: tile.truth.clone(),
        };
        crate::raster_io::write_mask(&truth, dir.join(format!("truth/{name}.pgm")))?;
        tiles.push(TileConfig {
            name: name.clone(),
            scenes: vec![scene],
        });
        if name != "train" {
            test_labels.push(LabelSetConfig {
                name: name.clone(),
                labels,
            });
        }
    }
    let cfg = PipelineConfig {
        paths: PathsConfig {
            tiles,
            labels: dir.join("labels/train.geojson"),
            test_labels,
            out_dir: dir.join("out"),
        },
        year: synth.year,
        seed: 42,
        threads: None,
        preprocess: PreprocessConfig::default(),
        features: FeatureSpec::full(),
        cv: CvConfig {
            k: 3,
            block_size_m: (synth.size / 4).clamp(1, 32) as f64 * synth.pixel_size,
            cv_seed: None,
            dead_zone_m: 0.0,
        },
        model: ModelConfig {
            kind: ModelKind::Rf,
            grid: None,
            params: Some(ModelParams::Rf(Default::default())),
        },
        evaluation: EvaluationConfig::default(),
        predict: PredictConfig::default(),
        diagnostics: DiagnosticsConfig {
            subsample: crate::diagnostics::Subsample::Stride(1),
            max_lag_m: synth.size as f64 * synth.pixel_size,
            bin_width_m: 4.0 * synth.pixel_size,
            ..Default::default()
        },
    };
    cfg.validate()?;
    // stored relative to the project so it loads from any working directory
    let mut stored = cfg.clone();
    let rel = |p: &mut std::path::PathBuf| {
        if let Ok(r) = p.strip_prefix(dir) {
            *p = r.to_path_buf();
        }
    };
    stored.paths.tiles.iter_mut().for_each(|t| t.scenes.iter_mut().for_each(rel));
    rel(&mut stored.paths.labels);
    stored.paths.test_labels.iter_mut().for_each(|s| rel(&mut s.labels));
    rel(&mut stored.paths.out_dir);
    crate::raster_io::write_file(&dir.join("config.json"), stored.to_json().as_bytes())?;
    Ok(cfg)
}
