use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifiers::{HyperParamGrid, ModelParams};
use crate::diagnostics::{SavgolParams, Subsample};
use crate::error::{Error, Result};
use crate::features::FeatureSpec;
use crate::preprocess::{CloudMaskPolicy, ImputationMethod, NormalizationMethod};

/// One JSON document driving every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    #[serde(default = "default_year")]
    pub year: i32,
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; `None` uses every core.
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default = "FeatureSpec::full")]
    pub features: FeatureSpec,
    #[serde(default)]
    pub cv: CvConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub predict: PredictConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
}

fn default_year() -> i32 {
    2020
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub tiles: Vec<TileConfig>,
    /// Training polygons.
    pub labels: PathBuf,
    /// Independent test regions, evaluated separately and then averaged.
    #[serde(default)]
    pub test_labels: Vec<LabelSetConfig>,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileConfig {
    pub name: String,
    /// Dated scene stacks covering the tile.
    pub scenes: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSetConfig {
    pub name: String,
    pub labels: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    #[serde(default)]
    pub scl_policy: CloudMaskPolicy,
    #[serde(default = "default_imputation")]
    pub imputation: ImputationMethod,
    #[serde(default = "default_normalization")]
    pub normalization: NormalizationMethod,
}

fn default_imputation() -> ImputationMethod {
    ImputationMethod::Linear
}

fn default_normalization() -> NormalizationMethod {
    NormalizationMethod::AsReflectance
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            scl_policy: CloudMaskPolicy::default(),
            imputation: default_imputation(),
            normalization: default_normalization(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_block")]
    pub block_size_m: f64,
    /// Defaults to the run seed.
    #[serde(default)]
    pub cv_seed: Option<u64>,
    #[serde(default)]
    pub dead_zone_m: f64,
}

fn default_k() -> usize {
    3
}

fn default_block() -> f64 {
    2000.0
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            k: default_k(),
            block_size_m: default_block(),
            cv_seed: None,
            dead_zone_m: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Rf,
    Svm,
}

/// Either a grid to search or one fixed parameter set. With neither, the
/// default search space of `kind` is used.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub kind: ModelKind,
    #[serde(default)]
    pub grid: Option<HyperParamGrid>,
    #[serde(default)]
    pub params: Option<ModelParams>,
}

impl ModelConfig {
    pub fn resolve_grid(&self) -> Result<HyperParamGrid> {
        let grid = match (&self.grid, &self.params) {
            (Some(_), Some(_)) => return Err(Error::Config("model: give either grid or params, not both".into())),
            (Some(g), None) => g.clone(),
            (None, Some(p)) => HyperParamGrid::single(p),
            (None, None) => match self.kind {
                ModelKind::Rf => HyperParamGrid::forest_default(),
                ModelKind::Svm => HyperParamGrid::svm_default(),
            },
        };
        let grid_kind = match grid {
            HyperParamGrid::Rf { .. } => ModelKind::Rf,
            HyperParamGrid::Svm { .. } => ModelKind::Svm,
        };
        if grid_kind != self.kind {
            return Err(Error::Config(format!(
                "model kind {:?} does not match its grid or params",
                self.kind
            )));
        }
        Ok(grid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    #[serde(default = "default_repeats")]
    pub n_repeats: usize,
    #[serde(default = "default_threshold")]
    pub importance_threshold: f64,
}

fn default_repeats() -> usize {
    10
}

fn default_threshold() -> f64 {
    0.001
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            n_repeats: default_repeats(),
            importance_threshold: default_threshold(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictConfig {
    /// Explicit strip height; overrides the memory budget.
    #[serde(default)]
    pub strip_rows: Option<usize>,
    #[serde(default = "default_budget")]
    pub memory_budget_mb: usize,
}

fn default_budget() -> usize {
    256
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            strip_rows: None,
            memory_budget_mb: default_budget(),
        }
    }
}

/// Per-pixel value fed to the semivariogram.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariogramValue {
    #[default]
    Label,
    MeanNdvi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    #[serde(default)]
    pub savgol: SavgolParams,
    #[serde(default = "default_bin")]
    pub bin_width_m: f64,
    #[serde(default = "default_max_lag")]
    pub max_lag_m: f64,
    #[serde(default)]
    pub subsample: Subsample,
    #[serde(default)]
    pub value: VariogramValue,
}

fn default_bin() -> f64 {
    250.0
}

fn default_max_lag() -> f64 {
    10_000.0
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            savgol: SavgolParams::default(),
            bin_width_m: default_bin(),
            max_lag_m: default_max_lag(),
            subsample: Subsample::default(),
            value: VariogramValue::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<PipelineConfig> {
        let cfg: PipelineConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths are taken from its directory.
    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for t in &mut self.paths.tiles {
            t.scenes.iter_mut().for_each(fix);
        }
        fix(&mut self.paths.labels);
        for s in &mut self.paths.test_labels {
            fix(&mut s.labels);
        }
        fix(&mut self.paths.out_dir);
    }

    pub fn validate(&self) -> Result<()> {
        if self.paths.tiles.is_empty() {
            return Err(Error::Config("paths.tiles is empty".into()));
        }
        let mut names: Vec<&str> = self.paths.tiles.iter().map(|t| t.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("tile names must be unique".into()));
        }
        let mut sets: Vec<&str> = self.paths.test_labels.iter().map(|s| s.name.as_str()).collect();
        sets.push("train");
        sets.sort_unstable();
        if sets.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("test label set names must be unique and not \"train\"".into()));
        }
        for n in names.iter().chain(&sets) {
            if n.is_empty() || n.contains(['/', '\\']) || n.starts_with('.') {
                return Err(Error::Config(format!("name {n:?} cannot be used in a file name")));
            }
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be positive".into()));
        }
        self.preprocess.scl_policy.validate()?;
        self.features.validate()?;
        if self.cv.k < 2 || !(self.cv.block_size_m > 0.0) || !(self.cv.dead_zone_m >= 0.0) {
            return Err(Error::Config("cv needs k >= 2, block_size_m > 0 and dead_zone_m >= 0".into()));
        }
        self.model.resolve_grid()?;
        if self.evaluation.n_repeats == 0 {
            return Err(Error::Config("evaluation.n_repeats must be positive".into()));
        }
        if self.predict.strip_rows == Some(0) || self.predict.memory_budget_mb == 0 {
            return Err(Error::Config("predict strip height and memory budget must be positive".into()));
        }
        Ok(())
    }

    pub fn cv_seed(&self) -> u64 {
        self.cv.cv_seed.unwrap_or(self.seed)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
