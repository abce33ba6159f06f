//! Cropland mapping from satellite image time series.
//!
//! Raw dated scenes go through cloud masking, weekly compositing, gap
//! imputation and normalization, then per-pixel feature engineering,
//! spatially cross-validated random forest or SVM training, evaluation,
//! and streaming mask prediction. Geostatistical and label-quality
//! diagnostics live in [`diagnostics`].

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classifiers;
pub mod diagnostics;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod par;
pub mod pipeline;
pub mod preprocess;
pub mod raster_io;
pub mod spatial_cv;
pub mod synthetic;

pub use error::{Error, Result};
