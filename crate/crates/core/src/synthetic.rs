//! Synthetic two-class tiles with known ground truth.
//!
//! Cropland pixels follow a spring rise to an NDVI plateau near 0.8 and an
//! autumn drop; non-cropland stays around 0.45 with more noise. Classes are
//! laid out in square blocks, scenes are dated through one year, and a
//! fraction of pixels per scene is flagged cloudy in the SCL band.

use chrono::{Datelike, Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::WEEKS;
use crate::raster_io::{Band, BandStack, GeoRef, LabeledPolygon, TimeKey, CROPLAND, NON_CROPLAND};

/// SCL code written for clear pixels (vegetation).
pub const SCL_CLEAR: u16 = 4;
/// SCL code written for cloudy pixels (cloud, high probability).
pub const SCL_CLOUD: u16 = 9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub size: usize,
    pub pixel_size: f64,
    pub origin: (f64, f64),
    pub crs: String,
    pub year: i32,
    /// Days between acquisitions.
    pub revisit_days: i64,
    /// Side of the square class blocks, in pixels.
    pub class_block: usize,
    /// Unlabeled margin inside each class block, in pixels.
    pub polygon_inset: usize,
    pub cloud_fraction: f64,
    /// Pixels that are cloudy in every scene.
    pub always_cloudy: Vec<(usize, usize)>,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            size: 128,
            pixel_size: 10.0,
            origin: (600_000.0, 3_500_000.0),
            crs: "EPSG:32643".into(),
            year: 2020,
            revisit_days: 5,
            class_block: 16,
            polygon_inset: 3,
            cloud_fraction: 0.2,
            always_cloudy: Vec::new(),
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticTile {
    /// Dated scenes with B02, B03, B04, B08 and SCL.
    pub scenes: BandStack,
    /// Generative class of every pixel, row-major.
    pub truth: Vec<u8>,
    pub polygons: Vec<LabeledPolygon>,
    pub georef: GeoRef,
}

/// Mean cropland NDVI in week `w`: logistic green-up around week 14 and
/// senescence around week 38.
pub fn cropland_ndvi(w: f64) -> f64 {
    let rise = 1.0 / (1.0 + (-(w - 14.0) / 1.5).exp());
    let fall = 1.0 / (1.0 + ((w - 38.0) / 1.5).exp());
    0.22 + 0.58 * rise * fall
}

/// Mean non-cropland NDVI in week `w`.
pub fn non_cropland_ndvi(w: f64) -> f64 {
    0.45 + 0.05 * (2.0 * std::f64::consts::PI * (w - 10.0) / 52.0).sin()
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticTile> {
    if cfg.size == 0 || cfg.class_block == 0 || 2 * cfg.polygon_inset >= cfg.class_block {
        return Err(Error::Config("synthetic tile needs positive size and a block wider than twice the inset".into()));
    }
    if !(0.0..1.0).contains(&cfg.cloud_fraction) || cfg.revisit_days <= 0 {
        return Err(Error::Config("cloud fraction must be in [0, 1) and revisit positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.size;
    let georef = GeoRef::north_up(cfg.origin.0, cfg.origin.1, cfg.pixel_size, cfg.crs.clone());

    let nb = n.div_ceil(cfg.class_block);
    let mut block_class: Vec<u8> = (0..nb * nb).map(|_| rng.random_bool(0.5) as u8).collect();
    // both classes must be present
    block_class[0] = CROPLAND;
    block_class[nb * nb - 1] = NON_CROPLAND;
    let truth: Vec<u8> = (0..n * n)
        .map(|p| block_class[(p / n / cfg.class_block) * nb + (p % n) / cfg.class_block])
        .collect();

    let mut polygons = Vec::new();
    for br in 0..nb {
        for bc in 0..nb {
            let r0 = br * cfg.class_block + cfg.polygon_inset;
            let c0 = bc * cfg.class_block + cfg.polygon_inset;
            let r1 = ((br + 1) * cfg.class_block).min(n).saturating_sub(cfg.polygon_inset);
            let c1 = ((bc + 1) * cfg.class_block).min(n).saturating_sub(cfg.polygon_inset);
            if r1 <= r0 || c1 <= c0 {
                continue;
            }
            let (x0, y0) = georef.to_map(r1 as f64, c0 as f64);
            let (x1, y1) = georef.to_map(r0 as f64, c1 as f64);
            polygons.push(LabeledPolygon::rect(
                format!("b{br:02}_{bc:02}"),
                x0,
                y0,
                x1,
                y1,
                block_class[br * nb + bc],
            ));
        }
    }

    // per-pixel brightness, phenology shift and noise level
    let brightness: Vec<f64> = (0..n * n).map(|_| rng.random_range(2200.0..3400.0)).collect();
    let shift: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let crop_noise = Normal::new(0.0, 0.03).expect("valid sd");
    let other_noise = Normal::new(0.0, 0.08).expect("valid sd");

    let start = NaiveDate::from_ymd_opt(cfg.year, 1, 3).ok_or_else(|| Error::Config("bad year".into()))?;
    let mut dates = Vec::new();
    let mut d = start;
    while d.year() == cfg.year {
        dates.push(d);
        d += Duration::days(cfg.revisit_days);
    }
    let bands = vec![Band::B02, Band::B03, Band::B04, Band::B08, Band::Scl];
    let times = dates.iter().map(|&d| TimeKey::Date(d)).collect();
    let mut scenes = BandStack::new(georef.clone(), bands, times, n, n);
    let mut cloudy_always = vec![false; n * n];
    for &(r, c) in &cfg.always_cloudy {
        if r < n && c < n {
            cloudy_always[r * n + c] = true;
        }
    }
    let plane = n * n;
    for (t, date) in dates.iter().enumerate() {
        let week = (date.ordinal0() as f64 / 7.0).min((WEEKS - 1) as f64);
        let base = t * 5 * plane;
        for p in 0..plane {
            let cloudy = cloudy_always[p] || rng.random_bool(cfg.cloud_fraction);
            let (mean, noise) = if truth[p] == CROPLAND {
                (cropland_ndvi(week + shift[p]), crop_noise.sample(&mut rng))
            } else {
                (non_cropland_ndvi(week), other_noise.sample(&mut rng))
            };
            let v = (mean + noise).clamp(-0.9, 0.95);
            let s = brightness[p];
            let (red, nir) = if cloudy {
                (7000.0 + rng.random_range(0.0..2000.0), 7500.0 + rng.random_range(0.0..2000.0))
            } else {
                (s * (1.0 - v) / 2.0, s * (1.0 + v) / 2.0)
            };
            let blue = 0.8 * red + 150.0;
            let green = 0.9 * red + 0.1 * nir + 100.0;
            let dn = |x: f64| x.round().clamp(1.0, 65535.0) as u16;
            scenes.pixels[base + p] = dn(blue);
            scenes.pixels[base + plane + p] = dn(green);
            scenes.pixels[base + 2 * plane + p] = dn(red);
            scenes.pixels[base + 3 * plane + p] = dn(nir);
            scenes.pixels[base + 4 * plane + p] = if cloudy { SCL_CLOUD } else { SCL_CLEAR };
        }
    }
    Ok(SyntheticTile {
        scenes,
        truth,
        polygons,
        georef,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_have_expected_shape() {
        assert!(cropland_ndvi(2.0) < 0.3);
        assert!((cropland_ndvi(26.0) - 0.8).abs() < 0.01);
        assert!(cropland_ndvi(50.0) < 0.3);
        for w in 0..53 {
            assert!((non_cropland_ndvi(w as f64) - 0.45).abs() <= 0.05 + 1e-12);
        }
    }

    #[test]
    fn small_tile_is_deterministic() {
        let cfg = SyntheticConfig {
            size: 32,
            ..Default::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.scenes, b.scenes);
        assert_eq!(a.truth, b.truth);
        assert_eq!(a.polygons.len(), 4);
        assert!(a.truth.contains(&0) && a.truth.contains(&1));
        a.scenes.validate().unwrap();
        let scl = &a.scenes.pixels[4 * 32 * 32..5 * 32 * 32];
        let cloudy = scl.iter().filter(|&&v| v == SCL_CLOUD).count() as f64 / scl.len() as f64;
        assert!((cloudy - 0.2).abs() < 0.05);
    }
}
