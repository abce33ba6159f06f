//! Band-stack interchange format, label polygons, rasterization and mask export.
//!
//! The on-disk stack format (`BSTK1`) is:
//!
//! ```text
//! bytes 0..6    b"BSTK1\n"
//! bytes 6..10   u32 LE length L of the JSON header
//! bytes 10..10+L UTF-8 JSON header
//! payload       T*B*H*W u16 LE values, time-major, then band, then row-major
//! ```

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"BSTK1\n";
/// Digital number used as "no data" in every stack.
pub const NODATA: u16 = 0;

/// Affine pixel-to-map transform plus an opaque CRS identifier.
///
/// `x = t[0] + col * t[1] + row * t[2]`, `y = t[3] + col * t[4] + row * t[5]`,
/// with `(row, col)` addressing the pixel's upper-left corner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoRef {
    pub transform: [f64; 6],
    pub crs: String,
}

impl GeoRef {
    /// North-up grid with square pixels of `pixel_size` meters whose upper-left
    /// corner sits at `(x0, y0)`.
    pub fn north_up(x0: f64, y0: f64, pixel_size: f64, crs: impl Into<String>) -> Self {
        GeoRef {
            transform: [x0, pixel_size, 0.0, y0, 0.0, -pixel_size],
            crs: crs.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.transform;
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invariant("transform has non-finite terms".into()));
        }
        if t[1] == 0.0 || t[5] == 0.0 {
            return Err(Error::Invariant("pixel width and height must be nonzero".into()));
        }
        if self.determinant() == 0.0 {
            return Err(Error::Invariant("transform is not invertible".into()));
        }
        Ok(())
    }

    fn determinant(&self) -> f64 {
        let t = &self.transform;
        t[1] * t[5] - t[2] * t[4]
    }

    pub fn is_axis_aligned(&self) -> bool {
        self.transform[2] == 0.0 && self.transform[4] == 0.0
    }

    /// Map coordinates of a fractional pixel position.
    pub fn to_map(&self, row: f64, col: f64) -> (f64, f64) {
        let t = &self.transform;
        (t[0] + col * t[1] + row * t[2], t[3] + col * t[4] + row * t[5])
    }

    /// Map coordinates of the center of pixel `(row, col)`.
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        self.to_map(row as f64 + 0.5, col as f64 + 0.5)
    }

    /// Fractional `(row, col)` of a map point.
    pub fn to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        let t = &self.transform;
        let det = self.determinant();
        let dx = x - t[0];
        let dy = y - t[3];
        let col = (t[5] * dx - t[2] * dy) / det;
        let row = (-t[4] * dx + t[1] * dy) / det;
        (row, col)
    }

    /// Map-space bounding box `(min_x, min_y, max_x, max_y)` of an `h x w` grid.
    pub fn extent(&self, height: usize, width: usize) -> Extent {
        let corners = [
            self.to_map(0.0, 0.0),
            self.to_map(0.0, width as f64),
            self.to_map(height as f64, 0.0),
            self.to_map(height as f64, width as f64),
        ];
        let mut e = Extent::empty();
        for (x, y) in corners {
            e.include(x, y);
        }
        e
    }

    /// Georef of the sub-grid starting at pixel row `row0`.
    pub fn offset_rows(&self, row0: usize) -> GeoRef {
        let (x, y) = self.to_map(row0 as f64, 0.0);
        let mut t = self.transform;
        t[0] = x;
        t[3] = y;
        GeoRef {
            transform: t,
            crs: self.crs.clone(),
        }
    }
}

/// Axis-aligned bounding box in map units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Extent {
    pub fn empty() -> Self {
        Extent {
            min_x: f64::INFINITY,
            min_y: f64::INFINITY,
            max_x: f64::NEG_INFINITY,
            max_y: f64::NEG_INFINITY,
        }
    }

    pub fn include(&mut self, x: f64, y: f64) {
        self.min_x = self.min_x.min(x);
        self.min_y = self.min_y.min(y);
        self.max_x = self.max_x.max(x);
        self.max_y = self.max_y.max(y);
    }

    pub fn union(&self, other: &Extent) -> Extent {
        Extent {
            min_x: self.min_x.min(other.min_x),
            min_y: self.min_y.min(other.min_y),
            max_x: self.max_x.max(other.max_x),
            max_y: self.max_y.max(other.max_y),
        }
    }

    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }
}

/// Band identifiers allowed in a stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Band {
    B02,
    B03,
    B04,
    B08,
    Scl,
    Ndvi,
    Mask,
}

impl Band {
    /// The four spectral bands used throughout the pipeline, in canonical order.
    pub const SPECTRAL: [Band; 4] = [Band::B02, Band::B03, Band::B04, Band::B08];

    pub fn name(self) -> &'static str {
        match self {
            Band::B02 => "B02",
            Band::B03 => "B03",
            Band::B04 => "B04",
            Band::B08 => "B08",
            Band::Scl => "SCL",
            Band::Ndvi => "NDVI",
            Band::Mask => "MASK",
        }
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Band {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "B02" => Band::B02,
            "B03" => Band::B03,
            "B04" => Band::B04,
            "B08" => Band::B08,
            "SCL" => Band::Scl,
            "NDVI" => Band::Ndvi,
            "MASK" => Band::Mask,
            other => return Err(Error::Schema(format!("unknown band name {other:?}"))),
        })
    }
}

/// One entry of a stack's time axis: an acquisition date or a week index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TimeKey {
    Date(NaiveDate),
    Week(u32),
}

impl TimeKey {
    fn to_json(self) -> Value {
        match self {
            TimeKey::Date(d) => Value::String(d.format("%Y-%m-%d").to_string()),
            TimeKey::Week(w) => Value::from(w),
        }
    }

    fn from_json(v: &Value) -> Result<Self> {
        match v {
            Value::String(s) => NaiveDate::parse_from_str(s, "%Y-%m-%d")
                .map(TimeKey::Date)
                .map_err(|e| Error::Schema(format!("bad date {s:?}: {e}"))),
            Value::Number(n) => n
                .as_u64()
                .filter(|&w| w <= 52)
                .map(|w| TimeKey::Week(w as u32))
                .ok_or_else(|| Error::Schema(format!("bad week index {n}"))),
            other => Err(Error::Schema(format!("bad time entry {other}"))),
        }
    }
}

/// Time x band x row x col grid of digital numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct BandStack {
    pub georef: GeoRef,
    pub bands: Vec<Band>,
    pub times: Vec<TimeKey>,
    pub width: usize,
    pub height: usize,
    /// Time-major, then band, then row-major pixels.
    pub pixels: Vec<u16>,
    pub nodata: u16,
}

impl BandStack {
    /// Zero-filled stack.
    pub fn new(
        georef: GeoRef,
        bands: Vec<Band>,
        times: Vec<TimeKey>,
        height: usize,
        width: usize,
    ) -> Self {
        let len = times.len() * bands.len() * height * width;
        BandStack {
            georef,
            bands,
            times,
            width,
            height,
            pixels: vec![NODATA; len],
            nodata: NODATA,
        }
    }

    pub fn plane_len(&self) -> usize {
        self.width * self.height
    }

    pub fn band_index(&self, band: Band) -> Option<usize> {
        self.bands.iter().position(|&b| b == band)
    }

    fn plane_offset(&self, t: usize, b: usize) -> usize {
        (t * self.bands.len() + b) * self.plane_len()
    }

    pub fn plane(&self, t: usize, b: usize) -> &[u16] {
        let o = self.plane_offset(t, b);
        &self.pixels[o..o + self.plane_len()]
    }

    pub fn plane_mut(&mut self, t: usize, b: usize) -> &mut [u16] {
        let o = self.plane_offset(t, b);
        let n = self.plane_len();
        &mut self.pixels[o..o + n]
    }

    pub fn get(&self, t: usize, b: usize, row: usize, col: usize) -> u16 {
        self.pixels[self.plane_offset(t, b) + row * self.width + col]
    }

    pub fn set(&mut self, t: usize, b: usize, row: usize, col: usize, v: u16) {
        let o = self.plane_offset(t, b) + row * self.width + col;
        self.pixels[o] = v;
    }

    pub fn validate(&self) -> Result<()> {
        self.georef.validate()?;
        let expected = self.times.len() * self.bands.len() * self.plane_len();
        if self.pixels.len() != expected {
            return Err(Error::Invariant(format!(
                "pixel buffer holds {} values, shape requires {expected}",
                self.pixels.len()
            )));
        }
        for (i, b) in self.bands.iter().enumerate() {
            if self.bands[..i].contains(b) {
                return Err(Error::Invariant(format!("duplicate band {b}")));
            }
        }
        if self.times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invariant("time axis must be strictly increasing".into()));
        }
        let dates = self.times.iter().filter(|t| matches!(t, TimeKey::Date(_))).count();
        if dates != 0 && dates != self.times.len() {
            return Err(Error::Invariant("time axis mixes dates and week indices".into()));
        }
        if let Some(scl) = self.band_index(Band::Scl) {
            for t in 0..self.times.len() {
                if let Some(v) = self.plane(t, scl).iter().find(|&&v| v > 11) {
                    return Err(Error::Invariant(format!("SCL code {v} outside 0..11")));
                }
            }
        }
        Ok(())
    }

    /// Serializes to the `BSTK1` byte layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let header = Header {
            width: self.width,
            height: self.height,
            bands: self.bands.iter().map(|b| b.name().to_string()).collect(),
            times: self.times.iter().map(|t| t.to_json()).collect(),
            dtype: "u16".into(),
            nodata: self.nodata,
            transform: self.georef.transform,
            crs: self.georef.crs.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(10 + json.len() + self.pixels.len() * 2);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for v in &self.pixels {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 10 || &bytes[..6] != MAGIC {
            return Err(Error::Format("missing BSTK1 magic".into()));
        }
        let len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let body = &bytes[10..];
        if body.len() < len {
            return Err(Error::Truncation {
                expected: len,
                found: body.len(),
            });
        }
        let header: Header = serde_json::from_slice(&body[..len])
            .map_err(|e| Error::Format(format!("bad header: {e}")))?;
        if header.dtype != "u16" {
            return Err(Error::Schema(format!("unsupported dtype {:?}", header.dtype)));
        }
        let bands = header
            .bands
            .iter()
            .map(|s| s.parse())
            .collect::<Result<Vec<Band>>>()?;
        let times = header
            .times
            .iter()
            .map(TimeKey::from_json)
            .collect::<Result<Vec<_>>>()?;
        let payload = &body[len..];
        let expected = times
            .len()
            .checked_mul(bands.len())
            .and_then(|v| v.checked_mul(header.height))
            .and_then(|v| v.checked_mul(header.width))
            .and_then(|v| v.checked_mul(2))
            .ok_or_else(|| Error::Schema("header dimensions overflow".into()))?;
        if payload.len() != expected {
            return Err(Error::Truncation {
                expected,
                found: payload.len(),
            });
        }
        let pixels = payload
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        let stack = BandStack {
            georef: GeoRef {
                transform: header.transform,
                crs: header.crs,
            },
            bands,
            times,
            width: header.width,
            height: header.height,
            pixels,
            nodata: header.nodata,
        };
        stack.validate()?;
        Ok(stack)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    width: usize,
    height: usize,
    bands: Vec<String>,
    times: Vec<Value>,
    dtype: String,
    nodata: u16,
    transform: [f64; 6],
    crs: String,
}

pub fn read_bandstack(path: impl AsRef<Path>) -> Result<BandStack> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    BandStack::from_bytes(&bytes)
}

/// Writes `stack` in `BSTK1` layout. Invariants are checked before the file
/// is created.
pub fn write_bandstack(stack: &BandStack, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = stack.to_bytes()?;
    write_file(path, &bytes)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Label polygons

pub type Ring = Vec<[f64; 2]>;

/// Class code for cropland pixels.
pub const CROPLAND: u8 = 1;
/// Class code for non-cropland pixels.
pub const NON_CROPLAND: u8 = 0;
/// Grid value for pixels not covered by any polygon.
pub const UNLABELED: u8 = u8::MAX;

/// A class-annotated polygon or multipolygon.
///
/// `parts[i][0]` is the exterior ring of the i-th polygon, further rings are
/// holes. Rings are stored closed (first vertex repeated at the end).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPolygon {
    pub id: String,
    pub parts: Vec<Vec<Ring>>,
    pub cls: u8,
}

impl LabeledPolygon {
    /// Single-ring polygon from an open or closed vertex list.
    pub fn simple(id: impl Into<String>, mut ring: Ring, cls: u8) -> Self {
        if ring.first() != ring.last() {
            ring.push(ring[0]);
        }
        LabeledPolygon {
            id: id.into(),
            parts: vec![vec![ring]],
            cls,
        }
    }

    /// Axis-aligned rectangle.
    pub fn rect(id: impl Into<String>, min_x: f64, min_y: f64, max_x: f64, max_y: f64, cls: u8) -> Self {
        Self::simple(
            id,
            vec![[min_x, min_y], [max_x, min_y], [max_x, max_y], [min_x, max_y]],
            cls,
        )
    }

    pub fn rings(&self) -> impl Iterator<Item = &Ring> {
        self.parts.iter().flatten()
    }

    pub fn bbox(&self) -> Extent {
        let mut e = Extent::empty();
        for p in self.rings().flatten() {
            e.include(p[0], p[1]);
        }
        e
    }

    /// Even-odd point-in-polygon test over every ring.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let mut inside = false;
        for ring in self.rings() {
            for w in ring.windows(2) {
                let (a, b) = (w[0], w[1]);
                if (a[1] > y) != (b[1] > y) && x < edge_crossing_x(a, b, y) {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// Area-weighted centroid. Holes subtract from their exterior.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut area, mut cx, mut cy) = (0.0, 0.0, 0.0);
        for part in &self.parts {
            for (i, ring) in part.iter().enumerate() {
                let (a, x, y) = ring_moments(ring);
                // orient so exteriors count positive and holes negative
                let sign = if (a >= 0.0) == (i == 0) { 1.0 } else { -1.0 };
                area += sign * a;
                cx += sign * x;
                cy += sign * y;
            }
        }
        if area.abs() < f64::EPSILON * 16.0 {
            return None;
        }
        Some((cx / (3.0 * area), cy / (3.0 * area)))
    }

    fn validate(&self) -> Result<()> {
        if self.cls > 1 {
            return Err(Error::Schema(format!("polygon {}: class {} not in {{0,1}}", self.id, self.cls)));
        }
        if self.parts.is_empty() {
            return Err(Error::Geometry(format!("polygon {} has no rings", self.id)));
        }
        for ring in self.rings() {
            if ring.len() < 4 {
                return Err(Error::Geometry(format!(
                    "polygon {}: ring needs at least 3 distinct vertices",
                    self.id
                )));
            }
            if ring.first() != ring.last() {
                return Err(Error::Geometry(format!("polygon {}: ring is not closed", self.id)));
            }
        }
        Ok(())
    }
}

/// x where segment `a-b` crosses the horizontal line at `y`.
#[inline]
fn edge_crossing_x(a: [f64; 2], b: [f64; 2], y: f64) -> f64 {
    (b[0] - a[0]) * (y - a[1]) / (b[1] - a[1]) + a[0]
}

/// Signed doubled area and first moments (times 6 relative to centroid form).
fn ring_moments(ring: &Ring) -> (f64, f64, f64) {
    let (mut a2, mut mx, mut my) = (0.0, 0.0, 0.0);
    for w in ring.windows(2) {
        let cross = w[0][0] * w[1][1] - w[1][0] * w[0][1];
        a2 += cross;
        mx += (w[0][0] + w[1][0]) * cross;
        my += (w[0][1] + w[1][1]) * cross;
    }
    // area = a2/2, centroid = m / (6 * area) = m / (3 * a2)
    (a2, mx, my)
}

/// Parses the GeoJSON FeatureCollection subset used for label files.
pub fn parse_label_polygons(text: &str) -> Result<Vec<LabeledPolygon>> {
    let doc: Value = serde_json::from_str(text).map_err(|e| Error::Format(format!("label file: {e}")))?;
    let features = doc
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Schema("expected a FeatureCollection with a features array".into()))?;
    let mut out = Vec::with_capacity(features.len());
    for (i, f) in features.iter().enumerate() {
        let props = f.get("properties").unwrap_or(&Value::Null);
        let id = match props.get("id") {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            None | Some(Value::Null) => format!("feature-{i}"),
            Some(other) => return Err(Error::Schema(format!("feature {i}: bad id {other}"))),
        };
        let cls = match props.get("class") {
            None | Some(Value::Null) => {
                return Err(Error::Schema(format!("feature {id}: missing \"class\" property")))
            }
            Some(v) => match v.as_u64() {
                Some(c @ 0..=1) => c as u8,
                _ => return Err(Error::Schema(format!("feature {id}: class {v} not in {{0,1}}"))),
            },
        };
        let geom = f
            .get("geometry")
            .ok_or_else(|| Error::Schema(format!("feature {id}: missing geometry")))?;
        let coords = geom
            .get("coordinates")
            .ok_or_else(|| Error::Schema(format!("feature {id}: missing coordinates")))?;
        let parts = match geom.get("type").and_then(Value::as_str) {
            Some("Polygon") => vec![parse_polygon(coords, &id)?],
            Some("MultiPolygon") => coords
                .as_array()
                .ok_or_else(|| Error::Schema(format!("feature {id}: bad MultiPolygon")))?
                .iter()
                .map(|p| parse_polygon(p, &id))
                .collect::<Result<_>>()?,
            other => {
                return Err(Error::Schema(format!("feature {id}: unsupported geometry type {other:?}")))
            }
        };
        let poly = LabeledPolygon { id, parts, cls };
        poly.validate()?;
        out.push(poly);
    }
    Ok(out)
}

fn parse_polygon(v: &Value, id: &str) -> Result<Vec<Ring>> {
    let bad = || Error::Schema(format!("feature {id}: malformed coordinates"));
    v.as_array()
        .ok_or_else(bad)?
        .iter()
        .map(|ring| {
            ring.as_array()
                .ok_or_else(bad)?
                .iter()
                .map(|p| match p.as_array().map(Vec::as_slice) {
                    Some([x, y, ..]) => Ok([x.as_f64().ok_or_else(bad)?, y.as_f64().ok_or_else(bad)?]),
                    _ => Err(bad()),
                })
                .collect()
        })
        .collect()
}

/// Serializes polygons back into the label-file format.
pub fn label_polygons_to_geojson(polys: &[LabeledPolygon]) -> String {
    let features: Vec<Value> = polys
        .iter()
        .map(|p| {
            let geometry = if p.parts.len() == 1 {
                serde_json::json!({"type": "Polygon", "coordinates": p.parts[0]})
            } else {
                serde_json::json!({"type": "MultiPolygon", "coordinates": p.parts})
            };
            serde_json::json!({
                "type": "Feature",
                "properties": {"id": p.id, "class": p.cls},
                "geometry": geometry,
            })
        })
        .collect();
    serde_json::to_string_pretty(&serde_json::json!({"type": "FeatureCollection", "features": features}))
        .expect("label json")
}

/// Per-pixel class labels and the polygon each labeled pixel came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRaster {
    pub georef: GeoRef,
    pub width: usize,
    pub height: usize,
    /// `CROPLAND`, `NON_CROPLAND` or `UNLABELED`, row-major.
    pub values: Vec<u8>,
    /// Index into `polygon_ids` for labeled pixels.
    pub polygon: Vec<Option<u32>>,
    pub polygon_ids: Vec<String>,
}

impl LabelRaster {
    pub fn label(&self, row: usize, col: usize) -> Option<u8> {
        match self.values[row * self.width + col] {
            UNLABELED => None,
            v => Some(v),
        }
    }

    pub fn polygon_at(&self, row: usize, col: usize) -> Option<&str> {
        self.polygon[row * self.width + col].map(|i| self.polygon_ids[i as usize].as_str())
    }

    /// `[non-cropland, cropland]` pixel counts.
    pub fn class_counts(&self) -> [usize; 2] {
        let mut c = [0usize; 2];
        for &v in &self.values {
            if v != UNLABELED {
                c[v as usize] += 1;
            }
        }
        c
    }

    pub fn labeled_count(&self) -> usize {
        self.values.iter().filter(|&&v| v != UNLABELED).count()
    }

    /// Labeled pixels in row-major order as `(row, col, class)`.
    pub fn labeled_pixels(&self) -> Vec<(usize, usize, u8)> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != UNLABELED)
            .map(|(i, &v)| (i / self.width, i % self.width, v))
            .collect()
    }
}

/// Labels every pixel whose center falls inside a polygon (even-odd rule).
pub fn rasterize_labels(
    polys: &[LabeledPolygon],
    georef: &GeoRef,
    height: usize,
    width: usize,
) -> Result<LabelRaster> {
    georef.validate()?;
    let mut values = vec![UNLABELED; height * width];
    let mut polygon: Vec<Option<u32>> = vec![None; height * width];
    for (pi, poly) in polys.iter().enumerate() {
        poly.validate()?;
        for (row, col) in covered_pixels(poly, georef, height, width) {
            let idx = row * width + col;
            match polygon[idx] {
                None => {
                    values[idx] = poly.cls;
                    polygon[idx] = Some(pi as u32);
                }
                Some(prev) if polys[prev as usize].cls != poly.cls => {
                    return Err(Error::Conflict {
                        row,
                        col,
                        first: polys[prev as usize].id.clone(),
                        second: poly.id.clone(),
                    });
                }
                Some(_) => {}
            }
        }
    }
    Ok(LabelRaster {
        georef: georef.clone(),
        width,
        height,
        values,
        polygon,
        polygon_ids: polys.iter().map(|p| p.id.clone()).collect(),
    })
}

/// Pixels of an `height x width` grid whose centers lie inside `poly`.
fn covered_pixels(poly: &LabeledPolygon, georef: &GeoRef, height: usize, width: usize) -> Vec<(usize, usize)> {
    let bb = poly.bbox();
    let mut rmin = f64::INFINITY;
    let mut rmax = f64::NEG_INFINITY;
    let mut cmin = f64::INFINITY;
    let mut cmax = f64::NEG_INFINITY;
    for (x, y) in [
        (bb.min_x, bb.min_y),
        (bb.min_x, bb.max_y),
        (bb.max_x, bb.min_y),
        (bb.max_x, bb.max_y),
    ] {
        let (r, c) = georef.to_pixel(x, y);
        rmin = rmin.min(r);
        rmax = rmax.max(r);
        cmin = cmin.min(c);
        cmax = cmax.max(c);
    }
    let clamp = |v: f64, hi: usize| -> usize { v.max(0.0).min(hi as f64) as usize };
    let (r0, r1) = (clamp(rmin.floor() - 1.0, height), clamp(rmax.ceil() + 1.0, height));
    let (c0, c1) = (clamp(cmin.floor() - 1.0, width), clamp(cmax.ceil() + 1.0, width));
    let mut out = Vec::new();
    if !georef.is_axis_aligned() {
        for r in r0..r1 {
            for c in c0..c1 {
                let (x, y) = georef.pixel_center(r, c);
                if poly.contains(x, y) {
                    out.push((r, c));
                }
            }
        }
        return out;
    }
    // Scanline: all pixel centers of a row share one y.
    let mut xs: Vec<f64> = Vec::new();
    for r in r0..r1 {
        let (_, y) = georef.pixel_center(r, 0);
        xs.clear();
        for ring in poly.rings() {
            for w in ring.windows(2) {
                if (w[0][1] > y) != (w[1][1] > y) {
                    xs.push(edge_crossing_x(w[0], w[1], y));
                }
            }
        }
        if xs.is_empty() {
            continue;
        }
        xs.sort_by(f64::total_cmp);
        for c in c0..c1 {
            let (x, _) = georef.pixel_center(r, c);
            // inside iff an odd number of crossings lie strictly to the right
            let right = xs.len() - xs.partition_point(|&v| v <= x);
            if right % 2 == 1 {
                out.push((r, c));
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Masks

/// Mask value for pixels without a prediction.
pub const MASK_NODATA: u8 = u8::MAX;

/// Binary raster over `{0, 1, MASK_NODATA}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub georef: GeoRef,
    pub width: usize,
    pub height: usize,
    pub values: Vec<u8>,
}

impl Mask {
    fn validate(&self) -> Result<()> {
        if self.values.len() != self.width * self.height {
            return Err(Error::Invariant(format!(
                "mask has {} values for a {}x{} grid",
                self.values.len(),
                self.height,
                self.width
            )));
        }
        if let Some(v) = self.values.iter().find(|&&v| v > 1 && v != MASK_NODATA) {
            return Err(Error::Invariant(format!("mask value {v} not in {{0,1,NODATA}}")));
        }
        Ok(())
    }

    /// PGM (P5) bytes: 0 -> 0, 1 -> 255, NODATA -> 128.
    pub fn to_pgm(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.values.iter().map(|&v| match v {
            0 => 0u8,
            1 => 255,
            _ => 128,
        }));
        Ok(out)
    }

    /// Single-band `MASK` stack; class `c` is stored as `c + 1` so that 0
    /// stays the nodata sentinel.
    pub fn to_bandstack(&self) -> Result<BandStack> {
        self.validate()?;
        let mut s = BandStack::new(
            self.georef.clone(),
            vec![Band::Mask],
            vec![TimeKey::Week(0)],
            self.height,
            self.width,
        );
        for (dst, &v) in s.pixels.iter_mut().zip(&self.values) {
            *dst = if v == MASK_NODATA { NODATA } else { v as u16 + 1 };
        }
        Ok(s)
    }

    pub fn from_bandstack(stack: &BandStack) -> Result<Mask> {
        let b = stack
            .band_index(Band::Mask)
            .ok_or_else(|| Error::Schema("stack has no MASK band".into()))?;
        if stack.times.is_empty() {
            return Err(Error::Schema("mask stack has an empty time axis".into()));
        }
        let values = stack
            .plane(0, b)
            .iter()
            .map(|&v| match v {
                NODATA => Ok(MASK_NODATA),
                1 | 2 => Ok(v as u8 - 1),
                other => Err(Error::Schema(format!("mask code {other} not in {{0,1,2}}"))),
            })
            .collect::<Result<_>>()?;
        Ok(Mask {
            georef: stack.georef.clone(),
            width: stack.width,
            height: stack.height,
            values,
        })
    }
}

/// Writes `path` as PGM plus a `<stem>.georef.json` sidecar next to it.
pub fn write_mask(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let pgm = mask.to_pgm()?;
    write_file(path, &pgm)?;
    let sidecar = georef_sidecar_path(path);
    let json = serde_json::to_vec_pretty(&mask.georef).map_err(|e| Error::Format(e.to_string()))?;
    write_file(&sidecar, &json)
}

/// `<dir>/<stem>.georef.json` for a mask path `<dir>/<stem>.pgm`.
pub fn georef_sidecar_path(path: &Path) -> std::path::PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.georef.json"))
}

/// Reads a mask written by [`write_mask`].
pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let sidecar = georef_sidecar_path(path);
    let gj = fs::read(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let georef: GeoRef = serde_json::from_slice(&gj).map_err(|e| Error::Format(e.to_string()))?;
    let (width, height, data) = parse_pgm(&bytes)?;
    let values = data
        .iter()
        .map(|&v| match v {
            0 => Ok(0),
            255 => Ok(1),
            128 => Ok(MASK_NODATA),
            o => Err(Error::Format(format!("unexpected mask byte {o}"))),
        })
        .collect::<Result<_>>()?;
    Ok(Mask {
        georef,
        width,
        height,
        values,
    })
}

fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, &[u8])> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|e| Error::Format(e.to_string()))?);
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(Error::Format("expected P5 PGM with maxval 255".into()));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|e| Error::Format(e.to_string()));
    let (w, h) = (parse(fields[1])?, parse(fields[2])?);
    let data = &bytes[pos + 1..];
    if data.len() != w * h {
        return Err(Error::Truncation {
            expected: w * h,
            found: data.len(),
        });
    }
    Ok((w, h, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn georef() -> GeoRef {
        GeoRef::north_up(0.0, 100.0, 10.0, "EPSG:32643")
    }

    fn tiny(value: u16) -> BandStack {
        let mut s = BandStack::new(georef(), vec![Band::B08], vec![TimeKey::Week(0)], 1, 1);
        s.pixels[0] = value;
        s
    }

    #[test]
    fn minimal_stack_reads_back() {
        let bytes = tiny(5000).to_bytes().unwrap();
        let s = BandStack::from_bytes(&bytes).unwrap();
        assert_eq!(s.pixels, vec![5000]);
        assert_eq!((s.height, s.width), (1, 1));
    }

    #[test]
    fn header_layout_is_fixed() {
        let bytes = tiny(1).to_bytes().unwrap();
        assert_eq!(&bytes[..6], b"BSTK1\n");
        let len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[10..10 + len]).unwrap();
        assert!(header.starts_with(r#"{"width":1,"height":1,"bands":["B08"],"times":[0],"dtype":"u16","nodata":0,"transform":["#));
        assert!(header.ends_with(r#""crs":"EPSG:32643"}"#));
        assert_eq!(&bytes[10 + len..], &[1, 0]);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut bytes = tiny(1).to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(BandStack::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn short_payload_is_truncation() {
        let mut bytes = tiny(1).to_bytes().unwrap();
        bytes.pop();
        assert!(matches!(BandStack::from_bytes(&bytes), Err(Error::Truncation { .. })));
    }

    #[test]
    fn unknown_band_is_schema_error() {
        let mut bytes = tiny(1).to_bytes().unwrap();
        let at = bytes.windows(5).position(|w| w == b"\"B08\"").unwrap();
        bytes[at + 2..at + 4].copy_from_slice(b"11");
        assert!(matches!(BandStack::from_bytes(&bytes), Err(Error::Schema(_))));
    }

    #[test]
    fn mismatched_shape_rejected_before_writing() {
        let mut s = tiny(1);
        s.pixels.push(3);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.bstk");
        assert!(matches!(write_bandstack(&s, &p), Err(Error::Invariant(_))));
        assert!(!p.exists());
    }

    #[test]
    fn dates_round_trip() {
        let d = |m, day| TimeKey::Date(NaiveDate::from_ymd_opt(2020, m, day).unwrap());
        let mut s = BandStack::new(georef(), vec![Band::B02, Band::Scl], vec![d(1, 2), d(1, 7)], 2, 3);
        for (i, v) in s.pixels.iter_mut().enumerate() {
            *v = (i % 12) as u16;
        }
        let back = BandStack::from_bytes(&s.to_bytes().unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn scl_out_of_range_rejected() {
        let mut s = BandStack::new(georef(), vec![Band::Scl], vec![TimeKey::Week(0)], 1, 1);
        s.pixels[0] = 12;
        assert!(s.validate().is_err());
    }

    const SQUARE: &str = r#"{"type":"FeatureCollection","features":[
        {"type":"Feature","properties":{"id":"a","class":1},
         "geometry":{"type":"Polygon","coordinates":[[[0,70],[30,70],[30,100],[0,100],[0,70]]]}}]}"#;

    #[test]
    fn parses_square() {
        let p = parse_label_polygons(SQUARE).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].cls, 1);
        assert_eq!(p[0].id, "a");
    }

    #[test]
    fn parses_multipolygon_as_one_unit() {
        let text = r#"{"type":"FeatureCollection","features":[{"type":"Feature","properties":{"id":"m","class":0},
          "geometry":{"type":"MultiPolygon","coordinates":[
            [[[0,0],[1,0],[1,1],[0,1],[0,0]]],
            [[[5,5],[6,5],[6,6],[5,6],[5,5]]]]}}]}"#;
        let p = parse_label_polygons(text).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].parts.len(), 2);
    }

    #[test]
    fn missing_or_bad_class_is_schema_error() {
        let missing = SQUARE.replace(r#","class":1"#, "");
        assert!(matches!(parse_label_polygons(&missing), Err(Error::Schema(_))));
        let bad = SQUARE.replace(r#""class":1"#, r#""class":2"#);
        assert!(matches!(parse_label_polygons(&bad), Err(Error::Schema(_))));
    }

    #[test]
    fn unclosed_ring_is_geometry_error() {
        let open = SQUARE.replace(",[0,70]]]", "]]");
        assert!(matches!(parse_label_polygons(&open), Err(Error::Geometry(_))));
    }

    #[test]
    fn square_covers_three_by_three() {
        let polys = parse_label_polygons(SQUARE).unwrap();
        let lr = rasterize_labels(&polys, &georef(), 10, 10).unwrap();
        assert_eq!(lr.class_counts(), [0, 9]);
        for r in 0..3 {
            for c in 0..3 {
                assert_eq!(lr.label(r, c), Some(1));
                assert_eq!(lr.polygon_at(r, c), Some("a"));
            }
        }
    }

    #[test]
    fn outside_polygon_labels_nothing() {
        let p = LabeledPolygon::rect("far", 1000.0, 1000.0, 1100.0, 1100.0, 0);
        let lr = rasterize_labels(&[p], &georef(), 10, 10).unwrap();
        assert_eq!(lr.labeled_count(), 0);
    }

    #[test]
    fn overlapping_classes_conflict() {
        let a = LabeledPolygon::rect("a", 0.0, 70.0, 30.0, 100.0, 1);
        let b = LabeledPolygon::rect("b", 20.0, 50.0, 50.0, 80.0, 0);
        match rasterize_labels(&[a, b], &georef(), 10, 10) {
            Err(Error::Conflict { row, col, first, second }) => {
                assert_eq!((row, col), (2, 2));
                assert_eq!((first.as_str(), second.as_str()), ("a", "b"));
            }
            other => panic!("expected conflict, got {other:?}"),
        }
    }

    #[test]
    fn rotated_grid_uses_point_test() {
        let g = GeoRef {
            transform: [0.0, 7.0, 7.0, 0.0, 7.0, -7.0],
            crs: "local".into(),
        };
        let p = LabeledPolygon::rect("a", -20.0, -60.0, 80.0, 40.0, 1);
        let lr = rasterize_labels(std::slice::from_ref(&p), &g, 8, 8).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                let (x, y) = g.pixel_center(r, c);
                assert_eq!(lr.label(r, c).is_some(), p.contains(x, y));
            }
        }
    }

    #[test]
    fn centroid_of_square_with_hole() {
        let mut p = LabeledPolygon::rect("h", 0.0, 0.0, 4.0, 4.0, 1);
        // hole in the right half shifts the centroid left
        p.parts[0].push(vec![[2.0, 0.0], [4.0, 0.0], [4.0, 4.0], [2.0, 4.0], [2.0, 0.0]]);
        let (cx, cy) = p.centroid().unwrap();
        assert!((cx - 1.0).abs() < 1e-12 && (cy - 2.0).abs() < 1e-12);
    }

    #[test]
    fn mask_encodings() {
        let m = Mask {
            georef: georef(),
            width: 2,
            height: 2,
            values: vec![1; 4],
        };
        let pgm = m.to_pgm().unwrap();
        assert_eq!(&pgm[pgm.len() - 4..], &[255; 4]);
        let nd = Mask {
            values: vec![MASK_NODATA; 4],
            ..m.clone()
        };
        let pgm = nd.to_pgm().unwrap();
        assert_eq!(&pgm[pgm.len() - 4..], &[128; 4]);
        let mixed = Mask {
            values: vec![0, 1, MASK_NODATA, 1],
            ..m
        };
        let back = Mask::from_bandstack(&mixed.to_bandstack().unwrap()).unwrap();
        assert_eq!(back, mixed);
    }

    #[test]
    fn mask_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("map.pgm");
        let m = Mask {
            georef: georef(),
            width: 3,
            height: 1,
            values: vec![0, MASK_NODATA, 1],
        };
        write_mask(&m, &p).unwrap();
        assert!(dir.path().join("map.georef.json").exists());
        assert_eq!(read_mask(&p).unwrap(), m);
    }
}
