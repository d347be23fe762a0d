//! Georeferenced rasters and chip extraction.
//!
//! A chip is a `width_px × width_px × bands` window centred on a lon/lat
//! point. Points are matched against a pool of rasters in order; the first
//! raster containing the whole window wins.

pub mod flat;
pub mod tiff;

use std::collections::{HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::recordstore::{RecordError, RecordWriter};
use crate::tensor::ImageTensor;

pub use flat::write_flat_raster;
pub use tiff::GeoTiffWriter;

#[derive(Debug, Error)]
pub enum GeoError {
    #[error("unsupported raster: {0}")]
    UnsupportedFormat(String),
    #[error("missing geo tag {0}")]
    MissingGeoTags(&'static str),
    #[error("corrupt raster: {0}")]
    CorruptFile(String),
    #[error("point for {key:?} maps to pixel ({row}, {col}), outside the raster")]
    PointOutsideRaster { key: String, row: i64, col: i64 },
    #[error("window for {key:?} extends past the raster edge (use a pad value to fill)")]
    WindowClipped { key: String },
    #[error("band {band} requested but raster has {band_count} bands")]
    InvalidBand { band: usize, band_count: usize },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("duplicate chip key {0:?}")]
    DuplicateKey(String),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleType {
    U8,
    U16,
    F32,
}

impl SampleType {
    pub fn bytes(self) -> usize {
        match self {
            SampleType::U8 => 1,
            SampleType::U16 => 2,
            SampleType::F32 => 4,
        }
    }

    fn decode(self, b: &[u8]) -> f32 {
        match self {
            SampleType::U8 => b[0] as f32,
            SampleType::U16 => u16::from_le_bytes([b[0], b[1]]) as f32,
            SampleType::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]),
        }
    }
}

/// North-up affine transform; rows run south.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform {
    pub origin_x: f64,
    pub origin_y: f64,
    pub pixel_size_x: f64,
    pub pixel_size_y: f64,
}

impl GeoTransform {
    pub fn new(origin_x: f64, origin_y: f64, pixel_size_x: f64, pixel_size_y: f64) -> Result<Self, GeoError> {
        let ok = pixel_size_x.is_finite() && pixel_size_y.is_finite() && pixel_size_x > 0.0 && pixel_size_y > 0.0;
        if !ok || !origin_x.is_finite() || !origin_y.is_finite() {
            return Err(GeoError::CorruptFile(format!("invalid transform origin ({origin_x}, {origin_y}) pixel ({pixel_size_x}, {pixel_size_y})")));
        }
        Ok(Self { origin_x, origin_y, pixel_size_x, pixel_size_y })
    }
}

/// `(row, col)` containing the point. May be negative or past the edge.
pub fn world_to_pixel(geo: &GeoTransform, lon: f64, lat: f64) -> (i64, i64) {
    let col = ((lon - geo.origin_x) / geo.pixel_size_x).floor() as i64;
    let row = ((geo.origin_y - lat) / geo.pixel_size_y).floor() as i64;
    (row, col)
}

/// World coordinates `(lon, lat)` of the centre of pixel `(row, col)`.
pub fn pixel_to_world(geo: &GeoTransform, row: i64, col: i64) -> (f64, f64) {
    let lon = geo.origin_x + (col as f64 + 0.5) * geo.pixel_size_x;
    let lat = geo.origin_y - (row as f64 + 0.5) * geo.pixel_size_y;
    (lon, lat)
}

#[derive(Debug, Clone)]
enum Storage {
    Flat(Arc<Vec<f32>>),
    Tiff(tiff::TiffLayout),
}

#[derive(Debug, Clone)]
pub struct RasterHandle {
    pub path: PathBuf,
    pub width: usize,
    pub height: usize,
    pub band_count: usize,
    pub sample_type: SampleType,
    pub geo: GeoTransform,
    storage: Storage,
}

/// Opens a GeoTIFF (see [`tiff`] for the supported subset) or a FlatRaster.
/// TIFF pixel data is read lazily per window.
pub fn parse_raster(path: impl AsRef<Path>) -> Result<RasterHandle, GeoError> {
    let path = path.as_ref();
    let mut head = [0u8; 16];
    let n = File::open(path)?.read(&mut head)?;
    if flat::is_flat(&head[..n]) {
        let p = flat::parse(path)?;
        return Ok(RasterHandle {
            path: path.to_path_buf(),
            width: p.width,
            height: p.height,
            band_count: p.bands,
            sample_type: SampleType::F32,
            geo: p.geo,
            storage: Storage::Flat(Arc::new(p.data)),
        });
    }
    let p = tiff::parse(path)?;
    Ok(RasterHandle {
        path: path.to_path_buf(),
        width: p.width,
        height: p.height,
        band_count: p.bands,
        sample_type: p.sample_type,
        geo: p.geo,
        storage: Storage::Tiff(p.layout),
    })
}

impl RasterHandle {
    pub fn contains_pixel(&self, row: i64, col: i64) -> bool {
        row >= 0 && col >= 0 && (row as usize) < self.height && (col as usize) < self.width
    }

    /// Reads an `h × w` window with top-left `(row0, col0)` for the given
    /// zero-based bands, as an `H × W × B` tensor. Out-of-raster pixels take
    /// `pad`; without a pad value any overhang is an error.
    pub fn read_window(&self, row0: i64, col0: i64, h: usize, w: usize, bands: &[usize], pad: Option<f32>) -> Result<ImageTensor, GeoError> {
        if h == 0 || w == 0 || bands.is_empty() {
            return Err(GeoError::InvalidRequest("empty window".into()));
        }
        if let Some(&band) = bands.iter().find(|&&b| b >= self.band_count) {
            return Err(GeoError::InvalidBand { band: band + 1, band_count: self.band_count });
        }
        let inside = self.contains_pixel(row0, col0) && self.contains_pixel(row0 + h as i64 - 1, col0 + w as i64 - 1);
        if !inside && pad.is_none() {
            return Err(GeoError::WindowClipped { key: String::new() });
        }
        let fill = pad.unwrap_or(0.0);
        let nb = bands.len();
        let mut data = vec![fill; h * w * nb];
        match &self.storage {
            Storage::Flat(px) => {
                for r in 0..h {
                    for c in 0..w {
                        let (rr, cc) = (row0 + r as i64, col0 + c as i64);
                        if !self.contains_pixel(rr, cc) {
                            continue;
                        }
                        for (k, &b) in bands.iter().enumerate() {
                            data[(r * w + c) * nb + k] = px[(b * self.height + rr as usize) * self.width + cc as usize];
                        }
                    }
                }
            }
            Storage::Tiff(layout) => {
                let mut file = File::open(&self.path)?;
                let sb = self.sample_type.bytes();
                let mut cache: HashMap<usize, Vec<u8>> = HashMap::new();
                for r in 0..h {
                    for c in 0..w {
                        let (rr, cc) = (row0 + r as i64, col0 + c as i64);
                        if !self.contains_pixel(rr, cc) {
                            continue;
                        }
                        for (k, &b) in bands.iter().enumerate() {
                            let (chunk, idx) = layout.locate(self.width, self.height, rr as usize, cc as usize, b);
                            if let std::collections::hash_map::Entry::Vacant(e) = cache.entry(chunk) {
                                e.insert(layout.read_chunk(&mut file, chunk, sb)?);
                            }
                            let bytes = &cache[&chunk];
                            let at = idx * sb;
                            if at + sb > bytes.len() {
                                return Err(GeoError::CorruptFile(format!("chunk {chunk} is shorter than its declared extent")));
                            }
                            data[(r * w + c) * nb + k] = self.sample_type.decode(&bytes[at..at + sb]);
                        }
                    }
                }
            }
        }
        Ok(ImageTensor::new(vec![h, w, nb], data).expect("window dims match data"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum BandSelection {
    #[default]
    All,
    /// One-based band numbers.
    List(Vec<usize>),
}

impl BandSelection {
    /// Zero-based indices into a raster with `band_count` bands.
    pub fn resolve(&self, band_count: usize) -> Result<Vec<usize>, GeoError> {
        match self {
            BandSelection::All => Ok((0..band_count).collect()),
            BandSelection::List(v) if v.is_empty() => Err(GeoError::InvalidRequest("empty band list".into())),
            BandSelection::List(v) => v
                .iter()
                .map(|&b| if b >= 1 && b <= band_count { Ok(b - 1) } else { Err(GeoError::InvalidBand { band: b, band_count }) })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChipRequest {
    pub key: String,
    pub lon: f64,
    pub lat: f64,
    pub width_px: usize,
    pub bands: BandSelection,
}

impl ChipRequest {
    pub fn new(key: impl Into<String>, lon: f64, lat: f64, width_px: usize) -> Self {
        Self { key: key.into(), lon, lat, width_px, bands: BandSelection::All }
    }
}

/// Cuts the chip for `req`. The window's top-left is the centre pixel minus
/// `width_px / 2` in both axes.
pub fn extract_chip(raster: &RasterHandle, req: &ChipRequest, pad: Option<f32>) -> Result<ImageTensor, GeoError> {
    if req.width_px == 0 {
        return Err(GeoError::InvalidRequest(format!("{:?}: width must be at least 1", req.key)));
    }
    let (row, col) = world_to_pixel(&raster.geo, req.lon, req.lat);
    if !raster.contains_pixel(row, col) {
        return Err(GeoError::PointOutsideRaster { key: req.key.clone(), row, col });
    }
    let half = (req.width_px / 2) as i64;
    let bands = req.bands.resolve(raster.band_count)?;
    raster.read_window(row - half, col - half, req.width_px, req.width_px, &bands, pad).map_err(|e| match e {
        GeoError::WindowClipped { .. } => GeoError::WindowClipped { key: req.key.clone() },
        e => e,
    })
}

pub fn chip_file_name(key: &str, band: usize) -> String {
    format!("Key{key}_BAND{band}.csv")
}

/// Writes one CSV per band (`band` numbers are one-based in the file name).
pub fn write_chip_csv(dir: &Path, key: &str, chip: &ImageTensor, band_numbers: &[usize]) -> Result<Vec<PathBuf>, GeoError> {
    let [h, w, nb] = chip.dims() else {
        return Err(GeoError::InvalidRequest(format!("chip {key:?} is not an H × W × B image")));
    };
    let (h, w, nb) = (*h, *w, *nb);
    assert_eq!(band_numbers.len(), nb, "one band number per chip band");
    let header: Vec<String> = (1..=w).map(|j| format!("c{j}")).collect();
    let mut paths = Vec::with_capacity(nb);
    for (k, &band) in band_numbers.iter().enumerate() {
        let path = dir.join(chip_file_name(key, band));
        let mut out = BufWriter::new(File::create(&path)?);
        writeln!(out, "{}", header.join(","))?;
        for r in 0..h {
            for c in 0..w {
                if c > 0 {
                    out.write_all(b",")?;
                }
                write!(out, "{}", chip.pixel(r, c, k))?;
            }
            out.write_all(b"\n")?;
        }
        out.flush()?;
        paths.push(path);
    }
    Ok(paths)
}

fn read_band_csv(path: &Path) -> Result<(usize, usize, Vec<f32>), GeoError> {
    let bad = |m: String| GeoError::CorruptFile(format!("{}: {m}", path.display()));
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))??;
    let w = header.split(',').count();
    let mut data = Vec::new();
    let mut h = 0;
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let before = data.len();
        for v in line.split(',') {
            data.push(v.trim().parse::<f32>().map_err(|_| bad(format!("bad value {v:?}")))?);
        }
        if data.len() - before != w {
            return Err(bad(format!("row {} has {} values, header has {w}", h + 1, data.len() - before)));
        }
        h += 1;
    }
    if h == 0 {
        return Err(bad("no data rows".into()));
    }
    Ok((h, w, data))
}

/// Reads `Key{key}_BAND{b}.csv` for each one-based `b` into an `H × W × B` tensor.
pub fn read_chip_csv(dir: &Path, key: &str, band_numbers: &[usize]) -> Result<ImageTensor, GeoError> {
    let planes = band_numbers.iter().map(|&b| read_band_csv(&dir.join(chip_file_name(key, b)))).collect::<Result<Vec<_>, _>>()?;
    let Some(&(h, w, _)) = planes.first() else {
        return Err(GeoError::InvalidRequest("no bands requested".into()));
    };
    if planes.iter().any(|p| p.0 != h || p.1 != w) {
        return Err(GeoError::CorruptFile(format!("bands of chip {key:?} differ in size")));
    }
    let nb = planes.len();
    Ok(ImageTensor::from_fn(h, w, nb, |r, c, b| planes[b].2[r * w + c]))
}

/// Parses `Key{key}_BAND{band}.csv`.
pub fn parse_chip_file_name(name: &str) -> Option<(String, usize)> {
    let stem = name.strip_prefix("Key")?.strip_suffix(".csv")?;
    let at = stem.rfind("_BAND")?;
    let band = stem[at + 5..].parse().ok()?;
    Some((stem[..at].to_string(), band))
}

/// Loads every chip in a directory of chip CSVs, sorted by key, bands ascending.
pub fn read_chip_dir(dir: &Path) -> Result<Vec<(String, ImageTensor)>, GeoError> {
    let mut bands: HashMap<String, Vec<usize>> = HashMap::new();
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name();
        if let Some((key, band)) = name.to_str().and_then(parse_chip_file_name) {
            bands.entry(key).or_default().push(band);
        }
    }
    let mut keys: Vec<String> = bands.keys().cloned().collect();
    keys.sort();
    keys.into_iter()
        .map(|k| {
            let mut b = bands.remove(&k).unwrap();
            b.sort_unstable();
            let chip = read_chip_csv(dir, &k, &b)?;
            Ok((k, chip))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChipFormat {
    Csv,
    Record,
}

/// File name of the record output inside the extraction directory.
pub const RECORD_FILE_NAME: &str = "chips.circ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum ChipStatus {
    Matched { raster: usize },
    Unmatched,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChipOutcome {
    pub key: String,
    #[serde(flatten)]
    pub status: ChipStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractReport {
    pub chips: Vec<ChipOutcome>,
}

impl ExtractReport {
    pub fn matched(&self) -> usize {
        self.chips.iter().filter(|c| matches!(c.status, ChipStatus::Matched { .. })).count()
    }

    pub fn unmatched_keys(&self) -> Vec<&str> {
        self.chips.iter().filter(|c| c.status == ChipStatus::Unmatched).map(|c| c.key.as_str()).collect()
    }

    pub fn status_of(&self, key: &str) -> Option<ChipStatus> {
        self.chips.iter().find(|c| c.key == key).map(|c| c.status)
    }
}

/// First raster in `pool` that yields a full chip for `req`.
pub fn match_in_pool(req: &ChipRequest, pool: &[RasterHandle], pad: Option<f32>) -> Result<Option<(usize, ImageTensor, Vec<usize>)>, GeoError> {
    for (i, raster) in pool.iter().enumerate() {
        match extract_chip(raster, req, pad) {
            Ok(chip) => {
                let numbers = req.bands.resolve(raster.band_count)?.into_iter().map(|b| b + 1).collect();
                return Ok(Some((i, chip, numbers)));
            }
            Err(GeoError::PointOutsideRaster { .. }) => {}
            Err(GeoError::WindowClipped { .. }) => log::debug!("{}: window clipped in raster {i}", req.key),
            Err(e) => return Err(e),
        }
    }
    Ok(None)
}

/// Extracts every request against `pool`, writing chip CSVs or a record file
/// (`chips.circ`) into `out_dir`. Unmatched keys are reported, not fatal.
pub fn extract_from_pool(
    requests: &[ChipRequest],
    pool: &[PathBuf],
    out_dir: &Path,
    format: ChipFormat,
    pad: Option<f32>,
) -> Result<ExtractReport, GeoError> {
    if pool.is_empty() {
        return Err(GeoError::InvalidRequest("raster pool is empty".into()));
    }
    let mut seen = HashSet::new();
    for r in requests {
        if r.key.is_empty() {
            return Err(GeoError::InvalidRequest("empty chip key".into()));
        }
        if !seen.insert(r.key.as_str()) {
            return Err(GeoError::DuplicateKey(r.key.clone()));
        }
    }
    let rasters = pool.iter().map(parse_raster).collect::<Result<Vec<_>, _>>()?;
    fs::create_dir_all(out_dir)?;

    let chips: Vec<ChipOutcome> = match format {
        ChipFormat::Csv => requests
            .par_iter()
            .map(|req| {
                Ok(match match_in_pool(req, &rasters, pad)? {
                    Some((i, chip, numbers)) => {
                        write_chip_csv(out_dir, &req.key, &chip, &numbers)?;
                        ChipOutcome { key: req.key.clone(), status: ChipStatus::Matched { raster: i } }
                    }
                    None => ChipOutcome { key: req.key.clone(), status: ChipStatus::Unmatched },
                })
            })
            .collect::<Result<_, GeoError>>()?,
        ChipFormat::Record => {
            let found: Vec<Option<(usize, ImageTensor, Vec<usize>)>> =
                requests.par_iter().map(|req| match_in_pool(req, &rasters, pad)).collect::<Result<_, _>>()?;
            let path = out_dir.join(RECORD_FILE_NAME);
            let mut writer = RecordWriter::create(&path)?;
            let mut outcomes = Vec::with_capacity(requests.len());
            for (req, f) in requests.iter().zip(found) {
                let status = match f {
                    Some((i, chip, _)) => {
                        writer.append(&req.key, &chip)?;
                        ChipStatus::Matched { raster: i }
                    }
                    None => ChipStatus::Unmatched,
                };
                outcomes.push(ChipOutcome { key: req.key.clone(), status });
            }
            if outcomes.iter().any(|o| o.status != ChipStatus::Unmatched) {
                writer.finish()?;
            } else {
                drop(writer);
                let _ = fs::remove_file(&path);
            }
            outcomes
        }
    };
    let report = ExtractReport { chips };
    log::info!("extracted {} of {} chips", report.matched(), requests.len());
    Ok(report)
}

/// Reads `key,lon,lat` rows.
pub fn read_points_csv(path: &Path, width_px: usize, bands: &BandSelection) -> Result<Vec<ChipRequest>, GeoError> {
    #[derive(Deserialize)]
    struct Row {
        key: String,
        lon: f64,
        lat: f64,
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| GeoError::InvalidRequest(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for row in rdr.deserialize::<Row>() {
        let row = row.map_err(|e| GeoError::InvalidRequest(format!("{}: {e}", path.display())))?;
        out.push(ChipRequest { key: row.key, lon: row.lon, lat: row.lat, width_px, bands: bands.clone() });
    }
    Ok(out)
}
