//! FlatRaster: a plain-text raster used for fixtures.
//!
//! ```text
//! FLATRASTER v1 width height bands origin_x origin_y px py
//! <bands × height lines of width comma-separated values>
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{GeoError, GeoTransform};

pub const FLAT_MAGIC: &str = "FLATRASTER";

pub(crate) struct ParsedFlat {
    pub width: usize,
    pub height: usize,
    pub bands: usize,
    pub geo: GeoTransform,
    /// Band-major: `data[(band * height + row) * width + col]`.
    pub data: Vec<f32>,
}

pub(crate) fn is_flat(head: &[u8]) -> bool {
    head.starts_with(FLAT_MAGIC.as_bytes())
}

pub(crate) fn parse(path: &Path) -> Result<ParsedFlat, GeoError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| GeoError::CorruptFile("empty FlatRaster".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 9 || fields[0] != FLAT_MAGIC {
        return Err(GeoError::CorruptFile(format!("bad FlatRaster header: {header:?}")));
    }
    if fields[1] != "v1" {
        return Err(GeoError::UnsupportedFormat(format!("FlatRaster version {}", fields[1])));
    }
    let int = |s: &str| s.parse::<usize>().map_err(|_| GeoError::CorruptFile(format!("bad integer {s:?} in header")));
    let real = |s: &str| s.parse::<f64>().map_err(|_| GeoError::CorruptFile(format!("bad number {s:?} in header")));
    let (width, height, bands) = (int(fields[2])?, int(fields[3])?, int(fields[4])?);
    if width == 0 || height == 0 || bands == 0 {
        return Err(GeoError::CorruptFile("zero raster dimension".into()));
    }
    let geo = GeoTransform::new(real(fields[5])?, real(fields[6])?, real(fields[7])?, real(fields[8])?)?;

    let mut data = Vec::with_capacity(width * height * bands);
    let mut rows = 0;
    for (i, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
        let before = data.len();
        for v in line.split(',') {
            let v = v.trim();
            data.push(v.parse::<f32>().map_err(|_| GeoError::CorruptFile(format!("line {}: bad value {v:?}", i + 2)))?);
        }
        if data.len() - before != width {
            return Err(GeoError::CorruptFile(format!("line {}: expected {width} values, got {}", i + 2, data.len() - before)));
        }
        rows += 1;
    }
    if rows != bands * height {
        return Err(GeoError::CorruptFile(format!("expected {} data lines, got {rows}", bands * height)));
    }
    Ok(ParsedFlat { width, height, bands, geo, data })
}

/// Writes a FlatRaster. `data` is band-major (`band, row, col`).
pub fn write_flat_raster(path: &Path, width: usize, height: usize, bands: usize, geo: &GeoTransform, data: &[f64]) -> Result<(), GeoError> {
    assert_eq!(data.len(), width * height * bands, "data length must be width * height * bands");
    let mut s = String::new();
    writeln!(s, "{FLAT_MAGIC} v1 {width} {height} {bands} {} {} {} {}", geo.origin_x, geo.origin_y, geo.pixel_size_x, geo.pixel_size_y).unwrap();
    for line in data.chunks(width) {
        let vals: Vec<String> = line.iter().map(|v| v.to_string()).collect();
        s.push_str(&vals.join(","));
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}
