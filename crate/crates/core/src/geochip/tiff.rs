//! Reader and writer for a small GeoTIFF subset: classic little-endian TIFF,
//! strips or tiles, no compression or DEFLATE, uint8/uint16/float32 samples,
//! georeferenced by ModelPixelScale + ModelTiepoint.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::Path;

use flate2::read::ZlibDecoder;
use flate2::write::ZlibEncoder;

use super::{GeoError, GeoTransform, SampleType};

pub const TAG_IMAGE_WIDTH: u16 = 256;
pub const TAG_IMAGE_LENGTH: u16 = 257;
pub const TAG_BITS_PER_SAMPLE: u16 = 258;
pub const TAG_COMPRESSION: u16 = 259;
pub const TAG_PHOTOMETRIC: u16 = 262;
pub const TAG_STRIP_OFFSETS: u16 = 273;
pub const TAG_SAMPLES_PER_PIXEL: u16 = 277;
pub const TAG_ROWS_PER_STRIP: u16 = 278;
pub const TAG_STRIP_BYTE_COUNTS: u16 = 279;
pub const TAG_PLANAR_CONFIG: u16 = 284;
pub const TAG_PREDICTOR: u16 = 317;
pub const TAG_TILE_WIDTH: u16 = 322;
pub const TAG_TILE_LENGTH: u16 = 323;
pub const TAG_TILE_OFFSETS: u16 = 324;
pub const TAG_TILE_BYTE_COUNTS: u16 = 325;
pub const TAG_SAMPLE_FORMAT: u16 = 339;
pub const TAG_MODEL_PIXEL_SCALE: u16 = 33550;
pub const TAG_MODEL_TIEPOINT: u16 = 33922;

pub const COMPRESSION_NONE: u16 = 1;
pub const COMPRESSION_JPEG: u16 = 7;
pub const COMPRESSION_DEFLATE: u16 = 8;
pub const COMPRESSION_DEFLATE_OLD: u16 = 32946;

#[derive(Debug, Clone)]
pub(crate) struct TiffLayout {
    pub chunk_offsets: Vec<u64>,
    pub chunk_lengths: Vec<u64>,
    pub chunk_width: usize,
    pub chunk_height: usize,
    pub planar: bool,
    pub deflate: bool,
    pub samples_per_pixel: usize,
}

#[derive(Debug)]
pub(crate) struct ParsedTiff {
    pub width: usize,
    pub height: usize,
    pub bands: usize,
    pub sample_type: SampleType,
    pub geo: GeoTransform,
    pub layout: TiffLayout,
}

struct Entry {
    typ: u16,
    count: u64,
    raw: [u8; 4],
}

fn corrupt(msg: impl Into<String>) -> GeoError {
    GeoError::CorruptFile(msg.into())
}

fn type_size(typ: u16) -> Option<usize> {
    match typ {
        1 | 2 | 6 | 7 => Some(1),
        3 | 8 => Some(2),
        4 | 9 | 11 => Some(4),
        5 | 10 | 12 => Some(8),
        _ => None,
    }
}

fn entry_values(f: &mut File, e: &Entry) -> Result<Vec<f64>, GeoError> {
    let size = type_size(e.typ).ok_or_else(|| corrupt(format!("unknown field type {}", e.typ)))?;
    let total = size.checked_mul(e.count as usize).ok_or_else(|| corrupt("tag too large"))?;
    let bytes = if total <= 4 {
        e.raw[..total].to_vec()
    } else {
        let off = u32::from_le_bytes(e.raw) as u64;
        let mut buf = vec![0u8; total];
        f.seek(SeekFrom::Start(off))?;
        f.read_exact(&mut buf).map_err(|_| corrupt("tag data past end of file"))?;
        buf
    };
    let vals = bytes
        .chunks_exact(size)
        .map(|c| match e.typ {
            1 | 7 => c[0] as f64,
            6 => c[0] as i8 as f64,
            3 => u16::from_le_bytes([c[0], c[1]]) as f64,
            8 => i16::from_le_bytes([c[0], c[1]]) as f64,
            4 => u32::from_le_bytes(c.try_into().unwrap()) as f64,
            9 => i32::from_le_bytes(c.try_into().unwrap()) as f64,
            11 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
            12 => f64::from_le_bytes(c.try_into().unwrap()),
            5 => {
                let n = u32::from_le_bytes(c[..4].try_into().unwrap()) as f64;
                let d = u32::from_le_bytes(c[4..].try_into().unwrap()) as f64;
                n / d
            }
            10 => {
                let n = i32::from_le_bytes(c[..4].try_into().unwrap()) as f64;
                let d = i32::from_le_bytes(c[4..].try_into().unwrap()) as f64;
                n / d
            }
            _ => f64::NAN,
        })
        .collect();
    Ok(vals)
}

pub(crate) fn parse(path: &Path) -> Result<ParsedTiff, GeoError> {
    let mut f = File::open(path)?;
    let mut head = [0u8; 8];
    f.read_exact(&mut head).map_err(|_| corrupt("file shorter than a TIFF header"))?;
    match &head[..2] {
        b"II" => {}
        b"MM" => return Err(GeoError::UnsupportedFormat("big-endian TIFF".into())),
        _ => return Err(corrupt("not a TIFF")),
    }
    match u16::from_le_bytes([head[2], head[3]]) {
        42 => {}
        43 => return Err(GeoError::UnsupportedFormat("BigTIFF".into())),
        m => return Err(corrupt(format!("bad TIFF magic {m}"))),
    }
    let ifd = u32::from_le_bytes(head[4..8].try_into().unwrap()) as u64;
    f.seek(SeekFrom::Start(ifd))?;
    let mut nbuf = [0u8; 2];
    f.read_exact(&mut nbuf).map_err(|_| corrupt("IFD past end of file"))?;
    let n = u16::from_le_bytes(nbuf) as usize;
    let mut raw = vec![0u8; n * 12];
    f.read_exact(&mut raw).map_err(|_| corrupt("truncated IFD"))?;
    let mut entries: HashMap<u16, Entry> = HashMap::new();
    for e in raw.chunks_exact(12) {
        let tag = u16::from_le_bytes([e[0], e[1]]);
        let typ = u16::from_le_bytes([e[2], e[3]]);
        let count = u32::from_le_bytes(e[4..8].try_into().unwrap()) as u64;
        entries.insert(tag, Entry { typ, count, raw: e[8..12].try_into().unwrap() });
    }

    let mut get = |tag: u16| -> Result<Option<Vec<f64>>, GeoError> {
        match entries.get(&tag) {
            Some(e) => entry_values(&mut f, e).map(Some),
            None => Ok(None),
        }
    };
    let scalar = |v: Option<Vec<f64>>, default: Option<f64>, name: &str| -> Result<f64, GeoError> {
        match v.and_then(|v| v.first().copied()) {
            Some(x) => Ok(x),
            None => default.ok_or_else(|| corrupt(format!("missing required tag {name}"))),
        }
    };

    let width = scalar(get(TAG_IMAGE_WIDTH)?, None, "ImageWidth")? as usize;
    let height = scalar(get(TAG_IMAGE_LENGTH)?, None, "ImageLength")? as usize;
    let spp = scalar(get(TAG_SAMPLES_PER_PIXEL)?, Some(1.0), "SamplesPerPixel")? as usize;
    let compression = scalar(get(TAG_COMPRESSION)?, Some(1.0), "Compression")? as u16;
    let planar = scalar(get(TAG_PLANAR_CONFIG)?, Some(1.0), "PlanarConfiguration")? as u16;
    let predictor = scalar(get(TAG_PREDICTOR)?, Some(1.0), "Predictor")? as u16;
    let bits = get(TAG_BITS_PER_SAMPLE)?.unwrap_or_else(|| vec![1.0]);
    let formats = get(TAG_SAMPLE_FORMAT)?.unwrap_or_else(|| vec![1.0]);
    if width == 0 || height == 0 || spp == 0 {
        return Err(corrupt("zero image dimension"));
    }

    let deflate = match compression {
        COMPRESSION_NONE => false,
        COMPRESSION_DEFLATE | COMPRESSION_DEFLATE_OLD => true,
        c => return Err(GeoError::UnsupportedFormat(format!("compression {c}"))),
    };
    if predictor != 1 {
        return Err(GeoError::UnsupportedFormat(format!("predictor {predictor}")));
    }
    if planar != 1 && planar != 2 {
        return Err(corrupt(format!("planar configuration {planar}")));
    }
    if bits.iter().any(|&b| b != bits[0]) || formats.iter().any(|&s| s != formats[0]) {
        return Err(GeoError::UnsupportedFormat("bands with differing sample types".into()));
    }
    let sample_type = match (bits[0] as u16, formats[0] as u16) {
        (8, 1) => SampleType::U8,
        (16, 1) => SampleType::U16,
        (32, 3) => SampleType::F32,
        (b, s) => return Err(GeoError::UnsupportedFormat(format!("{b}-bit samples with sample format {s}"))),
    };

    let scale = get(TAG_MODEL_PIXEL_SCALE)?.ok_or(GeoError::MissingGeoTags("ModelPixelScale (33550)"))?;
    let tie = get(TAG_MODEL_TIEPOINT)?.ok_or(GeoError::MissingGeoTags("ModelTiepoint (33922)"))?;
    if scale.len() < 2 || tie.len() < 6 {
        return Err(corrupt("short geo tags"));
    }
    let geo = GeoTransform::new(tie[3] - tie[0] * scale[0], tie[4] + tie[1] * scale[1], scale[0], scale[1])?;

    let tiled = entries.contains_key(&TAG_TILE_OFFSETS);
    let (offsets, lengths, cw, ch) = if tiled {
        let tw = scalar(get(TAG_TILE_WIDTH)?, None, "TileWidth")? as usize;
        let th = scalar(get(TAG_TILE_LENGTH)?, None, "TileLength")? as usize;
        let o = get(TAG_TILE_OFFSETS)?.unwrap_or_default();
        let l = get(TAG_TILE_BYTE_COUNTS)?.ok_or_else(|| corrupt("missing TileByteCounts"))?;
        (o, l, tw, th)
    } else {
        let rps = scalar(get(TAG_ROWS_PER_STRIP)?, Some(height as f64), "RowsPerStrip")?.min(height as f64) as usize;
        let o = get(TAG_STRIP_OFFSETS)?.ok_or_else(|| corrupt("missing StripOffsets"))?;
        let l = get(TAG_STRIP_BYTE_COUNTS)?.ok_or_else(|| corrupt("missing StripByteCounts"))?;
        (o, l, width, rps)
    };
    if cw == 0 || ch == 0 {
        return Err(corrupt("zero chunk size"));
    }
    let per_band = width.div_ceil(cw) * height.div_ceil(ch);
    let expected = if planar == 2 { per_band * spp } else { per_band };
    if offsets.len() != expected || lengths.len() != expected {
        return Err(corrupt(format!("expected {expected} chunks, found {} offsets / {} byte counts", offsets.len(), lengths.len())));
    }

    Ok(ParsedTiff {
        width,
        height,
        bands: spp,
        sample_type,
        geo,
        layout: TiffLayout {
            chunk_offsets: offsets.iter().map(|&v| v as u64).collect(),
            chunk_lengths: lengths.iter().map(|&v| v as u64).collect(),
            chunk_width: cw,
            chunk_height: ch,
            planar: planar == 2,
            deflate,
            samples_per_pixel: spp,
        },
    })
}

impl TiffLayout {
    /// Chunk index and sample index within the decoded chunk for pixel `(r, c)` of `band`.
    pub fn locate(&self, width: usize, height: usize, r: usize, c: usize, band: usize) -> (usize, usize) {
        let across = width.div_ceil(self.chunk_width);
        let per_band = across * height.div_ceil(self.chunk_height);
        let chunk = (r / self.chunk_height) * across + c / self.chunk_width;
        let (lr, lc) = (r % self.chunk_height, c % self.chunk_width);
        let row_len = self.chunk_width;
        if self.planar {
            (band * per_band + chunk, lr * row_len + lc)
        } else {
            (chunk, (lr * row_len + lc) * self.samples_per_pixel + band)
        }
    }

    pub fn read_chunk(&self, f: &mut File, idx: usize, sample_bytes: usize) -> Result<Vec<u8>, GeoError> {
        let mut raw = vec![0u8; self.chunk_lengths[idx] as usize];
        f.seek(SeekFrom::Start(self.chunk_offsets[idx]))?;
        f.read_exact(&mut raw).map_err(|_| corrupt(format!("chunk {idx} past end of file")))?;
        let data = if self.deflate {
            let mut out = Vec::new();
            ZlibDecoder::new(&raw[..]).read_to_end(&mut out).map_err(|e| corrupt(format!("chunk {idx}: {e}")))?;
            out
        } else {
            raw
        };
        let per_pixel = if self.planar { 1 } else { self.samples_per_pixel };
        // Strips at the bottom edge may be short; tiles are always full size.
        if data.len() % (per_pixel * sample_bytes) != 0 {
            return Err(corrupt(format!("chunk {idx} has a ragged length")));
        }
        Ok(data)
    }
}

/// Writes a chunky (pixel-interleaved) GeoTIFF. `data` is `height × width ×
/// bands`, row-major. Meant for fixtures and demos.
#[derive(Debug, Clone)]
pub struct GeoTiffWriter {
    pub sample_type: SampleType,
    pub deflate: bool,
    /// `Some((tile_width, tile_height))` for tiles, otherwise strips.
    pub tiles: Option<(usize, usize)>,
    pub rows_per_strip: usize,
    /// Leave out the geo tags (for negative tests).
    pub omit_geo: bool,
    /// Compression code to record instead of the real one (for negative tests).
    pub compression_override: Option<u16>,
}

impl Default for GeoTiffWriter {
    fn default() -> Self {
        Self { sample_type: SampleType::F32, deflate: false, tiles: None, rows_per_strip: 16, omit_geo: false, compression_override: None }
    }
}

impl GeoTiffWriter {
    pub fn write(&self, path: &Path, width: usize, height: usize, bands: usize, data: &[f64], geo: &GeoTransform) -> Result<(), GeoError> {
        assert_eq!(data.len(), width * height * bands, "data length must be width * height * bands");
        let sb = self.sample_type.bytes();
        let encode = |v: f64, out: &mut Vec<u8>| match self.sample_type {
            SampleType::U8 => out.push(v as u8),
            SampleType::U16 => out.extend_from_slice(&(v as u16).to_le_bytes()),
            SampleType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
        };
        let (cw, ch) = self.tiles.unwrap_or((width, self.rows_per_strip.clamp(1, height)));
        let mut chunks: Vec<Vec<u8>> = Vec::new();
        for cr in 0..height.div_ceil(ch) {
            for cc in 0..width.div_ceil(cw) {
                let mut buf = Vec::new();
                let rows = if self.tiles.is_some() { ch } else { ch.min(height - cr * ch) };
                for lr in 0..rows {
                    for lc in 0..cw {
                        let (r, c) = (cr * ch + lr, cc * cw + lc);
                        for b in 0..bands {
                            let v = if r < height && c < width { data[(r * width + c) * bands + b] } else { 0.0 };
                            encode(v, &mut buf);
                        }
                    }
                }
                if self.deflate {
                    let mut z = ZlibEncoder::new(Vec::new(), flate2::Compression::default());
                    z.write_all(&buf)?;
                    buf = z.finish()?;
                }
                chunks.push(buf);
            }
        }

        let mut body = Vec::new();
        let mut offsets = Vec::new();
        let data_start = 8u32;
        for c in &chunks {
            offsets.push(data_start + body.len() as u32);
            body.extend_from_slice(c);
            if body.len() % 2 == 1 {
                body.push(0);
            }
        }

        enum Val {
            Short(Vec<u16>),
            Long(Vec<u32>),
            Double(Vec<f64>),
        }
        let compression = self.compression_override.unwrap_or(if self.deflate { COMPRESSION_DEFLATE } else { COMPRESSION_NONE });
        let fmt = if self.sample_type == SampleType::F32 { 3 } else { 1 };
        let mut tags: Vec<(u16, Val)> = vec![
            (TAG_IMAGE_WIDTH, Val::Long(vec![width as u32])),
            (TAG_IMAGE_LENGTH, Val::Long(vec![height as u32])),
            (TAG_BITS_PER_SAMPLE, Val::Short(vec![(sb * 8) as u16; bands])),
            (TAG_COMPRESSION, Val::Short(vec![compression])),
            (TAG_PHOTOMETRIC, Val::Short(vec![1])),
            (TAG_SAMPLES_PER_PIXEL, Val::Short(vec![bands as u16])),
            (TAG_PLANAR_CONFIG, Val::Short(vec![1])),
            (TAG_SAMPLE_FORMAT, Val::Short(vec![fmt; bands])),
        ];
        let lengths: Vec<u32> = chunks.iter().map(|c| c.len() as u32).collect();
        if let Some((tw, th)) = self.tiles {
            tags.push((TAG_TILE_WIDTH, Val::Long(vec![tw as u32])));
            tags.push((TAG_TILE_LENGTH, Val::Long(vec![th as u32])));
            tags.push((TAG_TILE_OFFSETS, Val::Long(offsets)));
            tags.push((TAG_TILE_BYTE_COUNTS, Val::Long(lengths)));
        } else {
            tags.push((TAG_STRIP_OFFSETS, Val::Long(offsets)));
            tags.push((TAG_ROWS_PER_STRIP, Val::Long(vec![ch as u32])));
            tags.push((TAG_STRIP_BYTE_COUNTS, Val::Long(lengths)));
        }
        if !self.omit_geo {
            tags.push((TAG_MODEL_PIXEL_SCALE, Val::Double(vec![geo.pixel_size_x, geo.pixel_size_y, 0.0])));
            tags.push((TAG_MODEL_TIEPOINT, Val::Double(vec![0.0, 0.0, 0.0, geo.origin_x, geo.origin_y, 0.0])));
        }
        tags.sort_by_key(|(t, _)| *t);

        let ifd_offset = data_start + body.len() as u32;
        let ifd_len = 2 + 12 * tags.len() + 4;
        let mut extra = Vec::new();
        let mut ifd = Vec::new();
        ifd.extend_from_slice(&(tags.len() as u16).to_le_bytes());
        for (tag, val) in &tags {
            let (typ, count, bytes): (u16, usize, Vec<u8>) = match val {
                Val::Short(v) => (3, v.len(), v.iter().flat_map(|x| x.to_le_bytes()).collect()),
                Val::Long(v) => (4, v.len(), v.iter().flat_map(|x| x.to_le_bytes()).collect()),
                Val::Double(v) => (12, v.len(), v.iter().flat_map(|x| x.to_le_bytes()).collect()),
            };
            ifd.extend_from_slice(&tag.to_le_bytes());
            ifd.extend_from_slice(&typ.to_le_bytes());
            ifd.extend_from_slice(&(count as u32).to_le_bytes());
            if bytes.len() <= 4 {
                let mut inline = [0u8; 4];
                inline[..bytes.len()].copy_from_slice(&bytes);
                ifd.extend_from_slice(&inline);
            } else {
                let off = ifd_offset + ifd_len as u32 + extra.len() as u32;
                ifd.extend_from_slice(&off.to_le_bytes());
                extra.extend_from_slice(&bytes);
                if extra.len() % 2 == 1 {
                    extra.push(0);
                }
            }
        }
        ifd.extend_from_slice(&0u32.to_le_bytes());

        let mut out = File::create(path)?;
        out.write_all(b"II")?;
        out.write_all(&42u16.to_le_bytes())?;
        out.write_all(&ifd_offset.to_le_bytes())?;
        out.write_all(&body)?;
        out.write_all(&ifd)?;
        out.write_all(&extra)?;
        Ok(())
    }
}
