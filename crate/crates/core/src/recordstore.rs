//! Sequential binary container of keyed tensors.
//!
//! A record file is written once, front to back, and can then be streamed in
//! write order or accessed by key through the index footer.
//!
//! ```text
//! FILE    := HEADER RECORD* INDEX TRAILER
//! HEADER  := "CIRC" version:u16 flags:u16 record_count:u64            (16 B)
//! RECORD  := payload_len:u64 crc32c(payload):u32 PAYLOAD
//! PAYLOAD := key_len:u16 key dtype:u8 ndim:u8 dims:u32*ndim data:f32*
//! INDEX   := entry_count:u32 (key_len:u16 key offset:u64)*
//! TRAILER := index_offset:u64 "CIDX" crc32c(INDEX):u32                (16 B)
//! ```
//!
//! All integers are little-endian. Index offsets point at a record's
//! `payload_len` field. `record_count` is written as zero and patched when
//! the writer is finished.

use std::collections::{HashMap, HashSet};
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::tensor::{ImageTensor, TensorError, MAX_AXES};

pub const HEADER_MAGIC: &[u8; 4] = b"CIRC";
pub const FOOTER_MAGIC: &[u8; 4] = b"CIDX";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: u64 = 16;
pub const TRAILER_LEN: u64 = 16;
/// `payload_len` plus `crc32c`.
pub const RECORD_FRAMING_LEN: u64 = 12;
pub const DTYPE_F32: u8 = 0;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("duplicate key {0:?}")]
    DuplicateKey(String),
    #[error("no records to write")]
    EmptyInput,
    #[error("key {0:?} not found")]
    KeyNotFound(String),
    #[error("crc mismatch in record {ordinal}")]
    CrcMismatch { ordinal: usize },
    #[error("file truncated: {0}")]
    TruncatedFile(String),
    #[error("bad record file: {0}")]
    Corrupt(String),
    #[error("key {0:?} is longer than 65535 bytes")]
    KeyTooLong(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, RecordError>;

/// Handle to a finished record file with its key index loaded.
#[derive(Debug, Clone)]
pub struct RecordFile {
    pub path: PathBuf,
    pub version: u16,
    pub count: u64,
    /// Keys in file order with the absolute offset of each record.
    entries: Vec<(String, u64)>,
    index: HashMap<String, u64>,
}

impl RecordFile {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let bytes = fs::read(&path)?;
        let header = parse_header(&bytes)?;
        let footer = parse_footer(&bytes)?.ok_or_else(|| RecordError::Corrupt("index footer missing".into()))?;
        let entries = footer.entries;
        let mut index = HashMap::with_capacity(entries.len());
        for (k, off) in &entries {
            if index.insert(k.clone(), *off).is_some() {
                return Err(RecordError::DuplicateKey(k.clone()));
            }
        }
        Ok(Self { path, version: header.version, count: header.count, entries, index })
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.index.contains_key(key)
    }

    pub fn offset_of(&self, key: &str) -> Option<u64> {
        self.index.get(key).copied()
    }

    /// Reads one record by key, checking its CRC.
    pub fn get(&self, key: &str) -> Result<ImageTensor> {
        let offset = self.offset_of(key).ok_or_else(|| RecordError::KeyNotFound(key.to_string()))?;
        let mut f = File::open(&self.path)?;
        f.seek(SeekFrom::Start(offset))?;
        let ordinal = self.entries.iter().position(|(_, o)| *o == offset).unwrap_or(0);
        let payload = read_framed(&mut f, ordinal)?.ok_or_else(|| RecordError::TruncatedFile(format!("record {key:?}")))?;
        let (k, t) = decode_payload(&payload)?;
        if k != key {
            return Err(RecordError::Corrupt(format!("index points {key:?} at record {k:?}")));
        }
        Ok(t)
    }
}

/// Incremental writer. Call [`RecordWriter::finish`] to emit the index; a
/// writer dropped without finishing leaves a file with no footer.
pub struct RecordWriter {
    path: PathBuf,
    out: BufWriter<File>,
    pos: u64,
    entries: Vec<(String, u64)>,
    seen: HashSet<String>,
}

impl RecordWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut out = BufWriter::new(File::create(&path)?);
        let mut header = Vec::with_capacity(HEADER_LEN as usize);
        header.extend_from_slice(HEADER_MAGIC);
        header.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        header.extend_from_slice(&0u16.to_le_bytes());
        header.extend_from_slice(&0u64.to_le_bytes());
        out.write_all(&header)?;
        Ok(Self { path, out, pos: HEADER_LEN, entries: Vec::new(), seen: HashSet::new() })
    }

    pub fn append(&mut self, key: &str, tensor: &ImageTensor) -> Result<()> {
        if !self.seen.insert(key.to_string()) {
            return Err(RecordError::DuplicateKey(key.to_string()));
        }
        let payload = encode_payload(key, tensor)?;
        let crc = crc32c::crc32c(&payload);
        self.out.write_all(&(payload.len() as u64).to_le_bytes())?;
        self.out.write_all(&crc.to_le_bytes())?;
        self.out.write_all(&payload)?;
        self.entries.push((key.to_string(), self.pos));
        self.pos += RECORD_FRAMING_LEN + payload.len() as u64;
        Ok(())
    }

    pub fn finish(mut self) -> Result<RecordFile> {
        let index = encode_index(&self.entries);
        let index_offset = self.pos;
        self.out.write_all(&index)?;
        self.out.write_all(&index_offset.to_le_bytes())?;
        self.out.write_all(FOOTER_MAGIC)?;
        self.out.write_all(&crc32c::crc32c(&index).to_le_bytes())?;
        let count = self.entries.len() as u64;
        self.out.seek(SeekFrom::Start(8))?;
        self.out.write_all(&count.to_le_bytes())?;
        self.out.flush()?;
        let index = self.entries.iter().cloned().collect();
        Ok(RecordFile { path: self.path, version: FORMAT_VERSION, count, entries: self.entries, index })
    }
}

/// Writes a whole stream of keyed tensors. The file is removed again if the
/// stream turns out to contain a duplicate key.
pub fn write_records<'a, I>(entries: I, path: impl AsRef<Path>) -> Result<RecordFile>
where
    I: IntoIterator<Item = (&'a str, &'a ImageTensor)>,
{
    let mut it = entries.into_iter().peekable();
    if it.peek().is_none() {
        return Err(RecordError::EmptyInput);
    }
    let path = path.as_ref();
    let mut w = RecordWriter::create(path)?;
    for (k, t) in it {
        if let Err(e) = w.append(k, t) {
            drop(w);
            let _ = fs::remove_file(path);
            return Err(e);
        }
    }
    w.finish()
}

/// Streams records in write order.
pub struct SequentialReader {
    inner: BufReader<File>,
    ordinal: usize,
    /// Number of records promised by the header; zero means "until the index".
    expected: u64,
    stop_at: Option<u64>,
    pos: u64,
    failed: bool,
}

impl Iterator for SequentialReader {
    type Item = Result<(String, ImageTensor)>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        if self.expected > 0 && self.ordinal as u64 >= self.expected {
            return None;
        }
        if let Some(stop) = self.stop_at {
            if self.pos >= stop {
                return None;
            }
        }
        let res = match read_framed(&mut self.inner, self.ordinal) {
            Ok(Some(payload)) => {
                self.pos += RECORD_FRAMING_LEN + payload.len() as u64;
                decode_payload(&payload)
            }
            Ok(None) if self.expected == 0 => return None,
            Ok(None) => Err(RecordError::TruncatedFile(format!("expected {} records, found {}", self.expected, self.ordinal))),
            Err(e) => Err(e),
        };
        self.ordinal += 1;
        if res.is_err() {
            self.failed = true;
        }
        Some(res)
    }
}

pub fn read_sequential(path: impl AsRef<Path>) -> Result<SequentialReader> {
    let bytes_len = fs::metadata(path.as_ref())?.len();
    let mut f = File::open(path.as_ref())?;
    let mut head = [0u8; HEADER_LEN as usize];
    f.read_exact(&mut head).map_err(|_| RecordError::TruncatedFile("header".into()))?;
    let header = parse_header(&head)?;
    // Find the index offset cheaply so an unfinished file can still be scanned.
    let stop_at = if bytes_len >= HEADER_LEN + TRAILER_LEN {
        let mut tail = [0u8; TRAILER_LEN as usize];
        f.seek(SeekFrom::End(-(TRAILER_LEN as i64)))?;
        f.read_exact(&mut tail)?;
        f.seek(SeekFrom::Start(HEADER_LEN))?;
        (&tail[8..12] == FOOTER_MAGIC).then(|| u64::from_le_bytes(tail[..8].try_into().unwrap()))
    } else {
        None
    };
    Ok(SequentialReader {
        inner: BufReader::new(f),
        ordinal: 0,
        expected: header.count,
        stop_at,
        pos: HEADER_LEN,
        failed: false,
    })
}

/// Fetches tensors in request order. Repeated keys are read once and cloned.
pub fn read_by_keys<S: AsRef<str>>(path: impl AsRef<Path>, keys: &[S]) -> Result<Vec<ImageTensor>> {
    let file = RecordFile::open(path)?;
    let mut cache: HashMap<&str, ImageTensor> = HashMap::new();
    let mut out = Vec::with_capacity(keys.len());
    for k in keys {
        let k = k.as_ref();
        if let Some(t) = cache.get(k) {
            out.push(t.clone());
            continue;
        }
        let t = file.get(k)?;
        cache.insert(k, t.clone());
        out.push(t);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Finding {
    BadHeader { reason: String },
    CrcMismatch { ordinal: usize, offset: u64 },
    MalformedPayload { ordinal: usize, reason: String },
    TruncatedRecord { ordinal: usize, offset: u64 },
    CountMismatch { header: u64, scanned: u64 },
    IndexMissing,
    IndexCrcMismatch,
    IndexEntryMismatch { key: String, offset: u64 },
    DuplicateKey { key: String },
}

#[derive(Debug, Clone, Serialize)]
pub struct RecordStatus {
    pub ordinal: usize,
    pub offset: u64,
    pub key: Option<String>,
    pub crc_ok: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub total_bytes: u64,
    pub records: Vec<RecordStatus>,
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn crc_mismatches(&self) -> usize {
        self.findings.iter().filter(|f| matches!(f, Finding::CrcMismatch { .. })).count()
    }
}

/// Checks every record CRC, the index CRC and the index against the records
/// actually found by a sequential scan. Problems are reported, not raised.
pub fn validate(path: impl AsRef<Path>) -> Result<ValidationReport> {
    let bytes = fs::read(path.as_ref())?;
    let total_bytes = bytes.len() as u64;
    let mut findings = Vec::new();
    let mut records = Vec::new();

    let header = match parse_header(&bytes) {
        Ok(h) => h,
        Err(e) => {
            findings.push(Finding::BadHeader { reason: e.to_string() });
            return Ok(ValidationReport { total_bytes, records, findings });
        }
    };

    let footer = match parse_footer(&bytes) {
        Ok(Some(f)) => Some(f),
        Ok(None) => {
            findings.push(Finding::IndexMissing);
            None
        }
        Err(_) => {
            findings.push(Finding::IndexCrcMismatch);
            None
        }
    };
    let scan_end = match &footer {
        Some(f) => f.index_offset,
        None => trailing_index_offset(&bytes).unwrap_or(total_bytes),
    };

    let mut pos = HEADER_LEN;
    let mut ordinal = 0usize;
    while pos < scan_end {
        if header.count > 0 && ordinal as u64 >= header.count {
            break;
        }
        if pos + RECORD_FRAMING_LEN > scan_end {
            findings.push(Finding::TruncatedRecord { ordinal, offset: pos });
            break;
        }
        let p = pos as usize;
        let len = u64::from_le_bytes(bytes[p..p + 8].try_into().unwrap());
        let crc = u32::from_le_bytes(bytes[p + 8..p + 12].try_into().unwrap());
        let start = pos + RECORD_FRAMING_LEN;
        if len > scan_end - start {
            findings.push(Finding::TruncatedRecord { ordinal, offset: pos });
            break;
        }
        let payload = &bytes[start as usize..(start + len) as usize];
        let crc_ok = crc32c::crc32c(payload) == crc;
        let mut key = None;
        if crc_ok {
            match decode_payload(payload) {
                Ok((k, _)) => key = Some(k),
                Err(e) => findings.push(Finding::MalformedPayload { ordinal, reason: e.to_string() }),
            }
        } else {
            findings.push(Finding::CrcMismatch { ordinal, offset: pos });
        }
        records.push(RecordStatus { ordinal, offset: pos, key, crc_ok });
        pos = start + len;
        ordinal += 1;
    }

    if header.count > 0 && header.count != records.len() as u64 {
        findings.push(Finding::CountMismatch { header: header.count, scanned: records.len() as u64 });
    }

    let mut seen = HashSet::new();
    for r in &records {
        if let Some(k) = &r.key {
            if !seen.insert(k.clone()) {
                findings.push(Finding::DuplicateKey { key: k.clone() });
            }
        }
    }

    if let Some(footer) = footer {
        let by_offset: HashMap<u64, &RecordStatus> = records.iter().map(|r| (r.offset, r)).collect();
        for (k, off) in &footer.entries {
            let consistent = match by_offset.get(off) {
                // A record that failed its CRC has no trusted key; its own finding covers it.
                Some(r) => r.key.as_deref().map_or(!r.crc_ok, |rk| rk == k),
                None => false,
            };
            if !consistent {
                findings.push(Finding::IndexEntryMismatch { key: k.clone(), offset: *off });
            }
        }
        if footer.entries.len() != records.len() {
            findings.push(Finding::CountMismatch { header: footer.entries.len() as u64, scanned: records.len() as u64 });
        }
    }

    Ok(ValidationReport { total_bytes, records, findings })
}

/// Exact on-disk size of a file holding `entries`.
pub fn expected_file_size<'a>(entries: impl IntoIterator<Item = (&'a str, &'a ImageTensor)>) -> u64 {
    let mut records = 0u64;
    let mut index = 4u64;
    for (k, t) in entries {
        records += RECORD_FRAMING_LEN + payload_len(k, t);
        index += 2 + k.len() as u64 + 8;
    }
    HEADER_LEN + records + index + TRAILER_LEN
}

pub fn payload_len(key: &str, t: &ImageTensor) -> u64 {
    (2 + key.len() + 1 + 1 + 4 * t.dims().len() + 4 * t.len()) as u64
}

struct Header {
    version: u16,
    count: u64,
}

struct Footer {
    index_offset: u64,
    entries: Vec<(String, u64)>,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < HEADER_LEN as usize {
        return Err(RecordError::TruncatedFile("header".into()));
    }
    if &bytes[..4] != HEADER_MAGIC {
        return Err(RecordError::Corrupt("bad header magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(RecordError::Corrupt(format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    Ok(Header { version, count })
}

fn trailing_index_offset(bytes: &[u8]) -> Option<u64> {
    let n = bytes.len();
    if n < (HEADER_LEN + TRAILER_LEN) as usize || &bytes[n - 8..n - 4] != FOOTER_MAGIC {
        return None;
    }
    let off = u64::from_le_bytes(bytes[n - 16..n - 8].try_into().unwrap());
    (off >= HEADER_LEN && off <= (n as u64 - TRAILER_LEN)).then_some(off)
}

/// `Ok(None)` when there is no trailer; `Err` when one exists but is damaged.
fn parse_footer(bytes: &[u8]) -> Result<Option<Footer>> {
    let Some(index_offset) = trailing_index_offset(bytes) else {
        return Ok(None);
    };
    let n = bytes.len();
    let index = &bytes[index_offset as usize..n - TRAILER_LEN as usize];
    let crc = u32::from_le_bytes(bytes[n - 4..].try_into().unwrap());
    if crc32c::crc32c(index) != crc {
        return Err(RecordError::Corrupt("index crc mismatch".into()));
    }
    let mut cur = Cursor { buf: index, pos: 0 };
    let count = cur.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let klen = cur.u16()? as usize;
        let key = cur.str(klen)?;
        let off = cur.u64()?;
        entries.push((key, off));
    }
    if cur.pos != index.len() {
        return Err(RecordError::Corrupt("trailing bytes in index".into()));
    }
    Ok(Some(Footer { index_offset, entries }))
}

fn encode_index(entries: &[(String, u64)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (k, off) in entries {
        out.extend_from_slice(&(k.len() as u16).to_le_bytes());
        out.extend_from_slice(k.as_bytes());
        out.extend_from_slice(&off.to_le_bytes());
    }
    out
}

fn encode_payload(key: &str, t: &ImageTensor) -> Result<Vec<u8>> {
    if key.len() > u16::MAX as usize {
        return Err(RecordError::KeyTooLong(key.chars().take(32).collect()));
    }
    let mut out = Vec::with_capacity(payload_len(key, t) as usize);
    out.extend_from_slice(&(key.len() as u16).to_le_bytes());
    out.extend_from_slice(key.as_bytes());
    out.push(DTYPE_F32);
    out.push(t.dims().len() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn decode_payload(payload: &[u8]) -> Result<(String, ImageTensor)> {
    let mut cur = Cursor { buf: payload, pos: 0 };
    let klen = cur.u16()? as usize;
    let key = cur.str(klen)?;
    let dtype = cur.u8()?;
    if dtype != DTYPE_F32 {
        return Err(RecordError::Corrupt(format!("unknown dtype {dtype}")));
    }
    let ndim = cur.u8()? as usize;
    if ndim == 0 || ndim > MAX_AXES {
        return Err(RecordError::Corrupt(format!("bad ndim {ndim}")));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(cur.u32()? as usize);
    }
    let n: usize = dims.iter().product();
    let raw = cur.take(n.checked_mul(4).ok_or_else(|| RecordError::Corrupt("dims overflow".into()))?)?;
    if cur.pos != payload.len() {
        return Err(RecordError::Corrupt("payload length disagrees with dims".into()));
    }
    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((key, ImageTensor::new(dims, data)?))
}

/// Reads one framed record and checks its CRC. `Ok(None)` on clean EOF.
fn read_framed(r: &mut impl Read, ordinal: usize) -> Result<Option<Vec<u8>>> {
    let mut frame = [0u8; RECORD_FRAMING_LEN as usize];
    let mut got = 0;
    while got < frame.len() {
        match r.read(&mut frame[got..])? {
            0 if got == 0 => return Ok(None),
            0 => return Err(RecordError::TruncatedFile(format!("record {ordinal} framing"))),
            n => got += n,
        }
    }
    let len = u64::from_le_bytes(frame[..8].try_into().unwrap());
    let crc = u32::from_le_bytes(frame[8..].try_into().unwrap());
    let mut payload = Vec::new();
    r.take(len).read_to_end(&mut payload)?;
    if payload.len() as u64 != len {
        return Err(RecordError::TruncatedFile(format!("record {ordinal} payload")));
    }
    if crc32c::crc32c(&payload) != crc {
        return Err(RecordError::CrcMismatch { ordinal });
    }
    Ok(Some(payload))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| RecordError::Corrupt("unexpected end of section".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| RecordError::Corrupt("key is not UTF-8".into()))
    }
}
