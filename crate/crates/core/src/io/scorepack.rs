//! Scorepack: a flat little-endian container of float32 score maps.
//!
//! ```text
//! header:  "WSEP" | version u16 = 1 | flags u16 = 0 | record_count u64
//! record:  id_len u16 | id (UTF-8) | height u32 | width u32 | f32 × height·width
//! ```
//!
//! Records are read one at a time; a reader never holds more than the
//! current record in memory (plus the set of ids seen so far).

use std::collections::HashSet;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::scoremap::ScoreMap;

pub const MAGIC: &[u8; 4] = b"WSEP";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum ScorepackError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported scorepack version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated record {index} of {count}")]
    TruncatedRecord { index: u64, count: u64 },
    #[error("trailing bytes after {count} records")]
    TrailingData { count: u64 },
    #[error("duplicate image id {0}")]
    DuplicateId(String),
    #[error("record {index}: invalid id: {reason}")]
    InvalidId { index: u64, reason: String },
    #[error("record {index} ({id}): invalid dimensions {height}x{width}")]
    InvalidDimensions {
        index: u64,
        id: String,
        height: u32,
        width: u32,
    },
    #[error("{id}: value at index {index} is not a finite float32")]
    NonFinite { id: String, index: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Streaming reader over a scorepack.
pub struct ScorepackReader<R> {
    inner: R,
    count: u64,
    next: u64,
    seen: HashSet<String>,
    failed: bool,
    buf: Vec<u8>,
}

impl ScorepackReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, ScorepackError> {
        Self::new(BufReader::with_capacity(1 << 20, File::open(path)?))
    }
}

fn read_exact_or_truncated<R: Read>(
    r: &mut R,
    buf: &mut [u8],
    index: u64,
    count: u64,
) -> Result<(), ScorepackError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => ScorepackError::TruncatedRecord { index, count },
        _ => ScorepackError::Io(e),
    })
}

impl<R: Read> ScorepackReader<R> {
    pub fn new(mut inner: R) -> Result<Self, ScorepackError> {
        let mut header = [0u8; HEADER_LEN];
        inner.read_exact(&mut header).map_err(|e| match e.kind() {
            ErrorKind::UnexpectedEof => ScorepackError::TruncatedRecord { index: 0, count: 0 },
            _ => ScorepackError::Io(e),
        })?;
        let magic: [u8; 4] = header[0..4].try_into().unwrap();
        if &magic != MAGIC {
            return Err(ScorepackError::BadMagic(magic));
        }
        let version = u16::from_le_bytes([header[4], header[5]]);
        if version != VERSION {
            return Err(ScorepackError::UnsupportedVersion(version));
        }
        let count = u64::from_le_bytes(header[8..16].try_into().unwrap());
        Ok(Self {
            inner,
            count,
            next: 0,
            seen: HashSet::new(),
            failed: false,
            buf: Vec::new(),
        })
    }

    /// Number of records announced by the header.
    pub fn record_count(&self) -> u64 {
        self.count
    }

    fn read_record(&mut self) -> Result<ScoreMap, ScorepackError> {
        let (index, count) = (self.next, self.count);
        let mut small = [0u8; 8];
        read_exact_or_truncated(&mut self.inner, &mut small[..2], index, count)?;
        let id_len = u16::from_le_bytes([small[0], small[1]]) as usize;
        let mut id = vec![0u8; id_len];
        read_exact_or_truncated(&mut self.inner, &mut id, index, count)?;
        let id = String::from_utf8(id).map_err(|e| ScorepackError::InvalidId {
            index,
            reason: e.to_string(),
        })?;
        read_exact_or_truncated(&mut self.inner, &mut small, index, count)?;
        let height = u32::from_le_bytes(small[0..4].try_into().unwrap());
        let width = u32::from_le_bytes(small[4..8].try_into().unwrap());
        let n = (height as usize)
            .checked_mul(width as usize)
            .filter(|&n| n > 0 && n <= isize::MAX as usize / 4)
            .ok_or_else(|| ScorepackError::InvalidDimensions {
                index,
                id: id.clone(),
                height,
                width,
            })?;
        self.buf.resize(n * 4, 0);
        read_exact_or_truncated(&mut self.inner, &mut self.buf, index, count)?;
        let values: Vec<f64> = self
            .buf
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(ScorepackError::NonFinite { id, index: i });
        }
        if !self.seen.insert(id.clone()) {
            return Err(ScorepackError::DuplicateId(id));
        }
        self.next += 1;
        Ok(ScoreMap::new(id, height as usize, width as usize, values)
            .expect("dimensions and values validated above"))
    }

    fn check_trailing(&mut self) -> Result<(), ScorepackError> {
        let mut probe = [0u8; 1];
        loop {
            match self.inner.read(&mut probe) {
                Ok(0) => return Ok(()),
                Ok(_) => return Err(ScorepackError::TrailingData { count: self.count }),
                Err(e) if e.kind() == ErrorKind::Interrupted => continue,
                Err(e) => return Err(e.into()),
            }
        }
    }
}

impl<R: Read> Iterator for ScorepackReader<R> {
    type Item = Result<ScoreMap, ScorepackError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let item = if self.next < self.count {
            self.read_record()
        } else if self.next == self.count {
            self.next += 1;
            match self.check_trailing() {
                Ok(()) => return None,
                Err(e) => Err(e),
            }
        } else {
            return None;
        };
        if item.is_err() {
            self.failed = true;
        }
        Some(item)
    }
}

/// Opens a pack for streaming reads.
pub fn read_scorepack(path: impl AsRef<Path>) -> Result<ScorepackReader<BufReader<File>>, ScorepackError> {
    ScorepackReader::open(path)
}

/// Validates a map for writing and returns its float32 payload.
fn encode_values(map: &ScoreMap) -> Result<Vec<u8>, ScorepackError> {
    let mut out = Vec::with_capacity(map.values().len() * 4);
    for (index, &v) in map.values().iter().enumerate() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(ScorepackError::NonFinite {
                id: map.image_id().to_owned(),
                index,
            });
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

/// Writes `maps` to `out`. The record count is known up front, so the whole
/// sequence is validated before any byte is emitted.
pub fn write_scorepack_to<W: Write>(maps: &[ScoreMap], out: W) -> Result<(), ScorepackError> {
    let mut seen = HashSet::new();
    for (index, map) in maps.iter().enumerate() {
        validate_id(map.image_id(), index as u64)?;
        if !seen.insert(map.image_id()) {
            return Err(ScorepackError::DuplicateId(map.image_id().to_owned()));
        }
        validate_dims(map, index as u64)?;
        if let Some(i) = map.values().iter().position(|&v| !(v as f32).is_finite()) {
            return Err(ScorepackError::NonFinite {
                id: map.image_id().to_owned(),
                index: i,
            });
        }
    }
    let mut writer = ScorepackWriter::new(out, maps.len() as u64)?;
    for map in maps {
        writer.push(map)?;
    }
    writer.finish()?;
    Ok(())
}

pub fn write_scorepack(maps: &[ScoreMap], path: impl AsRef<Path>) -> Result<(), ScorepackError> {
    let file = File::create(path)?;
    write_scorepack_to(maps, BufWriter::new(file))
}

fn validate_id(id: &str, index: u64) -> Result<(), ScorepackError> {
    if id.len() > u16::MAX as usize {
        return Err(ScorepackError::InvalidId {
            index,
            reason: format!("id is {} bytes, limit is {}", id.len(), u16::MAX),
        });
    }
    Ok(())
}

fn validate_dims(map: &ScoreMap, index: u64) -> Result<(), ScorepackError> {
    let (h, w) = (map.height(), map.width());
    if u32::try_from(h).is_err() || u32::try_from(w).is_err() {
        return Err(ScorepackError::InvalidDimensions {
            index,
            id: map.image_id().to_owned(),
            height: h.min(u32::MAX as usize) as u32,
            width: w.min(u32::MAX as usize) as u32,
        });
    }
    Ok(())
}

/// Incremental writer for packs whose record count is known in advance.
/// Records are written as they arrive, so memory stays at one record.
pub struct ScorepackWriter<W: Write> {
    out: W,
    expected: u64,
    written: u64,
    seen: HashSet<String>,
}

impl<W: Write> ScorepackWriter<W> {
    pub fn new(mut out: W, record_count: u64) -> Result<Self, ScorepackError> {
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&0u16.to_le_bytes())?;
        out.write_all(&record_count.to_le_bytes())?;
        Ok(Self {
            out,
            expected: record_count,
            written: 0,
            seen: HashSet::new(),
        })
    }

    pub fn push(&mut self, map: &ScoreMap) -> Result<(), ScorepackError> {
        let index = self.written;
        if index >= self.expected {
            return Err(ScorepackError::TrailingData {
                count: self.expected,
            });
        }
        validate_id(map.image_id(), index)?;
        validate_dims(map, index)?;
        if !self.seen.insert(map.image_id().to_owned()) {
            return Err(ScorepackError::DuplicateId(map.image_id().to_owned()));
        }
        let payload = encode_values(map)?;
        let id = map.image_id().as_bytes();
        self.out.write_all(&(id.len() as u16).to_le_bytes())?;
        self.out.write_all(id)?;
        self.out.write_all(&(map.height() as u32).to_le_bytes())?;
        self.out.write_all(&(map.width() as u32).to_le_bytes())?;
        self.out.write_all(&payload)?;
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W, ScorepackError> {
        if self.written != self.expected {
            return Err(ScorepackError::TruncatedRecord {
                index: self.written,
                count: self.expected,
            });
        }
        self.out.flush()?;
        Ok(self.out)
    }
}

/// Size in bytes of one encoded record.
pub fn record_len(id: &str, height: usize, width: usize) -> usize {
    2 + id.len() + 8 + 4 * height * width
}
