//! `FPSA` pair archives.
//!
//! Little-endian layout: magic `FPSA`, version `u32` (= 1), width `u32`,
//! height `u32`, channels `u32` (= 3), pair count `u64`; then per pair the
//! code count `I` as `u32`, `I` × `u64` code ids, and the two images as
//! `width·height·3` `f32` values each, row-major and channel-last.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::image::RgbImage;
use super::{compose_fps_pair, CodePool, FpsPair, FpsParams};
use crate::seed;
use crate::{Error, Result};

pub const ARCHIVE_MAGIC: &[u8; 4] = b"FPSA";
pub const ARCHIVE_VERSION: u32 = 1;
pub const ARCHIVE_HEADER_LEN: u64 = 4 + 4 + 4 + 4 + 4 + 8;
const CHANNELS: u32 = 3;
const MAX_CODES_PER_RECORD: u32 = 1 << 16;
const BLOCK: usize = 32;

/// Byte length of one record holding `codes` code ids.
pub fn record_size(width: usize, height: usize, codes: usize) -> u64 {
    4 + 8 * codes as u64 + 2 * (width * height * 3) as u64 * 4
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArchiveHeader {
    pub width: u32,
    pub height: u32,
    pub pairs: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchiveSummary {
    pub path: PathBuf,
    pub pairs: u64,
    pub bytes: u64,
}

fn encode_header(h: &ArchiveHeader) -> Vec<u8> {
    let mut buf = Vec::with_capacity(ARCHIVE_HEADER_LEN as usize);
    buf.extend_from_slice(ARCHIVE_MAGIC);
    buf.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
    buf.extend_from_slice(&h.width.to_le_bytes());
    buf.extend_from_slice(&h.height.to_le_bytes());
    buf.extend_from_slice(&CHANNELS.to_le_bytes());
    buf.extend_from_slice(&h.pairs.to_le_bytes());
    buf
}

fn encode_record(pair: &FpsPair, buf: &mut Vec<u8>) {
    buf.extend_from_slice(&(pair.code_ids.len() as u32).to_le_bytes());
    for id in &pair.code_ids {
        buf.extend_from_slice(&id.to_le_bytes());
    }
    for img in [&pair.left, &pair.right] {
        for v in &img.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Pair `i` is generated from its own stream seeded by `(master_seed, i)`.
pub fn pair_at(pool: &CodePool, params: &FpsParams, master_seed: u64, i: u64) -> Result<FpsPair> {
    let mut rng = seed::derive_rng(master_seed, &[seed::stream::PAIRS, i]);
    compose_fps_pair(pool, params, &mut rng)
}

/// Writes `n_pairs` pairs to `path` using `workers` threads.
///
/// Output bytes do not depend on `workers`. On failure the partial file is
/// removed before the error is returned.
pub fn generate_archive(
    pool: &CodePool,
    n_pairs: u64,
    params: &FpsParams,
    master_seed: u64,
    workers: usize,
    path: &Path,
) -> Result<ArchiveSummary> {
    params.validate()?;
    let result = write_archive(pool, n_pairs, params, master_seed, workers, path);
    if result.is_err() {
        let _ = std::fs::remove_file(path);
    }
    result
}

fn write_archive(
    pool: &CodePool,
    n_pairs: u64,
    params: &FpsParams,
    master_seed: u64,
    workers: usize,
    path: &Path,
) -> Result<ArchiveSummary> {
    let threads = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let header = ArchiveHeader {
        width: params.width as u32,
        height: params.height as u32,
        pairs: n_pairs,
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut bytes = ARCHIVE_HEADER_LEN;
    out.write_all(&encode_header(&header)).map_err(|e| Error::io(path, e))?;
    let mut start = 0u64;
    while start < n_pairs {
        let end = (start + BLOCK as u64).min(n_pairs);
        let block: Vec<FpsPair> = threads.install(|| {
            (start..end)
                .into_par_iter()
                .map(|i| pair_at(pool, params, master_seed, i))
                .collect::<Result<Vec<_>>>()
        })?;
        let mut buf = Vec::new();
        for pair in &block {
            encode_record(pair, &mut buf);
        }
        out.write_all(&buf).map_err(|e| Error::io(path, e))?;
        bytes += buf.len() as u64;
        start = end;
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(ArchiveSummary {
        path: path.to_path_buf(),
        pairs: n_pairs,
        bytes,
    })
}

/// Sequential record reader. Every error names the offending record.
pub struct ArchiveReader<R: Read> {
    source: R,
    header: ArchiveHeader,
    next: u64,
}

impl ArchiveReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        ArchiveReader::new(BufReader::new(file))
    }
}

impl<R: Read> ArchiveReader<R> {
    pub fn new(mut source: R) -> Result<Self> {
        let mut head = [0u8; ARCHIVE_HEADER_LEN as usize];
        source.read_exact(&mut head).map_err(|_| Error::CorruptArchive {
            record: 0,
            reason: "truncated header".into(),
        })?;
        let corrupt = |reason: &str| Error::CorruptArchive {
            record: 0,
            reason: reason.to_string(),
        };
        if &head[..4] != ARCHIVE_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(head[o..o + 4].try_into().unwrap());
        if u32_at(4) != ARCHIVE_VERSION {
            return Err(corrupt("unsupported version"));
        }
        if u32_at(16) != CHANNELS {
            return Err(corrupt("channel count must be 3"));
        }
        let header = ArchiveHeader {
            width: u32_at(8),
            height: u32_at(12),
            pairs: u64::from_le_bytes(head[20..28].try_into().unwrap()),
        };
        if header.width == 0 || header.height == 0 {
            return Err(corrupt("empty image dimensions"));
        }
        Ok(ArchiveReader {
            source,
            header,
            next: 0,
        })
    }

    pub fn header(&self) -> ArchiveHeader {
        self.header
    }

    fn read_image(&mut self, record: u64) -> Result<RgbImage> {
        let (w, h) = (self.header.width as usize, self.header.height as usize);
        let mut raw = vec![0u8; w * h * 3 * 4];
        self.source.read_exact(&mut raw).map_err(|_| Error::CorruptArchive {
            record,
            reason: "truncated image data".into(),
        })?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::CorruptArchive {
                record,
                reason: "non-finite pixel value".into(),
            });
        }
        Ok(RgbImage {
            width: w,
            height: h,
            data,
        })
    }

    /// Next record, or `None` after the last one. Bytes beyond the declared
    /// pair count are reported as corruption.
    pub fn next_pair(&mut self) -> Result<Option<FpsPair>> {
        let record = self.next;
        if record == self.header.pairs {
            let mut probe = [0u8; 1];
            return match self.source.read(&mut probe) {
                Ok(0) => Ok(None),
                _ => Err(Error::CorruptArchive {
                    record,
                    reason: "trailing bytes after the last record".into(),
                }),
            };
        }
        let truncated = |what: &str| Error::CorruptArchive {
            record,
            reason: format!("truncated {what}"),
        };
        let mut b4 = [0u8; 4];
        self.source.read_exact(&mut b4).map_err(|_| truncated("code count"))?;
        let count = u32::from_le_bytes(b4);
        if count == 0 || count > MAX_CODES_PER_RECORD {
            return Err(Error::CorruptArchive {
                record,
                reason: format!("implausible code count {count}"),
            });
        }
        let mut code_ids = Vec::with_capacity(count as usize);
        let mut b8 = [0u8; 8];
        for _ in 0..count {
            self.source.read_exact(&mut b8).map_err(|_| truncated("code ids"))?;
            code_ids.push(u64::from_le_bytes(b8));
        }
        let left = self.read_image(record)?;
        let right = self.read_image(record)?;
        self.next += 1;
        Ok(Some(FpsPair { left, right, code_ids }))
    }

    pub fn read_all(mut self) -> Result<Vec<FpsPair>> {
        let mut pairs = Vec::with_capacity(self.header.pairs.min(1 << 20) as usize);
        while let Some(p) = self.next_pair()? {
            pairs.push(p);
        }
        Ok(pairs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ifs::SamplingConfig;

    fn setup() -> (CodePool, FpsParams) {
        let pool = CodePool::generate(11, 12, &SamplingConfig::default()).unwrap();
        let params = FpsParams {
            n_iters: 200,
            ..FpsParams::square(8)
        };
        (pool, params)
    }

    #[test]
    fn empty_archive_is_header_only() {
        let (pool, params) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.fpsa");
        let summary = generate_archive(&pool, 0, &params, 1, 1, &path).unwrap();
        assert_eq!(summary.bytes, ARCHIVE_HEADER_LEN);
        assert_eq!(std::fs::metadata(&path).unwrap().len(), ARCHIVE_HEADER_LEN);
        let reader = ArchiveReader::open(&path).unwrap();
        assert_eq!(reader.header().pairs, 0);
        assert!(reader.read_all().unwrap().is_empty());
    }

    #[test]
    fn records_read_back_as_generated() {
        let (pool, params) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.fpsa");
        generate_archive(&pool, 5, &params, 9, 2, &path).unwrap();
        let pairs = ArchiveReader::open(&path).unwrap().read_all().unwrap();
        assert_eq!(pairs.len(), 5);
        for (i, p) in pairs.iter().enumerate() {
            assert_eq!(*p, pair_at(&pool, &params, 9, i as u64).unwrap());
        }
    }

    #[test]
    fn truncation_reports_record_index() {
        let (pool, params) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.fpsa");
        generate_archive(&pool, 3, &params, 9, 1, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = ARCHIVE_HEADER_LEN + 2 * record_size(8, 8, 2) + 10;
        let err = ArchiveReader::new(&bytes[..cut as usize])
            .unwrap()
            .read_all()
            .unwrap_err();
        assert!(matches!(err, Error::CorruptArchive { record: 2, .. }), "{err}");
    }

    #[test]
    fn failed_generation_removes_partial_file() {
        let (pool, mut params) = setup();
        params.codes = crate::ifs::CodesPerImage::Fixed { count: 50 };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.fpsa");
        assert!(generate_archive(&pool, 4, &params, 1, 1, &path).is_err());
        assert!(!path.exists());
    }
}
