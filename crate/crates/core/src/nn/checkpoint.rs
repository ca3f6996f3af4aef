//! `FEDW` checkpoint files.
//!
//! Little-endian layout: magic `FEDW`, version `u32`, entry count `u32`, then
//! per entry a `u16` name length, the UTF-8 name, a `u8` rank, `rank` × `u32`
//! dimensions and the `f64` values in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelWeights, Tensor};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FEDW";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(w: &ModelWeights) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(16 + 8 * w.param_count());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(w.entries().len() as u32).to_le_bytes());
    for (name, t) in w.entries() {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::InvalidArgument(format!("parameter name too long: {name}")))?;
        let rank =
            u8::try_from(t.shape().len()).map_err(|_| Error::InvalidArgument(format!("rank too large for {name}")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("dimension too large for {name}")))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::CorruptCheckpoint(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
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

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelWeights> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CorruptCheckpoint(format!("unsupported version {version}")));
    }
    let count = c.u32()?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|e| Error::CorruptCheckpoint(format!("bad name: {e}")))?
            .to_string();
        let rank = c.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        if n * 8 > bytes.len() - c.pos {
            return Err(Error::CorruptCheckpoint(format!(
                "{name}: {n} values exceed remaining bytes"
            )));
        }
        let data = (0..n).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
        entries.push((name, Tensor::new(shape, data)?));
    }
    if c.pos != bytes.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{} trailing bytes",
            bytes.len() - c.pos
        )));
    }
    Ok(ModelWeights::from_entries(entries))
}

pub fn write_checkpoint(path: &Path, w: &ModelWeights) -> Result<()> {
    let bytes = encode_checkpoint(w)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    out.write_all(&bytes)
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<ModelWeights> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelSpec;
    use crate::seed::rng_from;

    #[test]
    fn layout_of_a_single_entry() {
        let w = ModelWeights::from_entries(vec![("ab".into(), Tensor::new(vec![2], vec![1.0, -2.0]).unwrap())]);
        let bytes = encode_checkpoint(&w).unwrap();
        assert_eq!(&bytes[..4], b"FEDW");
        assert_eq!(bytes.len(), 4 + 4 + 4 + 2 + 2 + 1 + 4 + 16);
        assert_eq!(&bytes[12..14], &2u16.to_le_bytes());
        assert_eq!(&bytes[14..16], b"ab");
        assert_eq!(bytes[16], 1);
        assert_eq!(&bytes[21..29], &1.0f64.to_le_bytes());
    }

    #[test]
    fn roundtrip_and_corruption() {
        let spec = ModelSpec::small_cnn(3, 4, 2).unwrap();
        let w = spec.init(&mut rng_from(2));
        let bytes = encode_checkpoint(&w).unwrap();
        assert_eq!(decode_checkpoint(&bytes).unwrap(), w);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
    }
}
