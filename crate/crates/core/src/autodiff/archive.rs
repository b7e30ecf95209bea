//! Named-tensor archive used for checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic    8 bytes  "RIPTNTA\0"
//! version  u32      = 1
//! count    u32
//! count × { name_len u32, name utf-8, rank u32, dims u32 × rank, values f32 × prod(dims) }
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Real, Tensor};
use crate::error::{Error, Result};

pub const ARCHIVE_MAGIC: &[u8; 8] = b"RIPTNTA\0";
pub const ARCHIVE_VERSION: u32 = 1;

fn bad(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        line: 0,
        msg: msg.into(),
    }
}

pub fn encode_archive<T: Real>(entries: &[(String, &Tensor<T>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(ARCHIVE_MAGIC);
    out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_archive<T: Real>(path: &Path, entries: &[(String, &Tensor<T>)]) -> Result<()> {
    let bytes = encode_archive(entries);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_archive(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_archive(&bytes).map_err(|msg| bad(path, msg))
}

struct Cursor<'a>(&'a [u8]);

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.0.len() < n {
            return Err("truncated archive".to_string());
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_archive(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor<f32>)>, String> {
    let mut cur = Cursor(bytes);
    if cur.take(8)? != ARCHIVE_MAGIC {
        return Err("not a tensor archive (bad magic)".into());
    }
    let version = cur.u32()?;
    if version != ARCHIVE_VERSION {
        return Err(format!("unsupported archive version {version}"));
    }
    let count = cur.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec()).map_err(|_| "tensor name is not utf-8".to_string())?;
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = cur.take(len.checked_mul(4).ok_or("tensor too large")?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
        out.push((name, t));
    }
    if !cur.0.is_empty() {
        return Err(format!("{} trailing bytes after last tensor", cur.0.len()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_round_trip() {
        let a = Tensor::<f64>::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.5]).unwrap();
        let b = Tensor::<f64>::scalar(-0.25);
        let bytes = encode_archive(&[("enc.w".into(), &a), ("center".into(), &b)]);
        let back = decode_archive(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "enc.w");
        assert_eq!(back[0].1.shape(), &[2, 3]);
        assert_eq!(back[0].1.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.5]);
        assert_eq!(back[1].1.shape(), &[] as &[usize]);
        assert_eq!(back[1].1.data(), &[-0.25]);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(decode_archive(b"NOTANARCHIVE").is_err());
        let t = Tensor::<f32>::scalar(1.0);
        let bytes = encode_archive(&[("x".into(), &t)]);
        assert!(decode_archive(&bytes[..bytes.len() - 1]).is_err());
    }
}
