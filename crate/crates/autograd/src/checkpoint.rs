//! Binary parameter container.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "KEPF" | version | meta_len | meta (UTF-8 "key=value\n" lines, sorted)
//!        | n_params | n_params x (name_len | name | rank | dims.. | f32 values..)
//! ```
//!
//! Values are stored as 32-bit floats. Loading rejects bad magic, unknown
//! versions, truncation, and trailing bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"KEPF";
pub const FORMAT_VERSION: u32 = 1;

pub type Meta = BTreeMap<String, String>;

pub fn encode_checkpoint(params: &ParameterSet, meta: &Meta) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, FORMAT_VERSION);
    let mut meta_text = String::new();
    for (k, v) in meta {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::Checkpoint(format!("unencodable meta entry `{k}`")));
        }
        meta_text.push_str(k);
        meta_text.push('=');
        meta_text.push_str(v);
        meta_text.push('\n');
    }
    put_u32(&mut buf, len_u32(meta_text.len())?);
    buf.extend_from_slice(meta_text.as_bytes());
    put_u32(&mut buf, len_u32(params.len())?);
    for (name, value) in params.iter() {
        put_u32(&mut buf, len_u32(name.len())?);
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, len_u32(value.rank())?);
        for &d in value.shape() {
            put_u32(&mut buf, len_u32(d)?);
        }
        for &v in value.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ParameterSet, Meta)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let meta_len = r.u32()? as usize;
    let meta_text = std::str::from_utf8(r.take(meta_len)?)
        .map_err(|_| Error::Checkpoint("meta block is not UTF-8".into()))?;
    let mut meta = Meta::new();
    for line in meta_text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("malformed meta line `{line}`")))?;
        meta.insert(k.to_string(), v.to_string());
    }
    let n = r.u32()? as usize;
    let mut params = ParameterSet::new();
    for _ in 0..n {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = r.take(count.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last record",
            bytes.len() - r.pos
        )));
    }
    Ok((params, meta))
}

pub fn write_checkpoint<W: Write>(mut w: W, params: &ParameterSet, meta: &Meta) -> Result<()> {
    w.write_all(&encode_checkpoint(params, meta)?)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(ParameterSet, Meta)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}

/// Writes via a temporary sibling file and a rename, so a crash never
/// leaves a half-written checkpoint at `path`.
pub fn save_checkpoint_file(path: &Path, params: &ParameterSet, meta: &Meta) -> Result<()> {
    let bytes = encode_checkpoint(params, meta)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint_file(path: &Path) -> Result<(ParameterSet, Meta)> {
    decode_checkpoint(&std::fs::read(path)?)
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} exceeds u32")))
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
