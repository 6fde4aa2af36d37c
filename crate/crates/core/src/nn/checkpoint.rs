//! Binary tensor container.
//!
//! ```text
//! "ckpt v1" [" config=<hex>"] "\n"
//! repeated until end of file:
//!   u32 LE   name length in bytes
//!   [u8]     UTF-8 name
//!   u32 LE   rank
//!   u64 LE   dims[rank]
//!   f64 LE   payload, product(dims) values, row-major
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::tensor::{Param, Tensor};

const MAGIC: &str = "ckpt v1";

pub fn encode(params: &[&Param], config_hash: Option<&str>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC.as_bytes());
    if let Some(h) = config_hash {
        out.extend_from_slice(format!(" config={h}").as_bytes());
    }
    out.push(b'\n');
    for p in params {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        let shape = p.tensor.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.tensor.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Decoded container: tensors plus the optional config hash from the header.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: Vec<Param>,
    pub config_hash: Option<String>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Tensors whose name starts with `prefix.`.
    pub fn with_prefix(&self, prefix: &str) -> Vec<Param> {
        let p = format!("{prefix}.");
        self.params.iter().filter(|t| t.name.starts_with(&p)).cloned().collect()
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Parse("checkpoint header missing".into()))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|e| Error::Parse(e.to_string()))?;
    let rest = header
        .strip_prefix(MAGIC)
        .ok_or_else(|| Error::Parse(format!("bad checkpoint header `{header}`")))?;
    let config_hash = match rest.trim() {
        "" => None,
        s => Some(
            s.strip_prefix("config=")
                .ok_or_else(|| Error::Parse(format!("bad checkpoint header field `{s}`")))?
                .to_string(),
        ),
    };

    let mut cur = &bytes[nl + 1..];
    let mut params = Vec::new();
    while !cur.is_empty() {
        let name_len = read_u32(&mut cur)? as usize;
        let name = take(&mut cur, name_len)?;
        let name = String::from_utf8(name.to_vec()).map_err(|e| Error::Parse(e.to_string()))?;
        let rank = read_u32(&mut cur)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut cur)? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = take(&mut cur, n * 8)?;
        let values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        params.push(Param::new(name, Tensor::new(shape, values)?));
    }
    Ok(Checkpoint { params, config_hash })
}

fn take<'a>(cur: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if cur.len() < n {
        return Err(Error::Parse("truncated checkpoint".into()));
    }
    let (head, tail) = cur.split_at(n);
    *cur = tail;
    Ok(head)
}

fn read_u32(cur: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(cur, 4)?.try_into().unwrap()))
}

fn read_u64(cur: &mut &[u8]) -> Result<u64> {
    Ok(u64::from_le_bytes(take(cur, 8)?.try_into().unwrap()))
}

/// Write via a temporary sibling file and rename, so readers never observe a
/// partial checkpoint.
pub fn save(path: &Path, params: &[&Param], config_hash: Option<&str>) -> Result<()> {
    write_atomic(path, &encode(params, config_hash))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let a = Param::new(
            "enc.w",
            Tensor::new(vec![2, 3], vec![0.1, -0.0, 1e-300, f64::MAX, -3.5, 7.0]).unwrap(),
        );
        let b = Param::new("tbl", Tensor::new(vec![1], vec![std::f64::consts::PI]).unwrap());
        let bytes = encode(&[&a, &b], Some("abc123"));
        assert!(bytes.starts_with(b"ckpt v1 config=abc123\n"));
        let ck = decode(&bytes).unwrap();
        assert_eq!(ck.config_hash.as_deref(), Some("abc123"));
        assert_eq!(ck.params, vec![a.clone(), b]);
        assert_eq!(ck.params[0].tensor.values()[1].to_bits(), (-0.0f64).to_bits());
        assert_eq!(encode(&[&a], None).len(), 8 + 4 + 5 + 4 + 16 + 48);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode(b"nope\n").is_err());
        let a = Param::new("x", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let bytes = encode(&[&a], None);
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
    }
}
