//! Binary named-tensor container shared by checkpoints and corpus images.
//!
//! Layout: magic `CLOC`, format version (u16 LE), then records until EOF.
//! Each record is name length (u16), name bytes (UTF-8), rank (u8), one u32
//! per dimension, and the payload as little-endian f64.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CLOC";
pub const FORMAT_VERSION: u16 = 1;

pub fn encode(tensors: &[(&str, &Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for (name, t) in tensors {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
        let rank = u8::try_from(t.rank())
            .map_err(|_| Error::Format(format!("tensor {name} has rank {}", t.rank())))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Corruption {
                path: self.path.to_path_buf(),
                reason: format!("truncated while reading {what} at byte {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Decode a container. `path` is only used in error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("{}: bad magic bytes", path.display())));
    }
    let mut r = Reader { bytes, pos: 4, path };
    let version = r.u16("format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported format version {version}",
            path.display()
        )));
    }
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Corruption {
                path: path.to_path_buf(),
                reason: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = r.take(n * 8, &format!("payload of {name}"))?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Corruption {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn write(path: &Path, tensors: &[(&str, &Tensor)]) -> Result<()> {
    std::fs::write(path, encode(tensors)?).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Look up a tensor by name.
pub fn find<'a>(records: &'a [(String, Tensor)], name: &str, path: &Path) -> Result<&'a Tensor> {
    records
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Format(format!("{}: missing tensor `{name}`", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_bit_exact() {
        let t = Tensor::matrix(1, 2, vec![1.0, -2.0]).unwrap();
        let bytes = encode(&[("w", &t)]).unwrap();
        let mut want = b"CLOC".to_vec();
        want.extend([1, 0]);
        want.extend([1, 0, b'w', 2]);
        want.extend([1, 0, 0, 0, 2, 0, 0, 0]);
        want.extend(1.0f64.to_le_bytes());
        want.extend((-2.0f64).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn bad_magic_and_version() {
        let p = Path::new("x.ten");
        assert!(matches!(decode(b"NOPE\x01\x00", p), Err(Error::Format(_))));
        assert!(matches!(decode(b"CLOC\x02\x00", p), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_is_corruption() {
        let t = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let bytes = encode(&[("abc", &t), ("s", &Tensor::scalar(4.0))]).unwrap();
        let p = Path::new("y.ten");
        for cut in [7, 12, bytes.len() - 3] {
            assert!(matches!(decode(&bytes[..cut], p), Err(Error::Corruption { .. })), "cut {cut}");
        }
        let full = decode(&bytes, p).unwrap();
        assert_eq!(full[1].1.shape(), &[] as &[usize]);
    }
}
