//! Flat little-endian binary containers.
//!
//! `CAW1` holds one observed dataset:
//! `magic | u32 version | u8 domain | u32 d_w | u32 obs_dim | u64 count | f64 latents.. | f64 observations..`
//!
//! `CASP` holds a tensor list with a JSON header:
//! `magic | u32 version | u32 header_len | header bytes | u32 tensor_count | (u32 rows | u32 cols | f64 data..)*`

use std::io::{Read, Write};
use std::path::Path;

use crate::nn::Matrix;
use crate::world::{Domain, ObservedDataset};
use crate::{CaError, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"CAW1";
pub const PARAMS_MAGIC: &[u8; 4] = b"CASP";
pub const DATASET_VERSION: u32 = 1;
pub const PARAMS_VERSION: u32 = 1;

/// Writes `bytes` to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| CaError::Io(format!("{}: not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| CaError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| CaError::io(&tmp, e))?;
        f.sync_all().map_err(|e| CaError::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| CaError::io(path, e))
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    out.reserve(xs.len() * 8);
    for v in xs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(CaError::Compat("container truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| CaError::Compat("container size overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != want {
            return Err(CaError::Compat(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(want)
            )));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(CaError::Compat(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn encode_dataset(ds: &ObservedDataset) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.push(ds.domain.code());
    out.extend_from_slice(&(ds.latents.cols() as u32).to_le_bytes());
    out.extend_from_slice(&(ds.observations.cols() as u32).to_le_bytes());
    out.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    put_f64s(&mut out, ds.latents.data());
    put_f64s(&mut out, ds.observations.data());
    out
}

pub fn decode_dataset(buf: &[u8]) -> Result<ObservedDataset> {
    let mut r = Reader { buf, pos: 0 };
    r.magic(DATASET_MAGIC)?;
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(CaError::Compat(format!("dataset version {version} unsupported")));
    }
    let domain = Domain::from_code(r.u8()?).ok_or_else(|| CaError::Compat("unknown domain code".into()))?;
    let d_w = r.u32()? as usize;
    let obs = r.u32()? as usize;
    let n = r.u64()? as usize;
    let latents = Matrix::from_vec(n, d_w, r.f64s(n * d_w)?)?;
    let observations = Matrix::from_vec(n, obs, r.f64s(n * obs)?)?;
    r.finish()?;
    Ok(ObservedDataset { domain, latents, observations })
}

pub fn save_dataset(ds: &ObservedDataset, path: &Path) -> Result<()> {
    write_atomic(path, &encode_dataset(ds))
}

pub fn load_dataset(path: &Path) -> Result<ObservedDataset> {
    decode_dataset(&read_file(path)?)
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| CaError::io(path, e))?;
    Ok(buf)
}

pub fn encode_tensors(header: &str, tensors: &[&Matrix]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(PARAMS_MAGIC);
    out.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        put_f64s(&mut out, t.data());
    }
    out
}

pub fn decode_tensors(buf: &[u8]) -> Result<(String, Vec<Matrix>)> {
    let mut r = Reader { buf, pos: 0 };
    r.magic(PARAMS_MAGIC)?;
    let version = r.u32()?;
    if version != PARAMS_VERSION {
        return Err(CaError::Compat(format!("parameter file version {version} unsupported")));
    }
    let hlen = r.u32()? as usize;
    let header = String::from_utf8(r.take(hlen)?.to_vec()).map_err(|_| CaError::Compat("header is not UTF-8".into()))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        tensors.push(Matrix::from_vec(rows, cols, r.f64s(rows * cols)?)?);
    }
    r.finish()?;
    Ok((header, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_round_trip() {
        let ds = ObservedDataset {
            domain: Domain::Y,
            latents: Matrix::from_rows(&[[1.0, -2.5], [0.0, 3.25]]).unwrap(),
            observations: Matrix::from_rows(&[[1.0], [2.0]]).unwrap(),
        };
        let bytes = encode_dataset(&ds);
        assert_eq!(&bytes[..4], b"CAW1");
        assert_eq!(decode_dataset(&bytes).unwrap(), ds);
        assert!(decode_dataset(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn tensors_round_trip() {
        let a = Matrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        let b = Matrix::zeros(2, 2);
        let bytes = encode_tensors("{\"k\":1}", &[&a, &b]);
        let (h, ts) = decode_tensors(&bytes).unwrap();
        assert_eq!(h, "{\"k\":1}");
        assert_eq!(ts, vec![a, b]);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_tensors(&bad), Err(CaError::Compat(_))));
    }
}
