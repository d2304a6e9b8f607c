//! Binary parameter checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! magic    8 bytes  "MUSECKPT"
//! version  u32
//! vocab    u64
//! hidden   u64
//! then per tensor until end of file:
//!   name_len u32, name (UTF-8), rows u64, cols u64, rows*cols f64 values (row-major)
//! ```
//!
//! Values are stored as `f64` whatever the in-memory scalar, so an `f64`
//! round trip is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::encoder::{ModelParams, Param};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"MUSECKPT";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<T: Scalar, W: Write>(params: &ModelParams<T>, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.vocab_size() as u64).to_le_bytes())?;
    w.write_all(&(params.hidden_dim() as u64).to_le_bytes())?;
    for &p in Param::ALL.iter() {
        let t = params.get(p);
        let name = p.name().as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(t.rows() as u64).to_le_bytes())?;
        w.write_all(&(t.cols() as u64).to_le_bytes())?;
        for &x in t.as_slice() {
            w.write_all(&x.as_f64().to_le_bytes())?;
        }
    }
    Ok(())
}

fn truncated(what: &str) -> Error {
    Error::Checkpoint(format!("truncated file while reading {what}"))
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| if e.kind() == ErrorKind::UnexpectedEof { truncated(what) } else { e.into() })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact_or(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

/// `Ok(None)` at a clean end of file.
fn read_name_len<R: Read>(r: &mut R) -> Result<Option<u32>> {
    let mut b = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match r.read(&mut b[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(truncated("tensor header")),
            Ok(n) => filled += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(Some(u32::from_le_bytes(b)))
}

const MAX_NAME: u32 = 256;

pub fn read_checkpoint<T: Scalar, R: Read>(mut r: R) -> Result<ModelParams<T>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| {
        if e.kind() == ErrorKind::UnexpectedEof {
            Error::NotCheckpoint("file shorter than the magic header".into())
        } else {
            e.into()
        }
    })?;
    if &magic != MAGIC {
        return Err(Error::NotCheckpoint("bad magic bytes".into()));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version} (expected {VERSION})")));
    }
    let vocab = read_u64(&mut r, "vocabulary size")? as usize;
    let hidden = read_u64(&mut r, "hidden dimension")? as usize;
    let mut slots: Vec<Option<Matrix<T>>> = vec![None; Param::ALL.len()];
    while let Some(len) = read_name_len(&mut r)? {
        if len > MAX_NAME {
            return Err(Error::Checkpoint(format!("tensor name length {len} too large")));
        }
        let mut name = vec![0u8; len as usize];
        read_exact_or(&mut r, &mut name, "tensor name")?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let p = Param::from_name(&name).ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{name}`")))?;
        let rows = read_u64(&mut r, "tensor shape")? as usize;
        let cols = read_u64(&mut r, "tensor shape")? as usize;
        if (rows, cols) != p.shape(vocab, hidden) {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {rows}x{cols}, expected {:?}",
                p.shape(vocab, hidden)
            )));
        }
        let mut data = Vec::with_capacity(rows * cols);
        let mut b = [0u8; 8];
        for _ in 0..rows * cols {
            read_exact_or(&mut r, &mut b, "tensor values")?;
            data.push(T::lit(f64::from_le_bytes(b)));
        }
        if slots[p.index()].replace(Matrix::from_vec(rows, cols, data)).is_some() {
            return Err(Error::Checkpoint(format!("tensor `{name}` appears twice")));
        }
    }
    let mut tensors = Vec::with_capacity(slots.len());
    for (p, slot) in Param::ALL.iter().zip(slots) {
        tensors.push(slot.ok_or_else(|| Error::Checkpoint(format!("missing tensor `{}`", p.name())))?);
    }
    ModelParams::from_tensors(vocab, hidden, tensors)
}

pub fn save_checkpoint<T: Scalar>(params: &ModelParams<T>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(params, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ModelParams<T>> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn bytes(p: &ModelParams<f64>) -> Vec<u8> {
        let mut b = Vec::new();
        write_checkpoint(p, &mut b).unwrap();
        b
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = ModelParams::<f64>::init(9, 4, &mut seeded(3));
        let b = bytes(&p);
        let q: ModelParams<f64> = read_checkpoint(b.as_slice()).unwrap();
        for (x, y) in p.tensors().iter().zip(q.tensors()) {
            assert!(x.as_slice().iter().zip(y.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        assert_eq!(bytes(&q), b);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p = ModelParams::<f64>::init(5, 3, &mut seeded(4));
        save_checkpoint(&p, &path).unwrap();
        assert_eq!(load_checkpoint::<f64>(&path).unwrap(), p);
    }

    #[test]
    fn every_truncation_is_an_error() {
        let b = bytes(&ModelParams::<f64>::init(3, 2, &mut seeded(5)));
        for cut in 0..b.len() {
            assert!(read_checkpoint::<f64, _>(&b[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn wrong_magic_and_version() {
        let mut b = bytes(&ModelParams::<f64>::init(3, 2, &mut seeded(6)));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint::<f64, _>(bad.as_slice()), Err(Error::NotCheckpoint(_))));
        b[8] = 2;
        let err = read_checkpoint::<f64, _>(b.as_slice()).unwrap_err();
        assert!(err.to_string().contains("version 2"), "{err}");
    }

    #[test]
    fn f32_params_load_through_f64() {
        let p = ModelParams::<f32>::init(4, 2, &mut seeded(7));
        let mut b = Vec::new();
        write_checkpoint(&p, &mut b).unwrap();
        let q: ModelParams<f32> = read_checkpoint(b.as_slice()).unwrap();
        assert_eq!(p, q);
    }
}
