//! BANT tensor file format.
//!
//! Layout: magic `BANT`, u8 version (=1), u8 rank, rank x u32 little-endian
//! dims, then the row-major payload as little-endian 32-bit floats.
//! Round-trips are bit-exact.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const BANT_MAGIC: &[u8; 4] = b"BANT";
pub const BANT_VERSION: u8 = 1;

pub fn write_bant<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(BANT_MAGIC)?;
    w.write_all(&[BANT_VERSION, t.rank() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_bant(path: &std::path::Path, t: &Tensor) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_bant(&mut f, t)?;
    f.flush()?;
    Ok(())
}

/// Tracks the byte offset so format errors can point at the failing byte.
pub(crate) struct Cursor<R> {
    inner: R,
    pub offset: usize,
}

impl<R: Read> Cursor<R> {
    pub fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    pub fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len();
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(Error::Format {
                offset: self.offset,
                msg: format!("truncated file while reading {what}"),
            }),
            Err(e) => Err(e.into()),
        }
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.read_exact(&mut b, what)?;
        Ok(b[0])
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.read_exact(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: self.offset,
            msg: msg.into(),
        })
    }
}

pub(crate) fn read_tensor_body<R: Read>(c: &mut Cursor<R>) -> Result<Tensor> {
    let rank = c.u8("tensor rank")? as usize;
    if rank == 0 || rank > 8 {
        return c.fail(format!("unsupported tensor rank {rank}"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = c.u32("tensor dim")? as usize;
        if d == 0 {
            return c.fail("zero dimension in tensor shape");
        }
        shape.push(d);
    }
    let n: usize = shape.iter().product();
    let mut payload = vec![0u8; n * 4];
    c.read_exact(&mut payload, "tensor payload")?;
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(shape, data)
}

pub fn read_bant<R: Read>(r: R) -> Result<Tensor> {
    let mut c = Cursor::new(r);
    let mut magic = [0u8; 4];
    c.read_exact(&mut magic, "magic")?;
    if &magic != BANT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {magic:?}, expected \"BANT\""),
        });
    }
    let version = c.u8("version")?;
    if version != BANT_VERSION {
        return c.fail(format!("unsupported BANT version {version}"));
    }
    read_tensor_body(&mut c)
}

pub fn load_bant(path: &std::path::Path) -> Result<Tensor> {
    read_bant(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| (i as f32).sin() * 1e-3 + i as f32);
        let mut buf = Vec::new();
        write_bant(&mut buf, &t).unwrap();
        // header: 4 magic + 1 version + 1 rank + 3*4 dims
        assert_eq!(buf.len(), 4 + 2 + 12 + 24 * 4);
        let back = read_bant(&buf[..]).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn truncation_and_bad_magic_are_format_errors() {
        let t = Tensor::full(&[4], 1.0);
        let mut buf = Vec::new();
        write_bant(&mut buf, &t).unwrap();
        let err = read_bant(&buf[..buf.len() - 3]).unwrap_err();
        match err {
            crate::error::Error::Format { offset, .. } => assert!(offset > 0),
            other => panic!("expected format error, got {other:?}"),
        }
        let err = read_bant(&b"BOGUS garbage"[..]).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }
}
