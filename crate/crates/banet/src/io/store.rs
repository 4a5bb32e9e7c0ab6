//! BANW weight-store format.
//!
//! Layout: magic `BANW`, u8 version (=1), u32 little-endian entry count;
//! per entry a u16 name length, the UTF-8 name, then the tensor in the
//! same encoding as a BANT body (u8 rank, rank x u32 dims, f32 payload).
//! Entry order is preserved and round-trips are bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Weights;
use crate::tensor::serial::{read_tensor_body, Cursor};

pub const BANW_MAGIC: &[u8; 4] = b"BANW";
pub const BANW_VERSION: u8 = 1;

pub fn write_weights<W: Write>(w: &mut W, weights: &Weights<f32>) -> Result<()> {
    w.write_all(BANW_MAGIC)?;
    w.write_all(&[BANW_VERSION])?;
    w.write_all(&(weights.len() as u32).to_le_bytes())?;
    for (name, tensor) in weights.iter() {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(Error::InvalidArgument(format!(
                "weight name '{name}' exceeds the u16 length field"
            )));
        }
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&[tensor.rank() as u8])?;
        for &d in tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_weights<R: Read>(r: R) -> Result<Weights<f32>> {
    let mut c = Cursor::new(r);
    let mut magic = [0u8; 4];
    c.read_exact(&mut magic, "magic")?;
    if &magic != BANW_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {magic:?}, expected \"BANW\""),
        });
    }
    let version = c.u8("version")?;
    if version != BANW_VERSION {
        return c.fail(format!("unsupported BANW version {version}"));
    }
    let count = c.u32("entry count")?;
    let mut weights = Weights::new();
    for _ in 0..count {
        let name_len = c.u16("name length")? as usize;
        let mut name = vec![0u8; name_len];
        c.read_exact(&mut name, "name")?;
        let name = match String::from_utf8(name) {
            Ok(n) => n,
            Err(_) => return c.fail("weight name is not UTF-8"),
        };
        let tensor = read_tensor_body(&mut c)?;
        weights.insert(&name, tensor)?;
    }
    Ok(weights)
}

pub fn save_weights(path: &Path, weights: &Weights<f32>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_weights(&mut f, weights)?;
    f.flush()?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<Weights<f32>> {
    read_weights(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn sample() -> Weights<f32> {
        let mut w = Weights::new();
        w.insert("b.second", Tensor::from_fn(&[2, 3], |i| i as f32 * 0.5)).unwrap();
        w.insert("a.first", Tensor::from_fn(&[4], |i| -(i as f32))).unwrap();
        w
    }

    #[test]
    fn round_trip_preserves_tensors_and_order() {
        let w = sample();
        let mut buf = Vec::new();
        write_weights(&mut buf, &w).unwrap();
        let back = read_weights(&buf[..]).unwrap();
        assert_eq!(back, w);
        let names: Vec<&str> = back.iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["b.second", "a.first"]); // insertion order kept

        let mut buf2 = Vec::new();
        write_weights(&mut buf2, &back).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn truncation_is_a_format_error() {
        let mut buf = Vec::new();
        write_weights(&mut buf, &sample()).unwrap();
        for cut in [buf.len() - 1, buf.len() / 2, 6] {
            match read_weights(&buf[..cut]) {
                Err(Error::Format { .. }) => {}
                other => panic!("cut at {cut}: expected format error, got {other:?}"),
            }
        }
    }

    #[test]
    fn name_collision_is_rejected() {
        let mut w = Weights::new();
        w.insert("x", Tensor::zeros(&[1])).unwrap();
        let err = w.insert("x", Tensor::zeros(&[1])).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }
}
