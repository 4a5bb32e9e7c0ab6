//! Binary PPM (P6) and PGM (P5) with an exact header grammar:
//! magic, then whitespace-separated width, height and maxval (255), with
//! `#` comments allowed inside the header whitespace, then a single
//! whitespace byte before the payload.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::map::ClassMap;
use crate::tensor::serial::Cursor;

/// Interleaved 8-bit RGB image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        crate::error::ensure!(
            data.len() == width * height * 3,
            "rgb image {width}x{height} needs {} bytes, got {}",
            width * height * 3,
            data.len()
        );
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

pub fn write_ppm<W: Write>(w: &mut W, img: &RgbImage) -> Result<()> {
    write!(w, "P6\n{} {}\n255\n", img.width, img.height)?;
    w.write_all(&img.data)?;
    Ok(())
}

pub fn write_pgm<W: Write>(w: &mut W, map: &ClassMap) -> Result<()> {
    write!(w, "P5\n{} {}\n255\n", map.width(), map.height())?;
    w.write_all(map.data())?;
    Ok(())
}

pub fn save_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_ppm(&mut f, img)?;
    std::io::Write::flush(&mut f)?;
    Ok(())
}

pub fn save_pgm(path: &Path, map: &ClassMap) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_pgm(&mut f, map)?;
    std::io::Write::flush(&mut f)?;
    Ok(())
}

/// Reads header whitespace, skipping `#` comments to end of line.
fn skip_space<R: Read>(c: &mut Cursor<R>) -> Result<u8> {
    loop {
        let b = c.u8("header whitespace")?;
        match b {
            b' ' | b'\t' | b'\r' | b'\n' => continue,
            b'#' => loop {
                if c.u8("header comment")? == b'\n' {
                    break;
                }
            },
            other => return Ok(other),
        }
    }
}

fn read_number<R: Read>(c: &mut Cursor<R>, what: &str) -> Result<usize> {
    let mut b = skip_space(c)?;
    if !b.is_ascii_digit() {
        return c.fail(format!("expected digit for {what}, got byte 0x{b:02x}"));
    }
    let mut v: usize = 0;
    loop {
        v = v
            .checked_mul(10)
            .and_then(|v| v.checked_add((b - b'0') as usize))
            .ok_or(Error::Format {
                offset: c.offset,
                msg: format!("{what} overflows"),
            })?;
        b = c.u8(what)?;
        if !b.is_ascii_digit() {
            break;
        }
    }
    // `b` must be the single whitespace byte terminating the field
    if !matches!(b, b' ' | b'\t' | b'\r' | b'\n') {
        return c.fail(format!("{what} not terminated by whitespace"));
    }
    Ok(v)
}

fn read_header<R: Read>(c: &mut Cursor<R>, magic: &[u8; 2]) -> Result<(usize, usize)> {
    let mut m = [0u8; 2];
    c.read_exact(&mut m, "magic")?;
    if &m != magic {
        return Err(Error::Format {
            offset: 0,
            msg: format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&m),
                String::from_utf8_lossy(magic)
            ),
        });
    }
    let width = read_number(c, "width")?;
    let height = read_number(c, "height")?;
    let maxval = read_number(c, "maxval")?;
    if maxval != 255 {
        return c.fail(format!("maxval must be 255, got {maxval}"));
    }
    if width == 0 || height == 0 {
        return c.fail(format!("degenerate image size {width}x{height}"));
    }
    Ok((width, height))
}

pub fn read_ppm<R: Read>(r: R) -> Result<RgbImage> {
    let mut c = Cursor::new(r);
    let (width, height) = read_header(&mut c, b"P6")?;
    let mut data = vec![0u8; width * height * 3];
    c.read_exact(&mut data, "pixel payload")?;
    RgbImage::new(width, height, data)
}

pub fn read_pgm<R: Read>(r: R) -> Result<ClassMap> {
    let mut c = Cursor::new(r);
    let (width, height) = read_header(&mut c, b"P5")?;
    let mut data = vec![0u8; width * height];
    c.read_exact(&mut data, "pixel payload")?;
    ClassMap::new(width, height, data)
}

pub fn load_ppm(path: &Path) -> Result<RgbImage> {
    read_ppm(std::io::BufReader::new(std::fs::File::open(path)?))
}

pub fn load_pgm(path: &Path) -> Result<ClassMap> {
    read_pgm(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Validates that every value of a loaded class map is a legal class index
/// (or the ignore label).
pub fn validate_classes(map: &ClassMap, k: usize, ignore: Option<u8>) -> Result<()> {
    for y in 0..map.height() {
        for x in 0..map.width() {
            let v = map.get(y, x);
            if Some(v) != ignore && v as usize >= k {
                crate::error::invalid!(
                    "class value {v} at (y={y}, x={x}) is outside [0, {k})"
                );
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_pixel_ppm_is_exactly_seventeen_bytes() {
        let img = RgbImage::new(2, 1, vec![255, 0, 0, 0, 0, 255]).unwrap();
        let mut buf = Vec::new();
        write_ppm(&mut buf, &img).unwrap();
        assert_eq!(buf.len(), 17);
        assert_eq!(&buf[..11], b"P6\n2 1\n255\n");
        assert_eq!(&buf[11..], &[255, 0, 0, 0, 0, 255]);
    }

    #[test]
    fn ppm_round_trip_bit_exact() {
        let img = RgbImage::new(3, 2, (0u8..18).collect()).unwrap();
        let mut buf = Vec::new();
        write_ppm(&mut buf, &img).unwrap();
        assert_eq!(read_ppm(&buf[..]).unwrap(), img);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut buf = b"P5\n# a comment\n2 2\n# another\n255\n".to_vec();
        buf.extend_from_slice(&[0, 1, 2, 3]);
        let m = read_pgm(&buf[..]).unwrap();
        assert_eq!(m.data(), &[0, 1, 2, 3]);
    }

    #[test]
    fn malformed_inputs_report_offsets() {
        let err = read_ppm(&b"P3\n2 2\n255\n"[..]).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");

        let mut buf = b"P6\n2 2\n255\n".to_vec();
        buf.extend_from_slice(&[1, 2, 3]); // 9 bytes short
        match read_ppm(&buf[..]).unwrap_err() {
            Error::Format { offset, msg } => {
                assert!(msg.contains("truncated"), "{msg}");
                assert!(offset >= 11);
            }
            other => panic!("unexpected {other:?}"),
        }

        let err = read_pgm(&b"P5\n2 2\n127\n"[..]).unwrap_err();
        assert!(err.to_string().contains("maxval"), "{err}");
    }

    #[test]
    fn class_validation_rejects_large_values() {
        let m = ClassMap::new(2, 1, vec![1, 6]).unwrap();
        assert!(validate_classes(&m, 6, None).is_err());
        assert!(validate_classes(&m, 7, None).is_ok());
        let m2 = ClassMap::new(2, 1, vec![1, 255]).unwrap();
        assert!(validate_classes(&m2, 6, Some(255)).is_ok());
    }
}
