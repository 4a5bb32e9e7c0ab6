//! Class palettes: a bijection between class indices and RGB colors, read
//! from text files of `name r g b` lines.

use std::path::Path;

use super::pnm::RgbImage;
use crate::error::{ensure, invalid, Error, Result};
use crate::map::ClassMap;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Palette {
    entries: Vec<(String, [u8; 3])>,
}

impl Palette {
    pub fn new(entries: Vec<(String, [u8; 3])>) -> Result<Self> {
        ensure!(entries.len() >= 2, "palette needs at least 2 classes");
        ensure!(entries.len() <= 255, "palette supports at most 255 classes");
        for i in 0..entries.len() {
            for j in i + 1..entries.len() {
                ensure!(
                    entries[i].1 != entries[j].1,
                    "classes '{}' and '{}' share color {:?}",
                    entries[i].0,
                    entries[j].0,
                    entries[i].1
                );
                ensure!(
                    entries[i].0 != entries[j].0,
                    "duplicate class name '{}'",
                    entries[i].0
                );
            }
        }
        Ok(Self { entries })
    }

    /// The conventional 6-class aerial-labeling palette this crate ships.
    pub fn isprs() -> Self {
        Self::new(vec![
            ("imp_surf".into(), [255, 255, 255]),
            ("building".into(), [0, 0, 255]),
            ("low_veg".into(), [0, 255, 255]),
            ("tree".into(), [0, 255, 0]),
            ("car".into(), [255, 255, 0]),
            ("clutter".into(), [255, 0, 0]),
        ])
        .expect("static palette")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn color(&self, class: usize) -> [u8; 3] {
        self.entries[class].1
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 4 {
                invalid!("palette line {}: expected 'name r g b', got '{line}'", lineno + 1);
            }
            let mut rgb = [0u8; 3];
            for (i, p) in parts[1..].iter().enumerate() {
                rgb[i] = p.parse::<u8>().map_err(|_| {
                    Error::InvalidArgument(format!(
                        "palette line {}: '{p}' is not a byte value",
                        lineno + 1
                    ))
                })?;
            }
            entries.push((parts[0].to_string(), rgb));
        }
        Self::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, [r, g, b]) in &self.entries {
            out.push_str(&format!("{name} {r} {g} {b}\n"));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn encode(&self, map: &ClassMap) -> Result<RgbImage> {
        let mut img = RgbImage::filled(map.width(), map.height(), [0, 0, 0]);
        for y in 0..map.height() {
            for x in 0..map.width() {
                let c = map.get(y, x) as usize;
                ensure!(
                    c < self.entries.len(),
                    "class {c} at (y={y}, x={x}) is outside the {}-class palette",
                    self.entries.len()
                );
                img.set_pixel(y, x, self.entries[c].1);
            }
        }
        Ok(img)
    }

    /// Colors not in the palette map to `fallback` when given, otherwise
    /// decoding fails naming the color and pixel.
    pub fn decode(&self, img: &RgbImage, fallback: Option<u8>) -> Result<ClassMap> {
        let mut map = ClassMap::filled(img.width, img.height, 0);
        for y in 0..img.height {
            for x in 0..img.width {
                let px = img.pixel(y, x);
                match self.entries.iter().position(|(_, c)| *c == px) {
                    Some(i) => map.set(y, x, i as u8),
                    None => match fallback {
                        Some(f) => map.set(y, x, f),
                        None => invalid!(
                            "color ({}, {}, {}) at (y={y}, x={x}) is not in the palette",
                            px[0],
                            px[1],
                            px[2]
                        ),
                    },
                }
            }
        }
        Ok(map)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_identity() {
        let p = Palette::isprs();
        let map = ClassMap::new(4, 2, vec![0, 1, 2, 3, 4, 5, 0, 3]).unwrap();
        let img = p.encode(&map).unwrap();
        assert_eq!(p.decode(&img, None).unwrap(), map);
    }

    #[test]
    fn single_class_map_is_single_color() {
        let p = Palette::isprs();
        let map = ClassMap::filled(3, 3, 1);
        let img = p.encode(&map).unwrap();
        assert!(img.data.chunks(3).all(|px| px == [0, 0, 255]));
    }

    #[test]
    fn unknown_color_names_pixel_or_falls_back() {
        let p = Palette::isprs();
        let mut img = p.encode(&ClassMap::filled(2, 2, 0)).unwrap();
        img.set_pixel(1, 0, [7, 7, 7]);
        let err = p.decode(&img, None).unwrap_err();
        assert!(err.to_string().contains("(7, 7, 7)"), "{err}");
        assert!(err.to_string().contains("y=1"), "{err}");
        let map = p.decode(&img, Some(255)).unwrap();
        assert_eq!(map.get(1, 0), 255);
    }

    #[test]
    fn text_round_trip_and_validation() {
        let p = Palette::isprs();
        let text = p.to_text();
        assert!(text.starts_with("imp_surf 255 255 255\n"));
        assert_eq!(Palette::parse(&text).unwrap(), p);

        assert!(Palette::parse("a 0 0 0\nb 0 0 0\n").is_err()); // duplicate color
        assert!(Palette::parse("a 0 0\n").is_err()); // wrong arity
        assert!(Palette::parse("a 0 0 999\nb 1 1 1\n").is_err()); // not a byte
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn random_round_trip(data in proptest::collection::vec(0u8..6, 36)) {
                let p = Palette::isprs();
                let map = ClassMap::new(6, 6, data).unwrap();
                let back = p.decode(&p.encode(&map).unwrap(), None).unwrap();
                prop_assert_eq!(back, map);
            }
        }
    }
}
