//! Training-time augmentation: quarter-turn rotation, flips, and random
//! rescaling, each stage applied independently with probability 0.5.
//!
//! The image resamples bilinearly, the label map by nearest neighbor, so no
//! interpolated label values can appear. After rescaling, the pair is
//! center-cropped (upscale) or reflect-padded (downscale) back to its
//! original size; label geometry always matches image geometry.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::pnm::RgbImage;
use crate::map::ClassMap;

/// Scale factor range for the resize stage.
pub const SCALE_RANGE: (f64, f64) = (0.75, 1.25);

/// Quarter-turn rotation, counterclockwise, `k` in 0..=3.
pub fn rot90_image(img: &RgbImage, k: usize) -> RgbImage {
    match k % 4 {
        0 => img.clone(),
        1 => {
            let mut out = RgbImage::filled(img.height, img.width, [0; 3]);
            for y in 0..img.height {
                for x in 0..img.width {
                    out.set_pixel(img.width - 1 - x, y, img.pixel(y, x));
                }
            }
            out
        }
        2 => {
            let mut out = RgbImage::filled(img.width, img.height, [0; 3]);
            for y in 0..img.height {
                for x in 0..img.width {
                    out.set_pixel(img.height - 1 - y, img.width - 1 - x, img.pixel(y, x));
                }
            }
            out
        }
        _ => {
            let mut out = RgbImage::filled(img.height, img.width, [0; 3]);
            for y in 0..img.height {
                for x in 0..img.width {
                    out.set_pixel(x, img.height - 1 - y, img.pixel(y, x));
                }
            }
            out
        }
    }
}

pub fn rot90_map(map: &ClassMap, k: usize) -> ClassMap {
    match k % 4 {
        0 => map.clone(),
        1 => {
            let mut out = ClassMap::filled(map.height(), map.width(), 0);
            for y in 0..map.height() {
                for x in 0..map.width() {
                    out.set(map.width() - 1 - x, y, map.get(y, x));
                }
            }
            out
        }
        2 => {
            let mut out = ClassMap::filled(map.width(), map.height(), 0);
            for y in 0..map.height() {
                for x in 0..map.width() {
                    out.set(map.height() - 1 - y, map.width() - 1 - x, map.get(y, x));
                }
            }
            out
        }
        _ => {
            let mut out = ClassMap::filled(map.height(), map.width(), 0);
            for y in 0..map.height() {
                for x in 0..map.width() {
                    out.set(x, map.height() - 1 - y, map.get(y, x));
                }
            }
            out
        }
    }
}

fn flip_h(img: &RgbImage, map: &ClassMap) -> (RgbImage, ClassMap) {
    let mut oi = img.clone();
    let mut om = map.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            oi.set_pixel(y, img.width - 1 - x, img.pixel(y, x));
            om.set(y, img.width - 1 - x, map.get(y, x));
        }
    }
    (oi, om)
}

fn flip_v(img: &RgbImage, map: &ClassMap) -> (RgbImage, ClassMap) {
    let mut oi = img.clone();
    let mut om = map.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            oi.set_pixel(img.height - 1 - y, x, img.pixel(y, x));
            om.set(img.height - 1 - y, x, map.get(y, x));
        }
    }
    (oi, om)
}

/// Bilinear resize with half-pixel centers, rounded to u8.
fn resize_image(img: &RgbImage, nh: usize, nw: usize) -> RgbImage {
    let mut out = RgbImage::filled(nw, nh, [0; 3]);
    let fy = img.height as f64 / nh as f64;
    let fx = img.width as f64 / nw as f64;
    for y in 0..nh {
        let sy = ((y as f64 + 0.5) * fy - 0.5).clamp(0.0, (img.height - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let wy = sy - y0 as f64;
        for x in 0..nw {
            let sx = ((x as f64 + 0.5) * fx - 0.5).clamp(0.0, (img.width - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let wx = sx - x0 as f64;
            let mut px = [0u8; 3];
            for c in 0..3 {
                let v00 = img.pixel(y0, x0)[c] as f64;
                let v01 = img.pixel(y0, x1)[c] as f64;
                let v10 = img.pixel(y1, x0)[c] as f64;
                let v11 = img.pixel(y1, x1)[c] as f64;
                let v = (v00 * (1.0 - wx) + v01 * wx) * (1.0 - wy)
                    + (v10 * (1.0 - wx) + v11 * wx) * wy;
                px[c] = v.round().clamp(0.0, 255.0) as u8;
            }
            out.set_pixel(y, x, px);
        }
    }
    out
}

/// Nearest-neighbor resize; preserves the label alphabet.
fn resize_map(map: &ClassMap, nh: usize, nw: usize) -> ClassMap {
    let mut out = ClassMap::filled(nw, nh, 0);
    let fy = map.height() as f64 / nh as f64;
    let fx = map.width() as f64 / nw as f64;
    for y in 0..nh {
        let sy = (((y as f64 + 0.5) * fy - 0.5).round().max(0.0) as usize).min(map.height() - 1);
        for x in 0..nw {
            let sx = (((x as f64 + 0.5) * fx - 0.5).round().max(0.0) as usize).min(map.width() - 1);
            out.set(y, x, map.get(sy, sx));
        }
    }
    out
}

/// Mirror index with edge duplication: ... 1 0 | 0 1 ... n-1 | n-1 n-2 ...
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Center-crops or reflect-pads back to (h, w).
fn fit_to(img: &RgbImage, map: &ClassMap, h: usize, w: usize) -> (RgbImage, ClassMap) {
    let off_y = img.height as isize - h as isize;
    let off_x = img.width as isize - w as isize;
    let (oy, ox) = (off_y.div_euclid(2), off_x.div_euclid(2));
    let mut oi = RgbImage::filled(w, h, [0; 3]);
    let mut om = ClassMap::filled(w, h, 0);
    for y in 0..h {
        let sy = reflect(y as isize + oy, img.height);
        for x in 0..w {
            let sx = reflect(x as isize + ox, img.width);
            oi.set_pixel(y, x, img.pixel(sy, sx));
            om.set(y, x, map.get(sy, sx));
        }
    }
    (oi, om)
}

/// One augmentation draw over an image/label pair.
pub fn augment(image: &RgbImage, label: &ClassMap, rng: &mut ChaCha8Rng) -> (RgbImage, ClassMap) {
    let mut img = image.clone();
    let mut map = label.clone();
    if rng.gen_bool(0.5) {
        let k = rng.gen_range(1..=3usize);
        img = rot90_image(&img, k);
        map = rot90_map(&map, k);
    }
    if rng.gen_bool(0.5) {
        let (i, m) = flip_h(&img, &map);
        img = i;
        map = m;
    }
    if rng.gen_bool(0.5) {
        let (i, m) = flip_v(&img, &map);
        img = i;
        map = m;
    }
    if rng.gen_bool(0.5) {
        let s = rng.gen_range(SCALE_RANGE.0..SCALE_RANGE.1);
        let nh = ((image.height as f64 * s).round() as usize).max(1);
        let nw = ((image.width as f64 * s).round() as usize).max(1);
        let ri = resize_image(&img, nh, nw);
        let rm = resize_map(&map, nh, nw);
        let (i, m) = fit_to(&ri, &rm, image.height, image.width);
        img = i;
        map = m;
    }
    (img, map)
}
