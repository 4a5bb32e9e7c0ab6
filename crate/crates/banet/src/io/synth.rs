//! Synthetic segmentation scenes for toy-scale training: colored
//! axis-aligned rectangles and discs over a textured background, one class
//! per shape slot, with exact per-pixel labels.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

use super::pnm::RgbImage;
use crate::error::{ensure, Result};
use crate::map::ClassMap;

/// Base colors for shape classes 1..K (class 0 is the background).
const CLASS_COLORS: [[u8; 3]; 8] = [
    [205, 50, 45],   // red
    [45, 90, 205],   // blue
    [230, 205, 60],  // yellow
    [170, 60, 190],  // purple
    [60, 200, 190],  // teal
    [235, 140, 40],  // orange
    [240, 240, 240], // white
    [30, 30, 30],    // near-black
];

/// Deterministic dataset of `n` scenes, `size`x`size`, `k` classes.
/// The same seed reproduces the same bytes.
pub fn synth_dataset(n: usize, size: usize, k: usize, seed: u64) -> Result<Vec<(RgbImage, ClassMap)>> {
    ensure!(n >= 1, "dataset needs at least one scene");
    ensure!(size >= 16, "scene size must be >= 16, got {size}");
    ensure!(
        (2..=CLASS_COLORS.len() + 1).contains(&k),
        "k must be in [2, {}], got {k}",
        CLASS_COLORS.len() + 1
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(scene(size, k, &mut rng));
    }
    Ok(out)
}

fn scene(size: usize, k: usize, rng: &mut ChaCha8Rng) -> (RgbImage, ClassMap) {
    let mut img = RgbImage::filled(size, size, [0; 3]);
    let mut map = ClassMap::filled(size, size, 0);

    // Background: muted green-gray modulated by three random plane waves.
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.05..0.4),
                rng.gen_range(0.05..0.4),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(6.0..18.0),
            )
        })
        .collect();
    for y in 0..size {
        for x in 0..size {
            let mut v = 0.0;
            for &(fy, fx, ph, amp) in &waves {
                v += amp * (fy * y as f64 + fx * x as f64 + ph).sin();
            }
            let g = (95.0 + v).clamp(0.0, 255.0) as u8;
            let r = (70.0 + 0.6 * v).clamp(0.0, 255.0) as u8;
            let b = (60.0 + 0.4 * v).clamp(0.0, 255.0) as u8;
            img.set_pixel(y, x, [r, g, b]);
        }
    }

    // Shapes: two or three per class, odd classes rectangles, even discs.
    for class in 1..k {
        let color = CLASS_COLORS[class - 1];
        let count = rng.gen_range(2..=3usize);
        for _ in 0..count {
            let jitter = |c: u8, rng: &mut ChaCha8Rng| {
                (c as i16 + rng.gen_range(-14..=14i16)).clamp(0, 255) as u8
            };
            let col = [
                jitter(color[0], rng),
                jitter(color[1], rng),
                jitter(color[2], rng),
            ];
            if class % 2 == 1 {
                let hw = rng.gen_range(size / 8..size / 4);
                let hh = rng.gen_range(size / 8..size / 4);
                let cy = rng.gen_range(0..size);
                let cx = rng.gen_range(0..size);
                for y in cy.saturating_sub(hh)..(cy + hh).min(size) {
                    for x in cx.saturating_sub(hw)..(cx + hw).min(size) {
                        img.set_pixel(y, x, col);
                        map.set(y, x, class as u8);
                    }
                }
            } else {
                let r = rng.gen_range(size / 8..size / 5) as isize;
                let cy = rng.gen_range(0..size) as isize;
                let cx = rng.gen_range(0..size) as isize;
                for y in (cy - r).max(0)..(cy + r + 1).min(size as isize) {
                    for x in (cx - r).max(0)..(cx + r + 1).min(size as isize) {
                        if (y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r {
                            img.set_pixel(y as usize, x as usize, col);
                            map.set(y as usize, x as usize, class as u8);
                        }
                    }
                }
            }
        }
    }
    (img, map)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_stay_in_range() {
        let set = synth_dataset(4, 32, 4, 0).unwrap();
        for (_, m) in &set {
            assert!(m.data().iter().all(|&v| v < 4));
        }
    }

    #[test]
    fn same_seed_reproduces_bytes() {
        let a = synth_dataset(3, 48, 4, 123).unwrap();
        let b = synth_dataset(3, 48, 4, 123).unwrap();
        assert_eq!(a, b);
        let c = synth_dataset(3, 48, 4, 124).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn class_histogram_is_nondegenerate() {
        // Every class holds at least 1% of the pixels across the set.
        let set = synth_dataset(8, 64, 4, 7).unwrap();
        let mut counts = [0usize; 4];
        let mut total = 0usize;
        for (_, m) in &set {
            for &v in m.data() {
                counts[v as usize] += 1;
                total += 1;
            }
        }
        for (c, &n) in counts.iter().enumerate() {
            assert!(
                n as f64 >= total as f64 * 0.01,
                "class {c} covers only {n}/{total} pixels"
            );
        }
    }
}
