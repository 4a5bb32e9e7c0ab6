//! Deterministic tiling of large scenes and logit stitching.
//!
//! Tile origins are row-major with the last row/column clamped to the scene
//! edge, so every pixel is covered and no tile reads out of bounds when the
//! scene is at least one tile large. Scenes smaller than the tile are
//! zero-padded on extraction and cropped back on stitching.

use crate::error::{ensure, invalid, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TilePlan {
    pub scene_h: usize,
    pub scene_w: usize,
    pub tile: usize,
    pub stride: usize,
    /// (y, x) tile origins, row-major.
    pub origins: Vec<(usize, usize)>,
}

fn axis_origins(size: usize, tile: usize, stride: usize) -> Vec<usize> {
    if size <= tile {
        return vec![0];
    }
    let mut v = Vec::new();
    let mut o = 0;
    while o + tile < size {
        v.push(o);
        o += stride;
    }
    v.push(size - tile);
    v
}

pub fn make_tile_plan(scene_h: usize, scene_w: usize, tile: usize, stride: usize) -> Result<TilePlan> {
    ensure!(tile >= 1, "tile size must be >= 1");
    ensure!(stride >= 1, "stride must be >= 1");
    ensure!(scene_h >= 1 && scene_w >= 1, "degenerate scene {scene_h}x{scene_w}");
    ensure!(
        stride <= tile,
        "stride {stride} > tile {tile} would leave uncovered pixels"
    );
    let ys = axis_origins(scene_h, tile, stride);
    let xs = axis_origins(scene_w, tile, stride);
    let mut origins = Vec::with_capacity(ys.len() * xs.len());
    for &y in &ys {
        for &x in &xs {
            origins.push((y, x));
        }
    }
    Ok(TilePlan { scene_h, scene_w, tile, stride, origins })
}

impl TilePlan {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }
}

/// Copies tile `i` out of a [1, C, H, W] scene tensor; regions beyond the
/// scene edge read zero.
pub fn extract(scene: &Tensor, plan: &TilePlan, i: usize) -> Result<Tensor> {
    ensure!(i < plan.origins.len(), "tile index {i} out of range");
    let (c, h, w) = (scene.dim(1), scene.dim(2), scene.dim(3));
    ensure!(
        scene.dim(0) == 1 && h == plan.scene_h && w == plan.scene_w,
        "scene shape {:?} does not match plan {}x{}",
        scene.shape(),
        plan.scene_h,
        plan.scene_w
    );
    let (oy, ox) = plan.origins[i];
    let t = plan.tile;
    let mut out = Tensor::zeros(&[1, c, t, t]);
    for ci in 0..c {
        for ty in 0..t.min(h.saturating_sub(oy)) {
            let src_row = (ci * h + oy + ty) * w + ox;
            let cols = t.min(w - ox);
            let dst_row = (ci * t + ty) * t;
            out.data_mut()[dst_row..dst_row + cols]
                .copy_from_slice(&scene.data()[src_row..src_row + cols]);
        }
    }
    Ok(out)
}

/// Reassembles per-tile logits into scene logits, averaging raw values
/// where tiles overlap. Accumulation follows plan order in f64.
pub fn stitch(tiles: &[Tensor], plan: &TilePlan) -> Result<Tensor> {
    ensure!(
        tiles.len() == plan.origins.len(),
        "{} tiles supplied for a {}-tile plan",
        tiles.len(),
        plan.origins.len()
    );
    ensure!(!tiles.is_empty(), "empty tile list");
    let c = tiles[0].dim(1);
    let t = plan.tile;
    for (i, tile) in tiles.iter().enumerate() {
        ensure!(
            tile.shape() == [1, c, t, t],
            "tile {i} has shape {:?}, expected [1, {c}, {t}, {t}]",
            tile.shape()
        );
    }
    let (h, w) = (plan.scene_h, plan.scene_w);
    let mut acc = vec![0.0f64; c * h * w];
    let mut cover = vec![0u32; h * w];
    for (tile, &(oy, ox)) in tiles.iter().zip(&plan.origins) {
        for ty in 0..t.min(h - oy) {
            for tx in 0..t.min(w - ox) {
                cover[(oy + ty) * w + ox + tx] += 1;
            }
        }
        for ci in 0..c {
            for ty in 0..t.min(h - oy) {
                let dst_row = (ci * h + oy + ty) * w + ox;
                let src_row = (ci * t + ty) * t;
                for tx in 0..t.min(w - ox) {
                    acc[dst_row + tx] += tile.data()[src_row + tx] as f64;
                }
            }
        }
    }
    if let Some(p) = cover.iter().position(|&v| v == 0) {
        invalid!("pixel (y={}, x={}) not covered by any tile", p / w, p % w);
    }
    let mut out = Tensor::zeros(&[1, c, h, w]);
    for ci in 0..c {
        for p in 0..h * w {
            out.data_mut()[ci * h * w + p] = (acc[ci * h * w + p] / cover[p] as f64) as f32;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_partition_has_four_tiles_and_round_trips() {
        let plan = make_tile_plan(1024, 1024, 512, 512).unwrap();
        assert_eq!(plan.origins, vec![(0, 0), (0, 512), (512, 0), (512, 512)]);
        let scene = Tensor::from_fn(&[1, 2, 1024, 1024], |i| ((i * 31) % 257) as f32);
        let tiles: Vec<Tensor> = (0..plan.len())
            .map(|i| extract(&scene, &plan, i).unwrap())
            .collect();
        let back = stitch(&tiles, &plan).unwrap();
        assert_eq!(back.data(), scene.data());
    }

    #[test]
    fn ragged_scene_clamps_last_origins() {
        let plan = make_tile_plan(700, 700, 512, 512).unwrap();
        assert_eq!(plan.origins, vec![(0, 0), (0, 188), (188, 0), (188, 188)]);
    }

    #[test]
    fn overlap_averages_contributions() {
        // Two constant tiles with different values; the overlap must be the mean.
        let plan = make_tile_plan(4, 6, 4, 2).unwrap();
        assert_eq!(plan.origins, vec![(0, 0), (0, 2)]);
        let a = Tensor::full(&[1, 1, 4, 4], 1.0);
        let b = Tensor::full(&[1, 1, 4, 4], 3.0);
        let out = stitch(&[a, b], &plan).unwrap();
        for y in 0..4 {
            for x in 0..6 {
                let v = out.data()[y * 6 + x];
                let want = if x < 2 {
                    1.0
                } else if x < 4 {
                    2.0
                } else {
                    3.0
                };
                assert_eq!(v, want, "pixel ({y}, {x})");
            }
        }
    }

    #[test]
    fn constant_tiles_stay_constant_under_overlap() {
        let plan = make_tile_plan(6, 6, 4, 2).unwrap();
        let tiles: Vec<Tensor> = (0..plan.len()).map(|_| Tensor::full(&[1, 1, 4, 4], 2.5)).collect();
        let out = stitch(&tiles, &plan).unwrap();
        assert!(out.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn small_scene_pads_and_crops() {
        let plan = make_tile_plan(3, 3, 4, 4).unwrap();
        assert_eq!(plan.origins, vec![(0, 0)]);
        let scene = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f32 + 1.0);
        let tile = extract(&scene, &plan, 0).unwrap();
        assert_eq!(tile.shape(), &[1, 1, 4, 4]);
        assert_eq!(tile.data()[3], 0.0); // padded column
        let back = stitch(&[tile], &plan).unwrap();
        assert_eq!(back.shape(), &[1, 1, 3, 3]);
        assert_eq!(back.data(), scene.data());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn every_pixel_is_covered(
                h in 1usize..80, w in 1usize..80,
                tile in 1usize..40, stride_frac in 1usize..40,
            ) {
                let stride = stride_frac.min(tile);
                let plan = make_tile_plan(h, w, tile, stride).unwrap();
                let mut cover = vec![false; h * w];
                for &(oy, ox) in &plan.origins {
                    prop_assert!(oy + tile >= h.min(oy + tile));
                    for y in oy..(oy + tile).min(h) {
                        for x in ox..(ox + tile).min(w) {
                            cover[y * w + x] = true;
                        }
                    }
                }
                prop_assert!(cover.iter().all(|&c| c), "{h}x{w} tile {tile} stride {stride}");
            }

            #[test]
            fn exact_partition_reassembles(seed in 0u64..500) {
                use rand::{Rng, SeedableRng};
                let mut r = rand::rngs::StdRng::seed_from_u64(seed);
                let scene = Tensor::from_fn(&[1, 3, 8, 12], |_| r.gen_range(-4.0f32..4.0));
                let plan = make_tile_plan(8, 12, 4, 4).unwrap();
                let tiles: Vec<Tensor> = (0..plan.len()).map(|i| extract(&scene, &plan, i).unwrap()).collect();
                let back = stitch(&tiles, &plan).unwrap();
                prop_assert_eq!(back.data(), scene.data());
            }
        }
    }
}
