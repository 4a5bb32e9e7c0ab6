//! File formats, tiling, augmentation, and the synthetic dataset.

pub mod augment;
pub mod palette;
pub mod pnm;
pub mod store;
pub mod synth;
pub mod tile;

pub use augment::augment;
pub use palette::Palette;
pub use pnm::RgbImage;
pub use store::{load_weights, save_weights};
pub use synth::synth_dataset;
pub use tile::{extract, make_tile_plan, stitch, TilePlan};
