//! Per-pixel class-index maps (labels and predictions).

use crate::error::{ensure, Result};

/// A height x width grid of class indices. Values are class ids in `[0, K)`
/// plus optionally one reserved ignore label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMap {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl ClassMap {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        ensure!(
            data.len() == width * height,
            "class map {width}x{height} needs {} values, got {}",
            width * height,
            data.len()
        );
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }
}
