//! Synthetic class-imbalanced "echo-like" images, the ECAP file format, and
//! stratified splitting.

pub mod ecap;
mod split;
mod synth;

pub use split::split;
pub use synth::{chamber_mask, generate, generate_phase, Interval, Phase, SynthConfig};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Label of the positive (dilated) class.
pub const POSITIVE_CLASS: usize = 1;

/// In-memory image dataset. Pixels and targets are stored at 32-bit
/// precision, matching the file format.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// `n · C · H · W` pixel values, sample-major, row-major within a sample.
    pub pixels: Vec<f32>,
    pub labels: Vec<u8>,
    /// Chamber width divided by image height.
    pub y_reg: Vec<f32>,
}

/// A batch converted to tensors for a forward pass.
#[derive(Clone, Debug)]
pub struct SampleBatch {
    /// `[B, C, H, W]` in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// `[B]`
    pub y_reg: Tensor,
}

impl Dataset {
    pub fn empty(channels: usize, height: usize, width: usize) -> Self {
        Dataset {
            channels,
            height,
            width,
            pixels: Vec::new(),
            labels: Vec::new(),
            y_reg: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l as usize == POSITIVE_CLASS).count()
    }

    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }

    pub fn push(&mut self, image: &[f32], label: u8, y_reg: f32) {
        debug_assert_eq!(image.len(), self.sample_len());
        self.pixels.extend_from_slice(image);
        self.labels.push(label);
        self.y_reg.push(y_reg);
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut out = Dataset::empty(self.channels, self.height, self.width);
        for &i in indices {
            out.push(self.image(i), self.labels[i], self.y_reg[i]);
        }
        out
    }

    pub fn batch(&self, indices: &[usize]) -> Result<SampleBatch> {
        if indices.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let n = self.sample_len();
        let mut px = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            px.extend(self.image(i).iter().map(|&v| v as f64));
        }
        Ok(SampleBatch {
            images: Tensor::new([indices.len(), self.channels, self.height, self.width], px)?,
            labels: indices.iter().map(|&i| self.labels[i] as usize).collect(),
            y_reg: Tensor::vector(indices.iter().map(|&i| self.y_reg[i] as f64).collect()),
        })
    }
}
