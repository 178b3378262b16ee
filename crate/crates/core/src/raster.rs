//! Plain image and label-map containers shared by the data, augmentation
//! and metric modules.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A `[C, H, W]` real-valued image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels * height * width != data.len() {
            return Err(Error::invalid(format!(
                "image {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            channels: 1,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// The `size × size` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::invalid(format!(
                "crop {height}x{width} at ({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            for y in top..top + height {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + left..row + left + width]);
            }
        }
        Image::new(self.channels, height, width, data)
    }

    pub fn center_crop(&self, size: usize) -> Result<Image> {
        if size > self.height || size > self.width {
            return Err(Error::invalid(format!(
                "crop {size} larger than image {}x{}",
                self.height, self.width
            )));
        }
        self.crop((self.height - size) / 2, (self.width - size) / 2, size, size)
    }

    /// Stacks equally sized images into an `[N, C, H, W]` tensor.
    pub fn stack(images: &[&Image]) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::invalid("cannot stack zero images"))?;
        let dims = first.dims();
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            if img.dims() != dims {
                return Err(Error::shape(
                    "stack",
                    &[dims.0, dims.1, dims.2],
                    &[img.channels, img.height, img.width],
                ));
            }
            data.extend_from_slice(&img.data);
        }
        Tensor::new(vec![images.len(), dims.0, dims.1, dims.2], data)
    }
}

/// A `[H, W]` map of class indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height * width != data.len() {
            return Err(Error::invalid(format!(
                "label map {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn max_class(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Binary mask of the pixels labelled `class`.
    pub fn binary(&self, class: u8) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| v == class).collect(),
        }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<LabelMap> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::invalid("label crop out of bounds"));
        }
        let mut data = Vec::with_capacity(height * width);
        for y in top..top + height {
            let row = y * self.width;
            data.extend_from_slice(&self.data[row + left..row + left + width]);
        }
        LabelMap::new(height, width, data)
    }

    pub fn center_crop(&self, size: usize) -> Result<LabelMap> {
        if size > self.height || size > self.width {
            return Err(Error::invalid("label crop larger than map"));
        }
        self.crop((self.height - size) / 2, (self.width - size) / 2, size, size)
    }

    /// One-hot `[C, H, W]` encoding, flattened.
    pub fn one_hot(&self, classes: usize) -> Vec<f64> {
        let n = self.data.len();
        let mut out = vec![0.0; classes * n];
        for (i, &c) in self.data.iter().enumerate() {
            out[c as usize * n + i] = 1.0;
        }
        out
    }
}

/// A `[H, W]` boolean mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if height * width != data.len() {
            return Err(Error::invalid(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }
}
