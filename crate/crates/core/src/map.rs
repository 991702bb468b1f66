use numcore::Tensor;

use crate::{contract, Result};

/// Dense `C × H × W` grid of token features.
///
/// Storage is channels-last: the feature vector of cell `(y, x)` is the
/// contiguous slice returned by [`FeatureMap::token`].
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    /// Builds a map from `f(c, y, x)`.
    pub fn from_fn(channels: usize, height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(channels, height, width);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    m.data[(y * width + x) * channels + c] = f(c, y, x);
                }
            }
        }
        m
    }

    /// From a `[C, H, W]` tensor.
    pub fn from_chw(t: &Tensor) -> Result<Self> {
        let &[c, h, w] = t.shape() else {
            return Err(contract(format!("expected a C×H×W tensor, got {:?}", t.shape())));
        };
        let src = t.data();
        Ok(Self::from_fn(c, h, w, |ci, y, x| src[(ci * h + y) * w + x]))
    }

    /// From a channels-last `[H, W, C]` or `[1, H, W, C]` tensor.
    pub fn from_hwc(t: &Tensor) -> Result<Self> {
        let (h, w, c) = match *t.shape() {
            [h, w, c] | [1, h, w, c] => (h, w, c),
            _ => return Err(contract(format!("expected an H×W×C tensor, got {:?}", t.shape()))),
        };
        Ok(Self {
            channels: c,
            height: h,
            width: w,
            data: t.data().to_vec(),
        })
    }

    pub fn to_chw(&self) -> Tensor {
        let (c, h, w) = (self.channels, self.height, self.width);
        Tensor::from_fn([c, h, w], |i| {
            let (ci, rest) = (i / (h * w), i % (h * w));
            self.data[rest * c + ci]
        })
    }

    /// `[1, H, W, C]`, the graph layout.
    pub fn to_batch(&self) -> Tensor {
        Tensor::from_parts([1, self.height, self.width, self.channels], self.data.clone())
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn token(&self, y: usize, x: usize) -> &[f64] {
        let c = self.channels;
        &self.data[(y * self.width + x) * c..][..c]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}
