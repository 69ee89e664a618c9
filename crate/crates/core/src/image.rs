//! Planar floating-point images and the resampling they need.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `channels × height × width` image, channel-major, values nominally in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "image {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_fn(channels: usize, height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Image {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Replicate a single channel to `channels`; other channel counts must
    /// already match.
    pub fn with_channels(self, channels: usize) -> Result<Self> {
        if self.channels == channels {
            return Ok(self);
        }
        if self.channels != 1 {
            return Err(Error::Shape(format!(
                "cannot map {} channels to {channels}",
                self.channels
            )));
        }
        let data = self.data.repeat(channels);
        Ok(Image {
            channels,
            data,
            ..self
        })
    }

    /// Bilinear resample of the rectangle `(x, y, h, w)` to `out_h × out_w`
    /// with half-pixel centers; samples are clamped to the rectangle.
    pub fn resize_region(&self, x0: usize, y0: usize, h: usize, w: usize, out_h: usize, out_w: usize) -> Image {
        let sy = h as f64 / out_h as f64;
        let sx = w as f64 / out_w as f64;
        let axis = |i: usize, scale: f64, len: usize| -> (usize, usize, f64) {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(len - 1);
            (lo, hi, src - lo as f64)
        };
        let ys: Vec<_> = (0..out_h).map(|i| axis(i, sy, h)).collect();
        let xs: Vec<_> = (0..out_w).map(|i| axis(i, sx, w)).collect();
        Image::from_fn(self.channels, out_h, out_w, |c, oy, ox| {
            let (y1, y2, fy) = ys[oy];
            let (x1, x2, fx) = xs[ox];
            let p = |y: usize, x: usize| self.at(c, y0 + y, x0 + x);
            let top = p(y1, x1) * (1.0 - fx) + p(y1, x2) * fx;
            let bot = p(y2, x1) * (1.0 - fx) + p(y2, x2) * fx;
            top * (1.0 - fy) + bot * fy
        })
    }

    pub fn resize(&self, out_h: usize, out_w: usize) -> Image {
        self.resize_region(0, 0, self.height, self.width, out_h, out_w)
    }

    /// Central `h × w` window.
    pub fn center_crop(&self, h: usize, w: usize) -> Result<Image> {
        if h > self.height || w > self.width {
            return Err(Error::Shape(format!(
                "crop {h}x{w} larger than image {}x{}",
                self.height, self.width
            )));
        }
        let y0 = (self.height - h) / 2;
        let x0 = (self.width - w) / 2;
        Ok(Image::from_fn(self.channels, h, w, |c, y, x| self.at(c, y0 + y, x0 + x)))
    }

    pub fn clamp01(mut self) -> Image {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    /// Stack equally sized images into a `(B, C, H, W)` tensor.
    pub fn batch(images: &[Image]) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| Error::Empty("image batch".into()))?;
        let (c, h, w) = (first.channels, first.height, first.width);
        let mut data = Vec::with_capacity(images.len() * c * h * w);
        for im in images {
            if (im.channels, im.height, im.width) != (c, h, w) {
                return Err(Error::Shape("images in a batch must share a shape".into()));
            }
            data.extend_from_slice(&im.data);
        }
        Tensor::new(vec![images.len(), c, h, w], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_resize_is_identity() {
        let im = Image::from_fn(2, 5, 7, |c, y, x| (c * 100 + y * 10 + x) as f64);
        assert_eq!(im.resize(5, 7), im);
    }

    #[test]
    fn constant_stays_constant() {
        let im = Image::filled(1, 9, 4, 0.25);
        assert!(im.resize(13, 3).data.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn replicate_gray() {
        let im = Image::from_fn(1, 2, 2, |_, y, x| (y * 2 + x) as f64);
        let rgb = im.clone().with_channels(3).unwrap();
        for c in 0..3 {
            assert_eq!(rgb.plane(c), im.plane(0));
        }
    }
}
