//! RGB images in `[-1, 1]` and their PNG encoding.

use std::io::Cursor;
use std::path::Path;

use dorm_tensor::Tensor;
use image::{imageops::FilterType, ImageFormat, RgbImage};

use crate::error::{ensure, Result};

/// One RGB image, stored channel-major as `[3, H, W]` with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pixels: Tensor<f32>,
}

impl ImageTensor {
    pub fn new(pixels: Tensor<f32>) -> Result<Self> {
        ensure!(
            pixels.ndim() == 3 && pixels.dim(0) == 3,
            "image must be [3, H, W], got {:?}",
            pixels.shape()
        );
        ensure!(pixels.all_finite(), "image contains non-finite values");
        Ok(Self { pixels })
    }

    pub fn constant(resolution: usize, rgb: [f32; 3]) -> Self {
        let plane = resolution * resolution;
        let data = (0..3 * plane).map(|i| rgb[i / plane]).collect();
        Self {
            pixels: Tensor::new(vec![3, resolution, resolution], data),
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.dim(1)
    }

    pub fn width(&self) -> usize {
        self.pixels.dim(2)
    }

    pub fn resolution(&self) -> usize {
        self.height()
    }

    pub fn pixels(&self) -> &Tensor<f32> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Tensor<f32> {
        self.pixels
    }

    /// Mirror left-right.
    pub fn flip_x(&self) -> Self {
        let (h, w) = (self.height(), self.width());
        let src = self.pixels.data();
        let mut data = vec![0.0; src.len()];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data[(c * h + y) * w + x] = src[(c * h + y) * w + (w - 1 - x)];
                }
            }
        }
        Self {
            pixels: Tensor::new(vec![3, h, w], data),
        }
    }

    /// `[-1, 1] -> [0, 255]` via `round(127.5 (x + 1))`, clamped.
    pub fn to_rgb8(&self) -> RgbImage {
        let (h, w) = (self.height(), self.width());
        let d = self.pixels.data();
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| {
                let v = d[(c * h + y as usize) * w + x as usize];
                (127.5 * (v + 1.0)).round().clamp(0.0, 255.0) as u8
            };
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * h * w];
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = p.0[c] as f32 / 127.5 - 1.0;
            }
        }
        Self {
            pixels: Tensor::new(vec![3, h, w], data),
        }
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_png_bytes()?)?;
        Ok(())
    }

    /// Load any PNG/JPEG, resized to `resolution` square when needed.
    pub fn load(path: &Path, resolution: usize) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let img = if img.width() as usize == resolution && img.height() as usize == resolution {
            img
        } else {
            image::imageops::resize(
                &img,
                resolution as u32,
                resolution as u32,
                FilterType::Triangle,
            )
        };
        Ok(Self::from_rgb8(&img))
    }
}

/// Stack images into an NCHW batch.
pub fn stack(images: &[&ImageTensor]) -> Tensor<f32> {
    assert!(!images.is_empty(), "empty image batch");
    let shape = images[0].pixels.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * images[0].pixels.numel());
    for img in images {
        assert_eq!(img.pixels.shape(), &shape[..], "mixed image sizes in batch");
        data.extend_from_slice(img.pixels.data());
    }
    Tensor::new(vec![images.len(), shape[0], shape[1], shape[2]], data)
}

/// Split an NCHW batch back into images.
pub fn unstack(batch: &Tensor<f32>) -> Vec<ImageTensor> {
    let n = batch.dim(0);
    (0..n)
        .map(|i| {
            let t = batch.narrow(0, i, 1);
            let s = t.shape()[1..].to_vec();
            ImageTensor {
                pixels: t.reshape(s),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb8_mapping_rounds_and_clamps() {
        let mut t = Tensor::<f32>::zeros(vec![3, 1, 3]);
        t.data_mut()[..3].copy_from_slice(&[-1.5, 0.0, 1.0]);
        let img = ImageTensor::new(t).unwrap();
        let rgb = img.to_rgb8();
        assert_eq!(rgb.get_pixel(0, 0).0[0], 0);
        assert_eq!(rgb.get_pixel(1, 0).0[0], 128); // round(127.5)
        assert_eq!(rgb.get_pixel(2, 0).0[0], 255);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(ImageTensor::new(Tensor::zeros(vec![1, 4, 4])).is_err());
    }

    #[test]
    fn stack_roundtrip() {
        let a = ImageTensor::constant(4, [0.1, 0.2, 0.3]);
        let b = a.flip_x();
        let batch = stack(&[&a, &b]);
        assert_eq!(unstack(&batch), vec![a, b]);
    }
}
