use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An `H x W x C` image with values in `[-1, 1]`, row-major, channels last.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

pub fn byte_to_unit(v: u8) -> f64 {
    f64::from(v) / 127.5 - 1.0
}

pub fn unit_to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Image> {
        if height == 0 || width == 0 || channels == 0 || data.len() != height * width * channels {
            return Err(Error::Data(format!(
                "image {height}x{width}x{channels} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Image {
        Image {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, f: impl Fn(usize, usize, usize) -> f64) -> Image {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Image {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    /// Reads an 8-bit PNG, converting to 1 (luma) or 3 (RGB) channels.
    pub fn load(path: &Path, channels: usize) -> Result<Image> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?;
        Image::from_dynamic(img, channels)
    }

    pub fn from_dynamic(img: DynamicImage, channels: usize) -> Result<Image> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let bytes = match channels {
            1 => img.into_luma8().into_raw(),
            3 => img.into_rgb8().into_raw(),
            _ => return Err(Error::Data(format!("unsupported channel count {channels}"))),
        };
        Image::new(h, w, channels, bytes.into_iter().map(byte_to_unit).collect())
    }

    pub fn to_dynamic(&self) -> Result<DynamicImage> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| unit_to_byte(v)).collect();
        let (w, h) = (self.width as u32, self.height as u32);
        let bad = || Error::Data("image buffer size".into());
        Ok(match self.channels {
            1 => DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, bytes).ok_or_else(bad)?),
            3 => DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, bytes).ok_or_else(bad)?),
            c => return Err(Error::Data(format!("cannot encode {c}-channel image"))),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_dynamic()?
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                source: e,
            })
    }

    /// Window with top-left corner `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Image> {
        if row + height > self.height || col + width > self.width || height == 0 || width == 0 {
            return Err(Error::Data(format!(
                "crop {height}x{width} at ({row}, {col}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(height * width * c);
        for y in row..row + height {
            let start = (y * self.width + col) * c;
            data.extend_from_slice(&self.data[start..start + width * c]);
        }
        Image::new(height, width, c, data)
    }

    pub fn downscale(&self, factor: usize) -> Result<Image> {
        let data = super::resample::lanczos_downscale(&self.data, self.height, self.width, self.channels, factor)?;
        Image::new(self.height / factor, self.width / factor, self.channels, data)
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / self.data.len() as f64
    }
}

/// Stacks equal-sized images into an NHWC tensor.
pub fn to_batch(images: &[&Image]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for img in images {
        if img.shape() != first.shape() {
            return Err(Error::Data(format!("batch mixes {:?} and {:?} images", first.shape(), img.shape())));
        }
        data.extend_from_slice(&img.data);
    }
    Tensor::new(data, &[images.len(), first.height, first.width, first.channels])
}

/// Splits an NHWC tensor into images.
pub fn from_batch(t: &Tensor) -> Result<Vec<Image>> {
    if t.rank() != 4 {
        return Err(Error::invalid_shape("from_batch", format!("expected NHWC, got {:?}", t.shape())));
    }
    let (n, h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
    t.data()
        .chunks_exact(h * w * c)
        .take(n)
        .map(|chunk| Image::new(h, w, c, chunk.to_vec()))
        .collect()
}
