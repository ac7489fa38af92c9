use std::path::Path;

use candle_core::{Device, Tensor};

use crate::error::{invalid, Result};

/// Channel-major float image with values nominally in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(invalid(format!(
                "{} values for a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self { channels, height, width, data: vec![value; channels * height * width] }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn hflip(&self) -> Self {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    *out.at_mut(c, y, x) = self.at(c, y, self.width - 1 - x);
                }
            }
        }
        out
    }

    /// Decode an 8- or 16-bit PNG (or any format the `image` crate reads) to RGB.
    pub fn load(path: &Path) -> Result<Self> {
        let rgb = image::open(path)?.to_rgb32f();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut out = Self::filled(3, h, w, 0.0);
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..3 {
                *out.at_mut(c, y as usize, x as usize) = px.0[c] as f64;
            }
        }
        Ok(out)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let mut img = image::RgbImage::new(self.width as u32, self.height as u32);
        for (x, y, px) in img.enumerate_pixels_mut() {
            for c in 0..3 {
                let src = if self.channels == 1 { 0 } else { c.min(self.channels - 1) };
                let v = self.at(src, y as usize, x as usize).clamp(0.0, 1.0);
                px.0[c] = (v * 255.0).round() as u8;
            }
        }
        img
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path)?;
        Ok(())
    }
}

/// Stack images into a `(batch, C, H, W)` tensor.
pub fn images_to_tensor(images: &[Image]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| invalid("empty image batch"))?;
    let shape = first.shape();
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for img in images {
        if img.shape() != shape {
            return Err(invalid(format!("mixed image shapes {:?} and {:?}", shape, img.shape())));
        }
        data.extend_from_slice(&img.data);
    }
    Ok(Tensor::from_vec(data, (images.len(), shape[0], shape[1], shape[2]), &Device::Cpu)?)
}

pub fn tensor_to_images(t: &Tensor) -> Result<Vec<Image>> {
    let (b, c, h, w) = t.dims4()?;
    let flat: Vec<f64> = t.flatten_all()?.to_vec1()?;
    Ok(flat.chunks(c * h * w).take(b).map(|chunk| Image { channels: c, height: h, width: w, data: chunk.to_vec() }).collect())
}

/// Tile images into a square-ish grid of `ceil(sqrt(n))` columns.
pub fn grid(images: &[Image]) -> Result<Image> {
    let first = images.first().ok_or_else(|| invalid("empty image batch"))?;
    let cols = (images.len() as f64).sqrt().ceil() as usize;
    let rows = images.len().div_ceil(cols);
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut out = Image::filled(c, rows * h, cols * w, 0.0);
    for (i, img) in images.iter().enumerate() {
        let (gy, gx) = (i / cols, i % cols);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    *out.at_mut(ch, gy * h + y, gx * w + x) = img.at(ch, y, x);
                }
            }
        }
    }
    Ok(out)
}
