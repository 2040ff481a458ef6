//! Grayscale rasters and the bilinear resamplers used across the crate.

use std::path::Path;

use crate::error::{Error, Result};

/// 2-D grayscale image, values in `[0, 1]`, stored row-major (`y * width + x`).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::shape(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Image {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Image {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(x, y, self.get(self.width - 1 - x, y));
            }
        }
        out
    }

    pub fn clamp_unit(&mut self) {
        for p in &mut self.pixels {
            *p = p.clamp(0.0, 1.0);
        }
    }

    /// Resamples with pixel-center alignment, the usual convention for
    /// changing the input resolution of an image. Exact 2x reductions
    /// average each 2x2 block.
    pub fn resize(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let wx = center_aligned_weights(self.width, width);
        let wy = center_aligned_weights(self.height, height);
        let mut out = Image::filled(width, height, 0.0);
        for (y, ry) in wy.iter().enumerate() {
            for (x, rx) in wx.iter().enumerate() {
                let mut acc = 0.0f64;
                for &(sy, wyv) in ry {
                    for &(sx, wxv) in rx {
                        acc += wyv * wxv * self.get(sx, sy) as f64;
                    }
                }
                out.set(x, y, acc as f32);
            }
        }
        out
    }
}

/// Linear-interpolation taps mapping `src` samples onto `dst` samples with the
/// end points aligned (`dst[0] = src[0]`, `dst[last] = src[last]`).
pub fn corner_aligned_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    (0..dst)
        .map(|i| {
            if src == 1 {
                return vec![(0, 1.0)];
            }
            let pos = if dst == 1 {
                0.0
            } else {
                i as f64 * (src - 1) as f64 / (dst - 1) as f64
            };
            taps(pos, src)
        })
        .collect()
}

fn center_aligned_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
            taps(pos, src)
        })
        .collect()
}

fn taps(pos: f64, src: usize) -> Vec<(usize, f64)> {
    let lo = (pos.floor() as usize).min(src - 1);
    let frac = pos - lo as f64;
    if frac <= 0.0 || lo + 1 >= src {
        vec![(lo, 1.0)]
    } else {
        vec![(lo, 1.0 - frac), (lo + 1, frac)]
    }
}

/// Dense `(dst_h*dst_w) x (src_h*src_w)` corner-aligned bilinear operator over row-major grids.
pub fn bilinear_matrix(src: (usize, usize), dst: (usize, usize)) -> Vec<f64> {
    let (sw, sh) = src;
    let (dw, dh) = dst;
    let wx = corner_aligned_weights(sw, dw);
    let wy = corner_aligned_weights(sh, dh);
    let cols = sw * sh;
    let mut m = vec![0.0; dw * dh * cols];
    for (y, ry) in wy.iter().enumerate() {
        for (x, rx) in wx.iter().enumerate() {
            let row = y * dw + x;
            for &(sy, a) in ry {
                for &(sx, b) in rx {
                    m[row * cols + sy * sw + sx] += a * b;
                }
            }
        }
    }
    m
}

/// Corner-aligned bilinear resampling of a single row-major grid.
pub fn resample_grid(values: &[f64], src: (usize, usize), dst: (usize, usize)) -> Vec<f64> {
    let (sw, _) = src;
    let (dw, dh) = dst;
    let wx = corner_aligned_weights(src.0, dw);
    let wy = corner_aligned_weights(src.1, dh);
    let mut out = vec![0.0; dw * dh];
    for (y, ry) in wy.iter().enumerate() {
        for (x, rx) in wx.iter().enumerate() {
            let mut acc = 0.0;
            for &(sy, a) in ry {
                for &(sx, b) in rx {
                    acc += a * b * values[sy * sw + sx];
                }
            }
            out[y * dw + x] = acc;
        }
    }
    out
}

fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::data(path, None, other.to_string()),
    }
}

fn quantize(v: f32, max: f32) -> f32 {
    (v.clamp(0.0, 1.0) * max).round()
}

/// Writes an 8-bit grayscale PNG; values are clamped to `[0, 1]` and mapped to `0..=255`.
pub fn save_gray8(image: &Image, path: &Path) -> Result<()> {
    let bytes = image.pixels.iter().map(|&v| quantize(v, 255.0) as u8).collect();
    let buf = image::GrayImage::from_raw(image.width as u32, image.height as u32, bytes).expect("buffer size");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_error(path, e))
}

/// Writes a 16-bit grayscale PNG, `value * 65535`.
pub fn save_gray16(image: &Image, path: &Path) -> Result<()> {
    let words = image.pixels.iter().map(|&v| quantize(v, 65535.0) as u16).collect();
    let buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(image.width as u32, image.height as u32, words)
        .expect("buffer size");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_error(path, e))
}

/// Writes an 8-bit RGB PNG from interleaved channels in `[0, 1]`.
pub fn save_rgb8(width: usize, height: usize, rgb: &[f32], path: &Path) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::shape(format!("{width}x{height} RGB raster needs {} values", width * height * 3)));
    }
    let bytes = rgb.iter().map(|&v| quantize(v, 255.0) as u8).collect();
    let buf = image::RgbImage::from_raw(width as u32, height as u32, bytes).expect("buffer size");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_error(path, e))
}

/// Reads a PNG as grayscale. 8-bit data maps to `v / 255`, 16-bit to `v / 65535`;
/// colour images are converted to luma first.
pub fn load_gray(path: &Path) -> Result<Image> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_error(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels = match img {
        image::DynamicImage::ImageLuma16(buf) => buf.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect(),
        image::DynamicImage::ImageLumaA16(_) | image::DynamicImage::ImageRgb16(_) | image::DynamicImage::ImageRgba16(_) => {
            img.to_luma16().into_raw().into_iter().map(|v| v as f32 / 65535.0).collect()
        }
        other => other.to_luma8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
    };
    Image::new(w, h, pixels)
}
