//! Single-channel images with intensities in [0, 1], and their file IO.

use std::path::Path;

use image::imageops::{self, FilterType};
use image::{DynamicImage, ImageBuffer, Luma};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major grayscale image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGray {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl ImageGray {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::dim(
                "image",
                "shape",
                format!("{height}x{width} is empty"),
            ));
        }
        if pixels.len() != height * width {
            return Err(Error::dim(
                "image",
                "pixels",
                format!("{} values for {height}x{width}", pixels.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self::from_fn(height, width, |_, _| value)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        assert!(height > 0 && width > 0, "empty image");
        let mut pixels = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn row(&self, y: usize) -> &[f32] {
        &self.pixels[y * self.width..(y + 1) * self.width]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            pixels: self.pixels.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn clamped(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len() as f64
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || top + height > self.height {
            return Err(Error::dim(
                "crop",
                "height",
                format!("rows {top}..{} of {}", top + height, self.height),
            ));
        }
        if width == 0 || left + width > self.width {
            return Err(Error::dim(
                "crop",
                "width",
                format!("columns {left}..{} of {}", left + width, self.width),
            ));
        }
        Ok(Self::from_fn(height, width, |y, x| {
            self.get(top + y, left + x)
        }))
    }

    /// Quarter turn counterclockwise.
    pub fn rot90(&self) -> Self {
        let (h, w) = (self.height, self.width);
        Self::from_fn(w, h, |y, x| self.get(x, w - 1 - y))
    }

    /// Mirror left-right.
    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| {
            self.get(y, self.width - 1 - x)
        })
    }

    /// Bilinear (triangle filter) resampling to the given extent.
    pub fn resized(&self, height: usize, width: usize) -> Self {
        let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
                .expect("buffer matches extent");
        let out = imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
        Self {
            height,
            width,
            pixels: out.into_raw(),
        }
    }

    /// Pads with mirrored content (edge sample not repeated) so the result
    /// is `height x width`, with the original at the top-left.
    pub fn reflect_pad(&self, height: usize, width: usize) -> Result<Self> {
        if height < self.height || width < self.width {
            return Err(Error::dim(
                "reflect_pad",
                "shape",
                "target smaller than image",
            ));
        }
        Ok(Self::from_fn(height, width, |y, x| {
            self.get(reflect(y, self.height), reflect(x, self.width))
        }))
    }

    /// `(1, 1, H, W)` tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(&[1, 1, self.height, self.width], self.pixels.clone()).expect("nonempty")
    }

    /// Stacks images of one shape into `(N, 1, H, W)`.
    pub fn stack(images: &[&ImageGray]) -> Result<Tensor<f32>> {
        let first = images
            .first()
            .ok_or_else(|| Error::dim("stack", "batch", "no images"))?;
        let mut data = Vec::with_capacity(images.len() * first.pixels.len());
        for im in images {
            if !im.same_shape(first) {
                return Err(Error::dim(
                    "stack",
                    "shape",
                    format!(
                        "{}x{} vs {}x{}",
                        im.height, im.width, first.height, first.width
                    ),
                ));
            }
            data.extend_from_slice(&im.pixels);
        }
        Tensor::new(&[images.len(), 1, first.height, first.width], data)
    }

    /// Image `index` of an `(N, 1, H, W)` tensor.
    pub fn from_tensor(t: &Tensor<f32>, index: usize) -> Result<Self> {
        let (n, c, h, w) = t.dims4()?;
        if c != 1 {
            return Err(Error::dim(
                "from_tensor",
                "channel",
                format!("expected 1, got {c}"),
            ));
        }
        if index >= n {
            return Err(Error::dim(
                "from_tensor",
                "batch",
                format!("index {index} of {n}"),
            ));
        }
        Self::new(h, w, t.data()[index * h * w..(index + 1) * h * w].to_vec())
    }
}

/// Mirror index `i` into `0..n` without repeating the edge sample.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Reads an 8- or 16-bit grayscale PNG or PGM, scaling to [0, 1]. Color
/// inputs are converted to luma.
pub fn read_gray(path: &Path) -> Result<ImageGray> {
    let err = |detail: String| Error::Image {
        path: path.to_path_buf(),
        detail,
    };
    let img = image::open(path).map_err(|e| err(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels: Vec<f32> = match &img {
        DynamicImage::ImageLuma8(_)
        | DynamicImage::ImageLumaA8(_)
        | DynamicImage::ImageRgb8(_)
        | DynamicImage::ImageRgba8(_) => img
            .to_luma8()
            .into_raw()
            .into_iter()
            .map(|v| v as f32 / 255.0)
            .collect(),
        _ => img
            .to_luma16()
            .into_raw()
            .into_iter()
            .map(|v| v as f32 / 65535.0)
            .collect(),
    };
    ImageGray::new(h, w, pixels).map_err(|e| err(e.to_string()))
}

/// Writes a 16-bit grayscale PNG; values are clamped to [0, 1].
pub fn write_png16(path: &Path, img: &ImageGray) -> Result<()> {
    let raw: Vec<u16> = img
        .pixels
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(img.width as u32, img.height as u32, raw)
            .expect("buffer matches extent");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
}

/// Lists readable image files (png, pgm, pnm) in `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        let ext = p
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if matches!(ext.as_deref(), Some("png" | "pgm" | "pnm")) && p.is_file() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_folds_without_repeating_edges() {
        let idx: Vec<usize> = (0..9).map(|i| reflect(i, 4)).collect();
        assert_eq!(idx, [0, 1, 2, 3, 2, 1, 0, 1, 2]);
        assert_eq!(reflect(5, 1), 0);
    }

    #[test]
    fn rot90_four_times_is_identity() {
        let im = ImageGray::from_fn(3, 5, |y, x| (y * 5 + x) as f32);
        let r = im.rot90();
        assert_eq!((r.height(), r.width()), (5, 3));
        assert_eq!(r.get(0, 0), im.get(0, 4));
        assert_eq!(r.rot90().rot90().rot90(), im);
    }

    #[test]
    fn png16_round_trip_is_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let im = ImageGray::from_fn(7, 9, |y, x| ((y * 9 + x) as f32 / 62.0).min(1.0));
        write_png16(&p, &im).unwrap();
        let back = read_gray(&p).unwrap();
        assert!(back
            .pixels()
            .iter()
            .zip(im.pixels())
            .all(|(a, b)| (a - b).abs() <= 0.5 / 65535.0 + 1e-7));
    }
}
