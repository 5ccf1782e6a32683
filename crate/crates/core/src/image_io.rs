//! RGB images and binary masks, PNG conversion, and tensor interop.

use std::path::Path;

use candle_core::Tensor;
use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Dims;
use crate::tensor;

/// RGB image with channel-major `f64` samples in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::ShapeMismatch {
                expected: vec![3, height, width],
                actual: vec![data.len()],
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(dims: Dims, rgb: [f64; 3]) -> Self {
        let plane = dims.len();
        let mut data = Vec::with_capacity(3 * plane);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, plane));
        }
        Self {
            height: dims.height,
            width: dims.width,
            data,
        }
    }

    pub fn dims(&self) -> Dims {
        Dims::new(self.height, self.width)
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// `(1, 3, H, W)` tensor in `[-1, 1]`.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let values = self.data.iter().map(|v| 2.0 * v - 1.0).collect();
        tensor::from_vec(values, &[1, 3, self.height, self.width])
    }

    /// Inverse of [`Image::to_tensor`]; values are clamped into `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (_, c, h, w) = t.dims4()?;
        if c != 3 {
            return Err(Error::ShapeMismatch {
                expected: vec![1, 3, h, w],
                actual: t.dims().to_vec(),
            });
        }
        let data = tensor::to_vec(t)?
            .into_iter()
            .map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
            .collect();
        Self::new(h, w, data)
    }

    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c| (self.get(c, y as usize, x as usize) * 255.0).round().clamp(0.0, 255.0) as u8;
            Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Self::filled(Dims::new(h, w), [0.0; 3]);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, px.0[c] as f64 / 255.0);
            }
        }
        out
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn png_bytes(&self) -> Result<Vec<u8>> {
        encode_png(image::DynamicImage::ImageRgb8(self.to_rgb8()))
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes).map_err(|e| Error::Image {
            path: "<memory>".into(),
            message: e.to_string(),
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    /// Nearest-neighbour resize, used for preview thumbnails.
    pub fn resized(&self, dims: Dims) -> Self {
        let mut out = Self::filled(dims, [0.0; 3]);
        for y in 0..dims.height {
            let sy = y * self.height / dims.height;
            for x in 0..dims.width {
                let sx = x * self.width / dims.width;
                for c in 0..3 {
                    out.set(c, y, x, self.get(c, sy, sx));
                }
            }
        }
        out
    }
}

fn encode_png(img: image::DynamicImage) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: "<memory>".into(),
            message: e.to_string(),
        })?;
    Ok(buf.into_inner())
}

/// Binary edit mask: `true` marks editable pixels. On disk it is a
/// single-channel PNG where values above 127 mean editable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub editable: Vec<bool>,
}

impl Mask {
    pub fn full(dims: Dims, editable: bool) -> Self {
        Self {
            height: dims.height,
            width: dims.width,
            editable: vec![editable; dims.len()],
        }
    }

    pub fn dims(&self) -> Dims {
        Dims::new(self.height, self.width)
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.editable[y * self.width + x]
    }

    pub fn from_gray(img: &GrayImage) -> Self {
        Self {
            height: img.height() as usize,
            width: img.width() as usize,
            editable: img.pixels().map(|p| p.0[0] > 127).collect(),
        }
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(Self::from_gray(&img.to_luma8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_gray().save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn png_bytes(&self) -> Result<Vec<u8>> {
        encode_png(image::DynamicImage::ImageLuma8(self.to_gray()))
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes).map_err(|e| Error::Image {
            path: "<memory>".into(),
            message: e.to_string(),
        })?;
        Ok(Self::from_gray(&img.to_luma8()))
    }

    /// Nearest-cell downscale onto a latent grid: a latent cell is editable
    /// when the image pixel under its top-left corner is.
    pub fn resample(&self, dims: Dims) -> Self {
        let mut editable = Vec::with_capacity(dims.len());
        for y in 0..dims.height {
            let sy = y * self.height / dims.height;
            for x in 0..dims.width {
                let sx = x * self.width / dims.width;
                editable.push(self.get(sy, sx));
            }
        }
        Self {
            height: dims.height,
            width: dims.width,
            editable,
        }
    }
}
