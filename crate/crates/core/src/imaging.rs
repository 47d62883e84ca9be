//! Image containers and the few raster operations the pipeline needs.
//! Intensities are `f32` in `[0, 1]`.

use std::path::Path;

use image::imageops::{self, FilterType};
use image::{DynamicImage, ImageBuffer, Luma, Rgb32FImage};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{GeolocError, Result};

pub type GrayImageF = ImageBuffer<Luma<f32>, Vec<f32>>;
pub type RgbImageF = Rgb32FImage;

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelRect {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl PixelRect {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        PixelRect { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> u32 {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> u32 {
        self.y1.saturating_sub(self.y0)
    }

    pub fn is_empty(&self) -> bool {
        self.width() == 0 || self.height() == 0
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x0 as f64 + self.x1 as f64) / 2.0,
            (self.y0 as f64 + self.y1 as f64) / 2.0,
        )
    }

    pub fn within(&self, width: u32, height: u32) -> bool {
        self.x0 <= self.x1 && self.y0 <= self.y1 && self.x1 <= width && self.y1 <= height
    }

    /// Rectangle from signed bounds, clipped to `[0, width) × [0, height)`.
    pub fn clipped(x0: i64, y0: i64, x1: i64, y1: i64, width: u32, height: u32) -> Self {
        let cx = |v: i64| v.clamp(0, width as i64) as u32;
        let cy = |v: i64| v.clamp(0, height as i64) as u32;
        PixelRect::new(cx(x0), cy(y0), cx(x1), cy(y1))
    }

    /// Maps the rectangle through an axis-aligned rescale, rounding outward,
    /// and clips to the target bounds.
    pub fn rescaled(&self, sx: f64, sy: f64, width: u32, height: u32) -> Self {
        PixelRect::clipped(
            (self.x0 as f64 * sx).floor() as i64,
            (self.y0 as f64 * sy).floor() as i64,
            (self.x1 as f64 * sx).ceil() as i64,
            (self.y1 as f64 * sy).ceil() as i64,
            width,
            height,
        )
    }
}

pub fn load_rgb(path: impl AsRef<Path>) -> Result<RgbImageF> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|source| GeolocError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_rgb32f())
}

pub fn save_rgb(img: &RgbImageF, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    DynamicImage::ImageRgb32F(img.clone())
        .to_rgb8()
        .save(path)
        .map_err(|source| GeolocError::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Quantizes to 8 bits and back, so in-memory images match what a PNG
/// round trip would produce.
pub fn quantize(img: &RgbImageF) -> RgbImageF {
    DynamicImage::ImageRgb8(DynamicImage::ImageRgb32F(img.clone()).to_rgb8()).to_rgb32f()
}

pub fn to_gray(img: &RgbImageF) -> GrayImageF {
    GrayImageF::from_fn(img.width(), img.height(), |x, y| {
        let p = img.get_pixel(x, y).0;
        Luma([0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]])
    })
}

pub fn crop_rgb(img: &RgbImageF, r: PixelRect) -> RgbImageF {
    imageops::crop_imm(img, r.x0, r.y0, r.width(), r.height()).to_image()
}

pub fn crop_gray(img: &GrayImageF, r: PixelRect) -> GrayImageF {
    imageops::crop_imm(img, r.x0, r.y0, r.width(), r.height()).to_image()
}

pub fn resize_rgb(img: &RgbImageF, width: u32, height: u32) -> RgbImageF {
    if img.dimensions() == (width, height) {
        return img.clone();
    }
    imageops::resize(img, width, height, FilterType::Triangle)
}

pub fn resize_gray(img: &GrayImageF, width: u32, height: u32) -> GrayImageF {
    if img.dimensions() == (width, height) {
        return img.clone();
    }
    imageops::resize(img, width, height, FilterType::Triangle)
}

pub fn blur_gray(img: &GrayImageF, sigma: f32) -> GrayImageF {
    if sigma > 6.0 {
        imageops::fast_blur(img, sigma)
    } else {
        imageops::blur(img, sigma)
    }
}

/// Bilinear sample with edge clamping.
pub fn sample_gray(img: &GrayImageF, x: f64, y: f64) -> f32 {
    let (w, h) = img.dimensions();
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as u32, y.floor() as u32);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
    let p = |xx, yy| img.get_pixel(xx, yy).0[0];
    let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
    let bot = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Bilinear RGB sample with edge clamping.
pub fn sample_rgb(img: &RgbImageF, x: f64, y: f64) -> [f32; 3] {
    let (w, h) = img.dimensions();
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as u32, y.floor() as u32);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
    let (a, b) = (img.get_pixel(x0, y0).0, img.get_pixel(x1, y0).0);
    let (c, d) = (img.get_pixel(x0, y1).0, img.get_pixel(x1, y1).0);
    std::array::from_fn(|k| {
        let top = a[k] * (1.0 - fx) + b[k] * fx;
        let bot = c[k] * (1.0 - fx) + d[k] * fx;
        top * (1.0 - fy) + bot * fy
    })
}

/// Renders a `width × height` view whose pixel `p` shows source point
/// `dst_to_src · p` (bilinear, edge-clamped).
pub fn warp_perspective(
    src: &RgbImageF,
    dst_to_src: &Matrix3<f64>,
    width: u32,
    height: u32,
) -> RgbImageF {
    RgbImageF::from_fn(width, height, |x, y| {
        let v = dst_to_src * Vector3::new(x as f64, y as f64, 1.0);
        image::Rgb(sample_rgb(src, v.x / v.z, v.y / v.z))
    })
}

/// Pads on the right and bottom by mirror reflection so both sides become
/// multiples of `multiple`.
pub fn pad_reflect(img: &GrayImageF, multiple: u32) -> GrayImageF {
    let (w, h) = img.dimensions();
    let pw = w.div_ceil(multiple) * multiple;
    let ph = h.div_ceil(multiple) * multiple;
    if (pw, ph) == (w, h) {
        return img.clone();
    }
    let reflect = |v: u32, n: u32| -> u32 {
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let m = v % period;
        if m < n {
            m
        } else {
            period - m
        }
    };
    GrayImageF::from_fn(pw, ph, |x, y| *img.get_pixel(reflect(x, w), reflect(y, h)))
}
