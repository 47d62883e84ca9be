//! Deterministic dense-feature backend used when no foundation-model
//! features are supplied. Cells carry band-passed intensity and opponent
//! color samples around the cell center, normalized by local contrast, plus
//! a low-frequency color context term. Every channel is invariant to a
//! global affine change of intensity (up to 8-bit clipping).

use image::Luma;
use serde::{Deserialize, Serialize};

use crate::error::{GeolocError, Result};
use crate::imaging::{blur_gray, resize_rgb, sample_gray, GrayImageF, RgbImageF};
use crate::tensor::DenseFeatureMap;

/// Longer image side after the downsampling step.
pub const INPUT_SIDE: u32 = 518;
/// Pixels per feature cell at [`INPUT_SIDE`].
pub const PATCH_STRIDE: u32 = 14;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenseExtractorConfig {
    pub input_side: u32,
    pub stride: u32,
    /// Smoothing applied before sampling.
    pub detail_sigma: f32,
    /// Scale removed by the band-pass.
    pub surround_sigma: f32,
    /// Window of the local contrast estimate.
    pub contrast_sigma: f32,
    /// Scale of the color context term.
    pub context_sigma: f32,
    /// Relative weight of the color context term.
    pub context_weight: f32,
    /// Offset between the 3×3 sample points, in input pixels.
    pub sample_spacing: f32,
}

impl Default for DenseExtractorConfig {
    fn default() -> Self {
        DenseExtractorConfig {
            input_side: INPUT_SIDE,
            stride: PATCH_STRIDE,
            detail_sigma: 2.5,
            surround_sigma: 9.0,
            contrast_sigma: 18.0,
            context_sigma: 20.0,
            context_weight: 0.5,
            sample_spacing: 6.0,
        }
    }
}

/// Target size for the downsampling step: longer side `input_side`, shorter
/// side rounded to a whole number of cells.
pub fn resized_dims(width: u32, height: u32, input_side: u32, stride: u32) -> (u32, u32) {
    let long = width.max(height) as f64;
    let fit = |v: u32| -> u32 {
        let scaled = v as f64 * input_side as f64 / long;
        ((scaled / stride as f64).round().max(1.0) as u32) * stride
    };
    if width >= height {
        (input_side, fit(height))
    } else {
        (fit(width), input_side)
    }
}

#[derive(Debug, Clone, Default)]
pub struct FallbackDenseExtractor {
    pub config: DenseExtractorConfig,
}

struct Planes {
    detail: [GrayImageF; 3],
    context: [GrayImageF; 2],
}

impl FallbackDenseExtractor {
    pub fn new(config: DenseExtractorConfig) -> Self {
        FallbackDenseExtractor { config }
    }

    pub fn channels(&self) -> usize {
        2 * (27 + 2)
    }

    /// Dense features of `img`, resized so the longer side is `input_side`.
    /// The stride and source dims refer to the resized image.
    pub fn extract(&self, img: &RgbImageF) -> Result<DenseFeatureMap> {
        let c = &self.config;
        if c.stride == 0 || c.input_side < c.stride {
            return Err(GeolocError::Config(format!(
                "input side {} and stride {} give no cells",
                c.input_side, c.stride
            )));
        }
        let (w, h) = resized_dims(img.width(), img.height(), c.input_side, c.stride);
        let resized = resize_rgb(img, w, h);
        let planes = self.planes(&resized);

        let (gh, gw) = ((h / c.stride) as usize, (w / c.stride) as usize);
        let half = c.stride as f64 / 2.0 - 0.5;
        let sp = c.sample_spacing as f64;
        let mut data = Vec::with_capacity(gh * gw * self.channels());
        let mut raw = Vec::with_capacity(29);
        for i in 0..gh {
            for j in 0..gw {
                let cx = j as f64 * c.stride as f64 + half;
                let cy = i as f64 * c.stride as f64 + half;
                raw.clear();
                for plane in &planes.detail {
                    for dy in [-sp, 0.0, sp] {
                        for dx in [-sp, 0.0, sp] {
                            raw.push(sample_gray(plane, cx + dx, cy + dy));
                        }
                    }
                }
                for plane in &planes.context {
                    raw.push(c.context_weight * sample_gray(plane, cx, cy));
                }
                data.extend(raw.iter().map(|v| v.max(0.0)));
                data.extend(raw.iter().map(|v| (-v).max(0.0)));
            }
        }
        DenseFeatureMap::new(gh, gw, self.channels(), data, c.stride, w, h)
    }

    fn planes(&self, img: &RgbImageF) -> Planes {
        let c = &self.config;
        let (w, h) = img.dimensions();
        let channel = |f: &dyn Fn([f32; 3]) -> f32| {
            GrayImageF::from_fn(w, h, |x, y| Luma([f(img.get_pixel(x, y).0)]))
        };
        let gray = channel(&|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]);
        let o1 = channel(&|p| p[0] - p[1]);
        let o2 = channel(&|p| 0.5 * (p[0] + p[1]) - p[2]);

        let band = |src: &GrayImageF| {
            let fine = blur_gray(src, c.detail_sigma);
            let coarse = blur_gray(src, c.surround_sigma);
            GrayImageF::from_fn(w, h, |x, y| {
                Luma([fine.get_pixel(x, y).0[0] - coarse.get_pixel(x, y).0[0]])
            })
        };
        let bg = band(&gray);
        let b1 = band(&o1);
        let b2 = band(&o2);

        let energy = GrayImageF::from_fn(w, h, |x, y| Luma([bg.get_pixel(x, y).0[0].powi(2)]));
        let local = blur_gray(&energy, c.contrast_sigma);
        let mean_rms = local.pixels().map(|p| p.0[0].max(0.0).sqrt()).sum::<f32>()
            / (w * h) as f32;
        let floor = 0.25 * mean_rms + 1e-6;
        let scale = GrayImageF::from_fn(w, h, |x, y| {
            Luma([1.0 / (local.get_pixel(x, y).0[0].max(0.0).sqrt() + floor)])
        });
        let normalized = |b: &GrayImageF| {
            GrayImageF::from_fn(w, h, |x, y| {
                Luma([b.get_pixel(x, y).0[0] * scale.get_pixel(x, y).0[0]])
            })
        };

        let n = (w * h) as f32;
        let mean = gray.pixels().map(|p| p.0[0]).sum::<f32>() / n;
        let std = (gray.pixels().map(|p| (p.0[0] - mean).powi(2)).sum::<f32>() / n).sqrt() + 1e-6;
        let context = |src: &GrayImageF| {
            let lp = blur_gray(src, c.context_sigma);
            GrayImageF::from_fn(w, h, |x, y| Luma([lp.get_pixel(x, y).0[0] / std]))
        };

        Planes {
            detail: [normalized(&bg), normalized(&b1), normalized(&b2)],
            context: [context(&o1), context(&o2)],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn textured(w: u32, h: u32) -> RgbImageF {
        RgbImageF::from_fn(w, h, |x, y| {
            let v = ((x as f32 * 0.21).sin() * (y as f32 * 0.13).cos() + 1.0) * 0.3 + 0.1;
            Rgb([v, 0.5 * v + 0.2, 0.6 - 0.4 * v])
        })
    }

    #[test]
    fn resize_policy() {
        assert_eq!(resized_dims(512, 512, 518, 14), (518, 518));
        assert_eq!(resized_dims(1024, 512, 518, 14), (518, 266));
        assert_eq!(resized_dims(100, 700, 518, 14), (70, 518));
    }

    #[test]
    fn grid_shape() {
        let f = FallbackDenseExtractor::default().extract(&textured(512, 512)).unwrap();
        assert_eq!((f.height(), f.width(), f.stride()), (37, 37, 14));
        assert_eq!((f.source_width(), f.source_height()), (518, 518));
        assert!(f.data().iter().all(|v| *v >= 0.0 && v.is_finite()));
    }

    #[test]
    fn invariant_to_global_gain() {
        let img = textured(256, 256);
        let darker = RgbImageF::from_fn(256, 256, |x, y| {
            let p = img.get_pixel(x, y).0;
            Rgb([p[0] * 0.8, p[1] * 0.8, p[2] * 0.8])
        });
        let ex = FallbackDenseExtractor::default();
        let a = ex.extract(&img).unwrap();
        let b = ex.extract(&darker).unwrap();
        let diff = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
        assert!(diff < 1e-3, "max diff {diff}");
    }

    #[test]
    fn deterministic() {
        let ex = FallbackDenseExtractor::default();
        let img = textured(128, 96);
        assert_eq!(ex.extract(&img).unwrap(), ex.extract(&img).unwrap());
    }
}
