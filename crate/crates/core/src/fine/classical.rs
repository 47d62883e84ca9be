//! Hand-crafted fine backend: Harris corners give the keypoint logits and
//! reliability; smoothed intensity samples on a grid oriented by the local
//! low-frequency gradient give the descriptors.

use image::Luma;
use rayon::prelude::*;

use super::{FineBackend, FineFeatures, ABSENT_BIN, CELL, DESCRIPTOR_DIM, KEYPOINT_BINS};
use crate::error::{GeolocError, Result};
use crate::imaging::{blur_gray, sample_gray, GrayImageF};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HarrisParams {
    /// Pre-smoothing before gradients.
    pub smoothing_sigma: f32,
    /// Window of the structure tensor.
    pub window_sigma: f32,
    /// `det - k tr²`.
    pub k: f32,
    /// Logit assigned to the winning bin.
    pub hot_logit: f32,
    /// Cells whose strongest response is below this fraction of the
    /// reference response report no keypoint.
    pub min_relative_response: f32,
    /// A cell's strongest pixel must also be the maximum within this
    /// radius, across cell borders, to count as a keypoint.
    pub suppression_radius: usize,
    /// Smoothing of the image the descriptors sample.
    pub descriptor_sigma: f32,
    /// Spacing of the 8×8 descriptor sampling grid, in pixels.
    pub descriptor_spacing: f32,
    /// Scale of the smoothed gradient that orients each descriptor.
    pub orientation_sigma: f32,
}

impl Default for HarrisParams {
    fn default() -> Self {
        HarrisParams {
            smoothing_sigma: 1.0,
            window_sigma: 1.5,
            k: 0.04,
            hot_logit: 10.0,
            min_relative_response: 0.01,
            suppression_radius: 1,
            descriptor_sigma: 3.0,
            descriptor_spacing: 4.0,
            orientation_sigma: 8.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ClassicalBackend {
    pub params: HarrisParams,
}

impl ClassicalBackend {
    fn harris(&self, smooth: &GrayImageF) -> Vec<f32> {
        let (w, h) = smooth.dimensions();
        let px = |x: i64, y: i64| {
            smooth
                .get_pixel(x.clamp(0, w as i64 - 1) as u32, y.clamp(0, h as i64 - 1) as u32)
                .0[0]
        };
        let mut xx = GrayImageF::new(w, h);
        let mut yy = GrayImageF::new(w, h);
        let mut xy = GrayImageF::new(w, h);
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let gx = 0.5 * (px(x + 1, y) - px(x - 1, y));
                let gy = 0.5 * (px(x, y + 1) - px(x, y - 1));
                xx.put_pixel(x as u32, y as u32, Luma([gx * gx]));
                yy.put_pixel(x as u32, y as u32, Luma([gy * gy]));
                xy.put_pixel(x as u32, y as u32, Luma([gx * gy]));
            }
        }
        let s = self.params.window_sigma;
        let (xx, yy, xy) = (blur_gray(&xx, s), blur_gray(&yy, s), blur_gray(&xy, s));
        xx.pixels()
            .zip(yy.pixels())
            .zip(xy.pixels())
            .map(|((a, b), c)| {
                let (a, b, c) = (a.0[0], b.0[0], c.0[0]);
                a * b - c * c - self.params.k * (a + b) * (a + b)
            })
            .collect()
    }

    /// Dominant direction around `(cx, cy)`: the gradient of the heavily
    /// smoothed image, so the angle varies slowly between grid nodes.
    fn orientation(&self, coarse: &GrayImageF, cx: f64, cy: f64) -> f64 {
        let gx = sample_gray(coarse, cx + 1.0, cy) - sample_gray(coarse, cx - 1.0, cy);
        let gy = sample_gray(coarse, cx, cy + 1.0) - sample_gray(coarse, cx, cy - 1.0);
        if gx == 0.0 && gy == 0.0 {
            0.0
        } else {
            (gy as f64).atan2(gx as f64)
        }
    }

    /// 8×8 samples on a grid rotated to the local orientation, zero-mean
    /// and unit-norm.
    fn descriptor(&self, smooth: &GrayImageF, angle: f64, cx: f64, cy: f64) -> [f32; DESCRIPTOR_DIM] {
        let (c, s) = (angle.cos(), angle.sin());
        let step = self.params.descriptor_spacing as f64;
        let mut out = [0.0f32; DESCRIPTOR_DIM];
        for (n, o) in out.iter_mut().enumerate() {
            let u = ((n % 8) as f64 - 3.5) * step;
            let v = ((n / 8) as f64 - 3.5) * step;
            *o = sample_gray(smooth, cx + c * u - s * v, cy + s * u + c * v);
        }
        let mean = out.iter().sum::<f32>() / DESCRIPTOR_DIM as f32;
        out.iter_mut().for_each(|v| *v -= mean);
        let norm = out.iter().map(|v| v * v).sum::<f32>().sqrt();
        if norm > 1e-6 {
            out.iter_mut().for_each(|v| *v /= norm);
        } else {
            out = [0.0; DESCRIPTOR_DIM];
        }
        out
    }
}

impl FineBackend for ClassicalBackend {
    fn name(&self) -> &str {
        "classical"
    }

    fn extract(&self, img: &GrayImageF) -> Result<FineFeatures> {
        let (w, h) = img.dimensions();
        if !(w as usize).is_multiple_of(CELL) || !(h as usize).is_multiple_of(CELL) || w == 0 || h == 0 {
            return Err(GeolocError::Dimension(format!(
                "classical backend needs sides divisible by {CELL}, got {w}x{h}"
            )));
        }
        let smooth = blur_gray(img, self.params.smoothing_sigma);
        let response = self.harris(&smooth);
        let (rows, cols) = (h as usize / CELL, w as usize / CELL);

        // Strongest response and its in-cell bin, per cell.
        let cells: Vec<(f32, usize)> = (0..rows * cols)
            .map(|c| {
                let (i, j) = (c / cols, c % cols);
                let mut best = (f32::NEG_INFINITY, 0);
                for dy in 0..CELL {
                    for dx in 0..CELL {
                        let r = response[(i * CELL + dy) * w as usize + j * CELL + dx];
                        if r > best.0 {
                            best = (r, dy * CELL + dx);
                        }
                    }
                }
                best
            })
            .collect();
        let mut positive: Vec<f32> = cells.iter().map(|c| c.0).filter(|&r| r > 0.0).collect();
        positive.sort_by(f32::total_cmp);
        let reference = positive
            .get((positive.len() as f64 * 0.9) as usize)
            .or(positive.last())
            .copied()
            .unwrap_or(0.0);

        let radius = self.params.suppression_radius as i64;
        let is_peak = |c: usize, bin: usize, r: f32| {
            let x = ((c % cols) * CELL + bin % CELL) as i64;
            let y = ((c / cols) * CELL + bin / CELL) as i64;
            (y - radius..=y + radius)
                .flat_map(|yy| (x - radius..=x + radius).map(move |xx| (xx, yy)))
                .filter(|&(xx, yy)| xx >= 0 && yy >= 0 && xx < w as i64 && yy < h as i64)
                .all(|(xx, yy)| response[yy as usize * w as usize + xx as usize] <= r)
        };

        let mut logits = vec![0.0f32; rows * cols * KEYPOINT_BINS];
        let mut reliability = vec![0.0f32; rows * cols];
        for (c, &(r, bin)) in cells.iter().enumerate() {
            let rel = if reference > 0.0 { (r / reference).clamp(0.0, 1.0) } else { 0.0 };
            reliability[c] = rel;
            let keep = rel > self.params.min_relative_response && is_peak(c, bin, r);
            let hot = if keep { bin } else { ABSENT_BIN };
            logits[c * KEYPOINT_BINS + hot] = self.params.hot_logit;
        }

        let desc_img = blur_gray(img, self.params.descriptor_sigma);
        let coarse = blur_gray(img, self.params.orientation_sigma);
        let descriptors: Vec<f32> = (0..rows * cols)
            .into_par_iter()
            .flat_map_iter(|c| {
                let (x, y) = ((c % cols * CELL) as f64, (c / cols * CELL) as f64);
                self.descriptor(&desc_img, self.orientation(&coarse, x, y), x, y)
            })
            .collect();
        FineFeatures::new(rows, cols, descriptors, reliability, logits)
    }
}
