//! Fine stage: per-region keypoints and descriptors on an 8-pixel grid,
//! mutual nearest-neighbour matching and robust homography fitting.

mod classical;
mod homography;
mod neural;

pub use classical::{ClassicalBackend, HarrisParams};
pub use homography::{
    dlt_homography, estimate_homography_ransac, project_center, symmetric_transfer_error,
    Homography, RansacOutcome,
};
pub use neural::{NeuralBackend, NeuralWeights, NEURAL_LAYERS};

use serde::{Deserialize, Serialize};

use crate::error::{GeolocError, Result};
use crate::imaging::{pad_reflect, GrayImageF};

/// Pixels per fine-grid cell.
pub const CELL: usize = 8;
/// 64 in-cell positions plus the "no keypoint" bin.
pub const KEYPOINT_BINS: usize = CELL * CELL + 1;
pub const ABSENT_BIN: usize = CELL * CELL;
pub const DESCRIPTOR_DIM: usize = 64;
/// Region sides are padded to a multiple of this before extraction.
pub const INPUT_MULTIPLE: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FineConfig {
    /// Keypoint score threshold.
    pub sigma: f64,
    /// Inlier bound on the symmetric transfer error, in pixels.
    pub ransac_threshold: f64,
    pub ransac_max_iters: usize,
    pub ransac_confidence: f64,
    pub max_keypoints: usize,
    /// A fitted homography needs at least this many inliers to be accepted.
    pub min_inliers: usize,
}

impl Default for FineConfig {
    fn default() -> Self {
        FineConfig {
            sigma: 0.05,
            ransac_threshold: 3.0,
            ransac_max_iters: 2000,
            ransac_confidence: 0.995,
            max_keypoints: 1024,
            min_inliers: 8,
        }
    }
}

impl FineConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma >= 0.0
            && self.sigma.is_finite()
            && self.ransac_threshold > 0.0
            && self.ransac_threshold.is_finite()
            && self.ransac_max_iters > 0
            && self.ransac_confidence > 0.0
            && self.ransac_confidence < 1.0
            && self.max_keypoints > 0
            && self.min_inliers >= 4;
        if ok {
            Ok(())
        } else {
            Err(GeolocError::Config(format!("invalid fine config {self:?}")))
        }
    }
}

/// Per-cell outputs of a fine backend for an `8·rows × 8·cols` image.
#[derive(Debug, Clone, PartialEq)]
pub struct FineFeatures {
    rows: usize,
    cols: usize,
    descriptors: Vec<f32>,
    reliability: Vec<f32>,
    logits: Vec<f32>,
}

impl FineFeatures {
    pub fn new(
        rows: usize,
        cols: usize,
        descriptors: Vec<f32>,
        reliability: Vec<f32>,
        logits: Vec<f32>,
    ) -> Result<Self> {
        let n = rows * cols;
        if n == 0 {
            return Err(GeolocError::Dimension("fine feature grid is empty".into()));
        }
        if descriptors.len() != n * DESCRIPTOR_DIM
            || reliability.len() != n
            || logits.len() != n * KEYPOINT_BINS
        {
            return Err(GeolocError::Dimension(format!(
                "{rows}x{cols} grid needs {}/{}/{} values, got {}/{}/{}",
                n * DESCRIPTOR_DIM,
                n,
                n * KEYPOINT_BINS,
                descriptors.len(),
                reliability.len(),
                logits.len()
            )));
        }
        if descriptors.iter().chain(&reliability).chain(&logits).any(|v| !v.is_finite()) {
            return Err(GeolocError::Contract("fine features must be finite".into()));
        }
        Ok(FineFeatures {
            rows,
            cols,
            descriptors,
            reliability,
            logits,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Pixel dimensions `(width, height)` of the image the grid covers.
    pub fn image_size(&self) -> (usize, usize) {
        (self.cols * CELL, self.rows * CELL)
    }

    pub fn descriptor(&self, i: usize, j: usize) -> &[f32] {
        let s = (i * self.cols + j) * DESCRIPTOR_DIM;
        &self.descriptors[s..s + DESCRIPTOR_DIM]
    }

    pub fn reliability(&self, i: usize, j: usize) -> f32 {
        self.reliability[i * self.cols + j]
    }

    pub fn logits(&self, i: usize, j: usize) -> &[f32] {
        let s = (i * self.cols + j) * KEYPOINT_BINS;
        &self.logits[s..s + KEYPOINT_BINS]
    }

    pub fn reliability_map(&self) -> &[f32] {
        &self.reliability
    }

    pub fn descriptor_map(&self) -> &[f32] {
        &self.descriptors
    }

    pub fn logit_map(&self) -> &[f32] {
        &self.logits
    }

    /// Bilinear weights for grid coordinate `(gx, gy)`, edge-clamped.
    fn bilinear(&self, gx: f64, gy: f64) -> [(usize, usize, f64); 4] {
        let gx = gx.clamp(0.0, (self.cols - 1) as f64);
        let gy = gy.clamp(0.0, (self.rows - 1) as f64);
        let (j0, i0) = (gx.floor() as usize, gy.floor() as usize);
        let (j1, i1) = ((j0 + 1).min(self.cols - 1), (i0 + 1).min(self.rows - 1));
        let (fx, fy) = (gx - j0 as f64, gy - i0 as f64);
        [
            (i0, j0, (1.0 - fx) * (1.0 - fy)),
            (i0, j1, fx * (1.0 - fy)),
            (i1, j0, (1.0 - fx) * fy),
            (i1, j1, fx * fy),
        ]
    }

    /// Reliability at full-resolution pixel `(x, y)`.
    pub fn reliability_at(&self, x: f64, y: f64) -> f64 {
        self.bilinear(x / CELL as f64, y / CELL as f64)
            .iter()
            .map(|&(i, j, w)| w * self.reliability(i, j) as f64)
            .sum()
    }
}

/// Something that turns a grayscale region into [`FineFeatures`].
pub trait FineBackend: Send + Sync {
    fn name(&self) -> &str;
    /// `img` sides are multiples of [`INPUT_MULTIPLE`].
    fn extract(&self, img: &GrayImageF) -> Result<FineFeatures>;
}

/// Pads `img` to the backend's input multiple and extracts features.
pub fn extract_fine_features(img: &GrayImageF, backend: &dyn FineBackend) -> Result<FineFeatures> {
    if img.width() == 0 || img.height() == 0 {
        return Err(GeolocError::Dimension("empty region image".into()));
    }
    backend.extract(&pad_reflect(img, INPUT_MULTIPLE))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let e: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// At most one keypoint per cell: the argmax bin unless it is the absence
/// bin, scored by its probability times the interpolated reliability.
/// Keeps scores above `sigma`, best `max_keypoints` first (ties by cell
/// order).
pub fn decode_keypoints(f: &FineFeatures, cfg: &FineConfig) -> Vec<Keypoint> {
    let mut out = Vec::new();
    for i in 0..f.rows {
        for j in 0..f.cols {
            let p = softmax(f.logits(i, j));
            let mut best = 0;
            for (b, &v) in p.iter().enumerate() {
                if v > p[best] {
                    best = b;
                }
            }
            if best == ABSENT_BIN {
                continue;
            }
            let x = (j * CELL + best % CELL) as f64;
            let y = (i * CELL + best / CELL) as f64;
            let score = p[best] * f.reliability_at(x, y);
            if score > cfg.sigma {
                out.push(Keypoint { x, y, score });
            }
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out.truncate(cfg.max_keypoints);
    out
}

/// Unit-norm descriptors interpolated at `(x/8, y/8)`; an all-zero
/// interpolation stays zero.
pub fn sample_descriptors(f: &FineFeatures, kps: &[Keypoint]) -> Result<Vec<Vec<f32>>> {
    let (w, h) = f.image_size();
    kps.iter()
        .map(|k| {
            if !(k.x >= 0.0 && k.y >= 0.0 && k.x < w as f64 && k.y < h as f64) {
                return Err(GeolocError::Contract(format!(
                    "keypoint ({}, {}) outside the {w}x{h} image",
                    k.x, k.y
                )));
            }
            let mut d = vec![0.0f64; DESCRIPTOR_DIM];
            for (i, j, wt) in f.bilinear(k.x / CELL as f64, k.y / CELL as f64) {
                if wt == 0.0 {
                    continue;
                }
                for (acc, &v) in d.iter_mut().zip(f.descriptor(i, j)) {
                    *acc += wt * v as f64;
                }
            }
            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            Ok(if norm > 0.0 {
                d.iter().map(|v| (v / norm) as f32).collect()
            } else {
                vec![0.0; DESCRIPTOR_DIM]
            })
        })
        .collect()
}

/// One correspondence between image A and image B.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointMatch {
    pub index_a: usize,
    pub index_b: usize,
    pub pt_a: [f64; 2],
    pub pt_b: [f64; 2],
    /// Euclidean descriptor distance.
    pub distance: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PointMatchSet {
    pub matches: Vec<PointMatch>,
}

impl PointMatchSet {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    /// Builds a set directly from point pairs (distance 0).
    pub fn from_points(pairs: &[([f64; 2], [f64; 2])]) -> Self {
        PointMatchSet {
            matches: pairs
                .iter()
                .enumerate()
                .map(|(n, &(a, b))| PointMatch {
                    index_a: n,
                    index_b: n,
                    pt_a: a,
                    pt_b: b,
                    distance: 0.0,
                })
                .collect(),
        }
    }
}

fn distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn nearest(q: &[f32], set: &[Vec<f32>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (n, d) in set.iter().enumerate() {
        let dist = distance(q, d);
        if dist < best.1 {
            best = (n, dist);
        }
    }
    best
}

/// Mutual nearest neighbours under Euclidean distance, lowest index on
/// ties. Returns `(index_a, index_b, distance)` ordered by `index_a`.
pub fn mutual_nn_match(desc_a: &[Vec<f32>], desc_b: &[Vec<f32>]) -> Result<Vec<(usize, usize, f64)>> {
    if desc_a.is_empty() || desc_b.is_empty() {
        return Ok(Vec::new());
    }
    let dim = desc_a[0].len();
    if desc_a.iter().chain(desc_b).any(|d| d.len() != dim) {
        return Err(GeolocError::Dimension("descriptor lengths differ".into()));
    }
    let back: Vec<usize> = desc_b.iter().map(|d| nearest(d, desc_a).0).collect();
    Ok(desc_a
        .iter()
        .enumerate()
        .filter_map(|(a, d)| {
            let (b, dist) = nearest(d, desc_b);
            (back[b] == a).then_some((a, b, dist))
        })
        .collect())
}

/// Keypoint-level matching between two feature grids.
pub fn match_features(
    fa: &FineFeatures,
    fb: &FineFeatures,
    cfg: &FineConfig,
    bounds_a: (u32, u32),
    bounds_b: (u32, u32),
) -> Result<PointMatchSet> {
    let inside = |b: (u32, u32)| move |k: &Keypoint| k.x < b.0 as f64 && k.y < b.1 as f64;
    let ka: Vec<Keypoint> = decode_keypoints(fa, cfg).into_iter().filter(inside(bounds_a)).collect();
    let kb: Vec<Keypoint> = decode_keypoints(fb, cfg).into_iter().filter(inside(bounds_b)).collect();
    let da = sample_descriptors(fa, &ka)?;
    let db = sample_descriptors(fb, &kb)?;
    let pairs = mutual_nn_match(&da, &db)?;
    Ok(PointMatchSet {
        matches: pairs
            .into_iter()
            .map(|(a, b, distance)| PointMatch {
                index_a: a,
                index_b: b,
                pt_a: [ka[a].x, ka[a].y],
                pt_b: [kb[b].x, kb[b].y],
                distance,
            })
            .collect(),
    })
}

/// Result of matching one region pair.
#[derive(Debug, Clone, PartialEq)]
pub struct FineMatch {
    pub homography: Homography,
    pub inliers: usize,
    pub matches: PointMatchSet,
}

/// Complete fine stage on a region pair: features, keypoints, mutual-NN,
/// RANSAC. The homography maps region-A pixels to region-B pixels.
pub fn match_regions(
    region_a: &GrayImageF,
    region_b: &GrayImageF,
    backend: &dyn FineBackend,
    cfg: &FineConfig,
    seed: u64,
) -> Result<FineMatch> {
    cfg.validate()?;
    let fa = extract_fine_features(region_a, backend)?;
    let fb = extract_fine_features(region_b, backend)?;
    let matches = match_features(&fa, &fb, cfg, region_a.dimensions(), region_b.dimensions())?;
    let fit = estimate_homography_ransac(&matches, cfg, seed)?;
    let inliers = fit.inliers.iter().filter(|&&v| v).count();
    if inliers < cfg.min_inliers {
        return Err(GeolocError::Estimation(format!(
            "{inliers} inliers among {} matches, need {}",
            matches.len(),
            cfg.min_inliers
        )));
    }
    Ok(FineMatch {
        homography: fit.homography,
        inliers,
        matches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn features_with(rows: usize, cols: usize, hot: &[(usize, usize, usize)], rel: f32) -> FineFeatures {
        let n = rows * cols;
        let mut logits = vec![0.0f32; n * KEYPOINT_BINS];
        for c in 0..n {
            logits[c * KEYPOINT_BINS + ABSENT_BIN] = 10.0;
        }
        for &(i, j, b) in hot {
            let c = i * cols + j;
            logits[c * KEYPOINT_BINS + ABSENT_BIN] = 0.0;
            logits[c * KEYPOINT_BINS + b] = 10.0;
        }
        let desc = (0..n * DESCRIPTOR_DIM).map(|v| ((v * 37) % 11) as f32 - 5.0).collect();
        FineFeatures::new(rows, cols, desc, vec![rel; n], logits).unwrap()
    }

    #[test]
    fn absence_bin_suppresses() {
        let f = features_with(2, 2, &[], 1.0);
        assert!(decode_keypoints(&f, &FineConfig::default()).is_empty());
    }

    #[test]
    fn bin_zero_at_origin() {
        let f = features_with(2, 2, &[(0, 0, 0)], 1.0);
        let k = decode_keypoints(&f, &FineConfig::default());
        assert_eq!(k.len(), 1);
        assert_eq!((k[0].x, k[0].y), (0.0, 0.0));
        let p = 10f64.exp() / (10f64.exp() + 64.0);
        assert!((k[0].score - p).abs() < 1e-6);
    }

    #[test]
    fn bin_layout_is_row_major() {
        let f = features_with(2, 3, &[(1, 2, 8 * 3 + 5)], 1.0);
        let k = decode_keypoints(&f, &FineConfig::default());
        assert_eq!((k[0].x, k[0].y), (21.0, 11.0));
    }

    #[test]
    fn huge_sigma_empties() {
        let f = features_with(2, 2, &[(0, 0, 3), (1, 1, 9)], 1.0);
        let cfg = FineConfig { sigma: 2.0, ..Default::default() };
        assert!(decode_keypoints(&f, &cfg).is_empty());
    }

    #[test]
    fn descriptor_at_node_and_midpoint() {
        let f = features_with(2, 2, &[], 1.0);
        let unit = |v: &[f32]| {
            let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            v.iter().map(|x| x / n).collect::<Vec<f32>>()
        };
        let node = sample_descriptors(&f, &[Keypoint { x: 8.0, y: 0.0, score: 1.0 }]).unwrap();
        let want = unit(f.descriptor(0, 1));
        assert!(node[0].iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-6));
        let mid = sample_descriptors(&f, &[Keypoint { x: 4.0, y: 0.0, score: 1.0 }]).unwrap();
        let avg: Vec<f32> = f.descriptor(0, 0).iter().zip(f.descriptor(0, 1)).map(|(a, b)| (a + b) / 2.0).collect();
        let want = unit(&avg);
        assert!(mid[0].iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-6));
        assert!(sample_descriptors(&f, &[Keypoint { x: 16.0, y: 0.0, score: 1.0 }]).is_err());
    }

    #[test]
    fn mnn_examples() {
        let a = vec![vec![1.0, 0.0]];
        let b = vec![vec![0.9, 0.1], vec![0.0, 1.0]];
        let m = mutual_nn_match(&a, &b).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!((m[0].0, m[0].1), (0, 0));
        // a0's nearest is b0, but b0's nearest is a1.
        let a = vec![vec![1.0, 0.0], vec![0.0, 0.0]];
        let b = vec![vec![0.2, 0.0]];
        assert!(mutual_nn_match(&a, &b).unwrap().iter().all(|&(x, _, _)| x != 0));
        assert!(mutual_nn_match(&[], &b).unwrap().is_empty());
        let d = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.7, 0.7]];
        let m = mutual_nn_match(&d, &d).unwrap();
        assert!(m.iter().all(|&(x, y, _)| x == y) && m.len() == 3);
    }

    proptest! {
        #[test]
        fn mnn_is_symmetric(a in proptest::collection::vec(proptest::collection::vec(-1.0f32..1.0, 3), 1..12),
                            b in proptest::collection::vec(proptest::collection::vec(-1.0f32..1.0, 3), 1..12)) {
            let ab: Vec<(usize, usize)> = mutual_nn_match(&a, &b).unwrap().iter().map(|m| (m.0, m.1)).collect();
            let mut ba: Vec<(usize, usize)> = mutual_nn_match(&b, &a).unwrap().iter().map(|m| (m.1, m.0)).collect();
            ba.sort();
            prop_assert_eq!(ab, ba);
        }

        #[test]
        fn sigma_monotone(logits in proptest::collection::vec(-3.0f32..3.0, 4 * KEYPOINT_BINS),
                          rel in proptest::collection::vec(0.0f32..1.0, 4),
                          s1 in 0.0f64..0.5, s2 in 0.0f64..0.5) {
            let f = FineFeatures::new(2, 2, vec![1.0; 4 * DESCRIPTOR_DIM], rel, logits).unwrap();
            let (lo, hi) = if s1 < s2 { (s1, s2) } else { (s2, s1) };
            let a = decode_keypoints(&f, &FineConfig { sigma: lo, ..Default::default() });
            let b = decode_keypoints(&f, &FineConfig { sigma: hi, ..Default::default() });
            prop_assert!(b.len() <= a.len());
            for k in &b { prop_assert!(a.contains(k)); }
            prop_assert!(a.len() <= 4);
        }

        #[test]
        fn sampled_norms(xs in proptest::collection::vec((0.0f64..15.99, 0.0f64..15.99), 1..10)) {
            let f = features_with(2, 2, &[], 1.0);
            let kps: Vec<Keypoint> = xs.iter().map(|&(x, y)| Keypoint { x, y, score: 1.0 }).collect();
            for d in sample_descriptors(&f, &kps).unwrap() {
                let n = d.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
                prop_assert!(n == 0.0 || (n - 1.0).abs() < 1e-6);
            }
        }
    }
}
