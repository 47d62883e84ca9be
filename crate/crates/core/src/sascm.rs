//! Coarse stage: semantic cell matching filtered by neighborhood
//! consensus, the center-region correspondence handed to the fine stage,
//! and the weakly supervised trainer for the consensus network.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dense::FallbackDenseExtractor;
use crate::error::{GeolocError, Result};
use crate::geo::geo_to_pixel;
use crate::imaging::{crop_rgb, PixelRect, RgbImageF};
use crate::store::DatasetManifest;
use crate::tensor::{
    cosine_correlation, dual_softmax, hard_assign, loss_gradients, neighborhood_consensus,
    soft_mutual_nn, CellMatch, CellMatchSet, Conv4dModel, DenseFeatureMap, Label, TrainingPair,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoarseMatchConfig {
    /// Side of the UAV cell block around the image center (odd).
    pub center_neighborhood: usize,
    /// Cells added around the matched satellite bounding box.
    pub region_margin: usize,
    /// Minimum `prob_u * prob_s` for a hard match.
    pub score_threshold: f64,
    /// When set, center-block matches whose cell displacement differs from
    /// the median displacement by more than this many cells (on either
    /// axis) are dropped before the bounding box is taken.
    pub consistency_radius: Option<usize>,
    /// Fewer surviving center-block matches than this is a coarse failure.
    pub min_support: usize,
}

impl Default for CoarseMatchConfig {
    fn default() -> Self {
        CoarseMatchConfig {
            center_neighborhood: 3,
            region_margin: 1,
            score_threshold: 0.0,
            consistency_radius: None,
            min_support: 1,
        }
    }
}

impl CoarseMatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.center_neighborhood == 0 || self.center_neighborhood.is_multiple_of(2) {
            return Err(GeolocError::Config(format!(
                "center_neighborhood must be odd and at least 1, got {}",
                self.center_neighborhood
            )));
        }
        if !self.score_threshold.is_finite() {
            return Err(GeolocError::Config("score_threshold must be finite".into()));
        }
        Ok(())
    }
}

/// Matched regions in the pixel frames of the two feature maps' source
/// images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionCorrespondence {
    pub uav_region: PixelRect,
    pub sat_region: PixelRect,
    /// Mean match score of the contributing cell matches.
    pub confidence: f64,
    /// Number of contributing cell matches.
    pub support: usize,
}

/// Full coarse chain: correlation, soft mutual-NN, consensus filtering,
/// soft mutual-NN again, dual softmax, hard assignment.
pub fn coarse_match(
    fu: &DenseFeatureMap,
    fs: &DenseFeatureMap,
    model: &Conv4dModel,
    cfg: &CoarseMatchConfig,
) -> Result<CellMatchSet> {
    cfg.validate()?;
    let s = soft_mutual_nn(&cosine_correlation(fu, fs)?)?;
    let m = soft_mutual_nn(&neighborhood_consensus(&s, model)?)?;
    Ok(hard_assign(&dual_softmax(&m)?, cfg.score_threshold))
}

fn cell_rect(rows: (usize, usize), cols: (usize, usize), f: &DenseFeatureMap) -> PixelRect {
    let r = f.stride() as i64;
    PixelRect::clipped(
        cols.0 as i64 * r,
        rows.0 as i64 * r,
        (cols.1 as i64 + 1) * r,
        (rows.1 as i64 + 1) * r,
        f.source_width(),
        f.source_height(),
    )
}

/// Region pair implied by the matches of the UAV center block.
pub fn center_region_correspondence(
    matches: &CellMatchSet,
    fu: &DenseFeatureMap,
    fs: &DenseFeatureMap,
    cfg: &CoarseMatchConfig,
) -> Result<RegionCorrespondence> {
    cfg.validate()?;
    let half = cfg.center_neighborhood / 2;
    let (ci, cj) = (fu.height() / 2, fu.width() / 2);
    let rows = (ci.saturating_sub(half), (ci + half).min(fu.height() - 1));
    let cols = (cj.saturating_sub(half), (cj + half).min(fu.width() - 1));

    let mut block: Vec<_> = matches
        .iter()
        .filter(|m| (rows.0..=rows.1).contains(&m.uav.0) && (cols.0..=cols.1).contains(&m.uav.1))
        .collect();
    if block.is_empty() {
        return Err(GeolocError::CoarseMatchFailure(format!(
            "no matches inside the {0}x{0} center block",
            cfg.center_neighborhood
        )));
    }
    if let Some(radius) = cfg.consistency_radius {
        let offset = |m: &CellMatch| {
            (m.sat.0 as i64 - m.uav.0 as i64, m.sat.1 as i64 - m.uav.1 as i64)
        };
        let median = |mut v: Vec<i64>| {
            v.sort_unstable();
            v[v.len() / 2]
        };
        let mk = median(block.iter().map(|m| offset(m).0).collect());
        let ml = median(block.iter().map(|m| offset(m).1).collect());
        let r = radius as i64;
        block.retain(|m| {
            let (dk, dl) = offset(m);
            (dk - mk).abs() <= r && (dl - ml).abs() <= r
        });
        if block.is_empty() {
            return Err(GeolocError::CoarseMatchFailure(
                "no center-block matches agree with the median displacement".into(),
            ));
        }
    }
    if block.len() < cfg.min_support {
        return Err(GeolocError::CoarseMatchFailure(format!(
            "{} center-block matches, need {}",
            block.len(),
            cfg.min_support
        )));
    }
    let k0 = block.iter().map(|m| m.sat.0).min().unwrap();
    let k1 = block.iter().map(|m| m.sat.0).max().unwrap();
    let l0 = block.iter().map(|m| m.sat.1).min().unwrap();
    let l1 = block.iter().map(|m| m.sat.1).max().unwrap();
    let g = cfg.region_margin;
    let sat_rows = (k0.saturating_sub(g), (k1 + g).min(fs.height() - 1));
    let sat_cols = (l0.saturating_sub(g), (l1 + g).min(fs.width() - 1));

    let confidence = block.iter().map(|m| m.score).sum::<f64>() / block.len() as f64;
    Ok(RegionCorrespondence {
        uav_region: cell_rect(rows, cols, fu),
        sat_region: cell_rect(sat_rows, sat_cols, fs),
        confidence: confidence.clamp(0.0, 1.0),
        support: block.len(),
    })
}

/// How training pairs are cut from a dataset.
#[derive(Debug, Clone)]
pub struct PairBuilder<'a> {
    pub map: &'a RgbImageF,
    pub extractor: &'a FallbackDenseExtractor,
    /// Side of the square satellite patch in map pixels.
    pub patch_size: u32,
    /// Feature grids are average-pooled to at most this many cells per side.
    pub max_cells: usize,
}

impl PairBuilder<'_> {
    fn patch_features(&self, center: [f64; 2]) -> Result<DenseFeatureMap> {
        let half = (self.patch_size / 2) as i64;
        let (w, h) = self.map.dimensions();
        let x0 = (center[0].round() as i64 - half).clamp(0, w as i64 - self.patch_size as i64);
        let y0 = (center[1].round() as i64 - half).clamp(0, h as i64 - self.patch_size as i64);
        let rect = PixelRect::new(
            x0 as u32,
            y0 as u32,
            x0 as u32 + self.patch_size,
            y0 as u32 + self.patch_size,
        );
        Ok(self
            .extractor
            .extract(&crop_rgb(self.map, rect))?
            .pooled_to(self.max_cells))
    }
}

/// One positive pair per frame (the satellite patch centered on the
/// frame's ground truth) plus `negatives_per_positive` patches whose
/// centers lie more than two patch widths away.
pub fn build_training_pairs(
    manifest: &DatasetManifest,
    builder: &PairBuilder,
    negatives_per_positive: usize,
    seed: u64,
) -> Result<Vec<TrainingPair>> {
    let (w, h) = builder.map.dimensions();
    if builder.patch_size == 0 || builder.patch_size > w.min(h) {
        return Err(GeolocError::Config(format!(
            "patch size {} does not fit a {w}x{h} map",
            builder.patch_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let min_dist = 2.0 * builder.patch_size as f64;
    let half = builder.patch_size as f64 / 2.0;
    let mut pairs = Vec::new();
    for frame in &manifest.frames {
        let image = frame.image.as_ref().ok_or_else(|| {
            GeolocError::Format(format!("frame {:?} has no image path", frame.frame_id))
        })?;
        let uav = builder
            .extractor
            .extract(&crate::imaging::load_rgb(image)?)?
            .pooled_to(builder.max_cells);
        let center = geo_to_pixel(&manifest.map.georef, frame.ground_truth())?;
        pairs.push(TrainingPair {
            uav: uav.clone(),
            sat: builder.patch_features(center)?,
            label: Label::Positive,
        });
        for _ in 0..negatives_per_positive {
            let mut found = None;
            for _ in 0..10_000 {
                let c = [
                    rng.random_range(half..=w as f64 - half),
                    rng.random_range(half..=h as f64 - half),
                ];
                if ((c[0] - center[0]).powi(2) + (c[1] - center[1]).powi(2)).sqrt() > min_dist {
                    found = Some(c);
                    break;
                }
            }
            let c = found.ok_or_else(|| {
                GeolocError::Config(format!(
                    "map too small for a negative more than {min_dist} px from frame {:?}",
                    frame.frame_id
                ))
            })?;
            pairs.push(TrainingPair {
                uav: uav.clone(),
                sat: builder.patch_features(c)?,
                label: Label::Negative,
            });
        }
    }
    Ok(pairs)
}

/// One epoch of plain SGD, one update per pair, in an order shuffled by
/// `seed`. Returns the updated model and the mean loss over the epoch
/// (each pair's loss taken before its own update).
pub fn train_epoch(
    pairs: &[TrainingPair],
    model: &Conv4dModel,
    learning_rate: f64,
    seed: u64,
) -> Result<(Conv4dModel, f64)> {
    if pairs.is_empty() {
        return Err(GeolocError::Contract("training needs at least one pair".into()));
    }
    if !learning_rate.is_finite() || learning_rate < 0.0 {
        return Err(GeolocError::Config(format!(
            "learning rate must be finite and non-negative, got {learning_rate}"
        )));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut model = model.clone();
    let mut total = 0.0;
    for (step, &idx) in order.iter().enumerate() {
        let g = loss_gradients(&pairs[idx], &model)?;
        let bad_grad = g
            .gradients
            .layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias))
            .any(|v| !v.is_finite());
        if !g.loss.value.is_finite() || bad_grad {
            return Err(GeolocError::NonFiniteLoss {
                pair_index: idx,
                step,
                detail: format!(
                    "loss {} with {} matches, max |grad| {}",
                    g.loss.value,
                    g.matches.len(),
                    g.gradients.max_abs()
                ),
            });
        }
        total += g.loss.value;
        if learning_rate > 0.0 {
            for (bank, grad) in model.layers_mut().iter_mut().zip(&g.gradients.layers) {
                for (w, dw) in bank.weights.iter_mut().zip(&grad.weights) {
                    *w -= learning_rate * dw;
                }
                for (b, db) in bank.bias.iter_mut().zip(&grad.bias) {
                    *b -= learning_rate * db;
                }
            }
        }
    }
    Ok((model, total / pairs.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Cell `(i, j)` gets a one-hot-ish vector unique to that cell.
    fn distinct_map(h: usize, w: usize) -> DenseFeatureMap {
        let c = h * w + 1;
        let mut data = vec![0.0f32; h * w * c];
        for p in 0..h * w {
            data[p * c + p] = 1.0;
            data[p * c + c - 1] = 0.1;
        }
        DenseFeatureMap::with_stride(h, w, c, data, 14).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(CoarseMatchConfig::default().validate().is_ok());
        let even = CoarseMatchConfig { center_neighborhood: 4, ..Default::default() };
        assert!(matches!(even.validate(), Err(GeolocError::Config(_))));
    }

    #[test]
    fn self_matching_is_identity() {
        let f = distinct_map(5, 4);
        let set = coarse_match(&f, &f, &Conv4dModel::identity(), &CoarseMatchConfig::default()).unwrap();
        assert_eq!(set.len(), 20);
        assert!(set.iter().all(|m| m.uav == m.sat));
    }

    #[test]
    fn identical_satellite_cells_leave_one_match() {
        let fu = distinct_map(3, 3);
        let c = fu.channels();
        let fs = DenseFeatureMap::with_stride(3, 3, c, fu.cell(1, 1).repeat(9), 14).unwrap();
        let set = coarse_match(&fu, &fs, &Conv4dModel::identity(), &CoarseMatchConfig::default()).unwrap();
        assert!(set.len() <= 1);
    }

    #[test]
    fn self_region_arithmetic() {
        let f = distinct_map(16, 16);
        let cfg = CoarseMatchConfig::default();
        let set = coarse_match(&f, &f, &Conv4dModel::identity(), &cfg).unwrap();
        let r = center_region_correspondence(&set, &f, &f, &cfg).unwrap();
        assert_eq!(r.uav_region, PixelRect::new(98, 98, 140, 140));
        assert_eq!(r.sat_region, PixelRect::new(84, 84, 154, 154));
        assert!(r.confidence > 0.0 && r.confidence <= 1.0);
    }

    #[test]
    fn single_center_match_region() {
        let f = distinct_map(5, 5);
        let set = CellMatchSet {
            matches: vec![crate::tensor::CellMatch { uav: (2, 2), sat: (0, 4), score: 0.5 }],
        };
        let r = center_region_correspondence(&set, &f, &f, &CoarseMatchConfig::default()).unwrap();
        // Cell (0, 4) plus one cell of margin, clipped at the border.
        assert_eq!(r.sat_region, PixelRect::new(42, 0, 70, 28));
        assert_eq!(r.confidence, 0.5);
    }

    #[test]
    fn empty_center_block_fails() {
        let f = distinct_map(5, 5);
        let set = CellMatchSet {
            matches: vec![crate::tensor::CellMatch { uav: (0, 0), sat: (0, 0), score: 0.9 }],
        };
        let err = center_region_correspondence(&set, &f, &f, &CoarseMatchConfig::default());
        assert!(matches!(err, Err(GeolocError::CoarseMatchFailure(_))));
    }

    #[test]
    fn consistency_radius_drops_stray_matches() {
        let f = distinct_map(9, 9);
        let m = |u: (usize, usize), s: (usize, usize)| crate::tensor::CellMatch { uav: u, sat: s, score: 0.5 };
        // Center block shifted by (+1, +1), one stray match to the corner.
        let set = CellMatchSet {
            matches: vec![m((3, 3), (4, 4)), m((4, 4), (5, 5)), m((5, 5), (6, 6)), m((4, 3), (0, 8))],
        };
        let loose = CoarseMatchConfig { region_margin: 0, ..Default::default() };
        let r = center_region_correspondence(&set, &f, &f, &loose).unwrap();
        assert_eq!(r.sat_region, PixelRect::new(56, 0, 126, 98));
        assert_eq!(r.support, 4);
        let strict = CoarseMatchConfig { consistency_radius: Some(1), ..loose };
        let r = center_region_correspondence(&set, &f, &f, &strict).unwrap();
        assert_eq!(r.sat_region, PixelRect::new(56, 56, 98, 98));
        assert_eq!(r.support, 3);
        let demanding = CoarseMatchConfig { min_support: 4, ..strict };
        let err = center_region_correspondence(&set, &f, &f, &demanding);
        assert!(matches!(err, Err(GeolocError::CoarseMatchFailure(_))));
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let f = distinct_map(3, 3);
        let pair = TrainingPair { uav: f.clone(), sat: f, label: Label::Positive };
        let model = Conv4dModel::random(3);
        let (after, loss) = train_epoch(&[pair], &model, 0.0, 1).unwrap();
        assert_eq!(after, model);
        assert!(loss.is_finite());
        assert!(train_epoch(&[], &model, 0.1, 1).is_err());
    }
}
