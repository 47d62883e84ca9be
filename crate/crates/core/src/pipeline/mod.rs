//! End-to-end localization: database build, per-frame retrieval → coarse →
//! fine matching with graceful degradation, sequence evaluation and the
//! result writers.

pub mod synth;

use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dense::{DenseExtractorConfig, FallbackDenseExtractor};
use crate::error::{GeolocError, Result};
use crate::fine::{
    match_regions, project_center, ClassicalBackend, FineBackend, FineConfig, NeuralBackend,
};
use crate::geo::{
    evaluate_trajectory, localization_error, pixel_to_geo, write_trajectory_csv, GeoPoint,
    GeoRef, MetricsSummary, TrajectoryEval, TrajectoryRow,
};
use crate::imaging::{crop_gray, crop_rgb, load_rgb, to_gray, GrayImageF, PixelRect, RgbImageF};
use crate::retrieval::{
    aggregate_descriptor, query_top_k, read_descriptor_file, tile_satellite_map, QueryDescriptor,
    RetrievalHit, TileDatabase, TileRecord,
};
use crate::sascm::{center_region_correspondence, coarse_match, CoarseMatchConfig, RegionCorrespondence};
use crate::store::{DatasetManifest, FrameEntry};
use crate::tensor::{Conv4dModel, DenseFeatureMap};

/// Name recorded for descriptors computed by the built-in dense backend.
pub const FALLBACK_SOURCE: &str = "fallback-gem";

/// Which fine-stage backend to run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", content = "weights")]
pub enum FineBackendKind {
    #[default]
    Classical,
    /// Neural backend with weights from the given directory.
    Neural(PathBuf),
}

/// Which stages run after retrieval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MatchingMode {
    #[default]
    Full,
    /// Skip matching and report the top-1 tile center.
    RetrievalOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Retrieval candidates tried in rank order.
    pub k: usize,
    pub coarse: CoarseMatchConfig,
    pub fine: FineConfig,
    pub dense: DenseExtractorConfig,
    pub fine_backend: FineBackendKind,
    /// Trained consensus weights; the translation prior is used without.
    pub consensus_weights: Option<PathBuf>,
    pub mode: MatchingMode,
    pub seed: u64,
    /// A fine homography is rejected when its local scale at the frame
    /// center leaves `[1/max_scale_change, max_scale_change]` or it flips
    /// orientation.
    pub max_scale_change: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            k: 3,
            coarse: CoarseMatchConfig {
                center_neighborhood: 11,
                region_margin: 2,
                score_threshold: 0.0,
                consistency_radius: Some(3),
                min_support: 12,
            },
            fine: FineConfig::default(),
            dense: DenseExtractorConfig::default(),
            fine_backend: FineBackendKind::Classical,
            consensus_weights: None,
            mode: MatchingMode::Full,
            seed: 0,
            max_scale_change: 2.5,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(GeolocError::Config("retrieval k must be at least 1".into()));
        }
        if !(self.max_scale_change >= 1.0) {
            return Err(GeolocError::Config(format!(
                "max_scale_change must be at least 1, got {}",
                self.max_scale_change
            )));
        }
        self.coarse.validate()?;
        self.fine.validate()
    }
}

/// Models shared by every frame of a run.
pub struct Models {
    pub consensus: Conv4dModel,
    pub dense: FallbackDenseExtractor,
    pub fine: Box<dyn FineBackend>,
}

impl Models {
    pub fn from_config(cfg: &PipelineConfig) -> Result<Self> {
        let consensus = match &cfg.consensus_weights {
            Some(dir) => Conv4dModel::load(dir)?,
            None => Conv4dModel::translation_prior(),
        };
        let fine: Box<dyn FineBackend> = match &cfg.fine_backend {
            FineBackendKind::Classical => Box::new(ClassicalBackend::default()),
            FineBackendKind::Neural(dir) => Box::new(NeuralBackend::load(dir)?),
        };
        Ok(Models {
            consensus,
            dense: FallbackDenseExtractor::new(cfg.dense),
            fine,
        })
    }
}

/// Options of [`build_database`].
#[derive(Debug, Clone, PartialEq)]
pub struct BuildOptions {
    pub tile_size: u32,
    pub overlap: u32,
    /// Directory of externally computed `tile_NNNN.desc.glft` global
    /// descriptors and optional `tile_NNNN.dense.glft` dense features.
    pub descriptors_from: Option<PathBuf>,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            tile_size: 512,
            overlap: 256,
            descriptors_from: None,
        }
    }
}

pub fn external_descriptor_path(dir: &Path, tile_id: u32) -> PathBuf {
    dir.join(format!("tile_{tile_id:04}.desc.glft"))
}

pub fn external_dense_path(dir: &Path, tile_id: u32) -> PathBuf {
    dir.join(format!("tile_{tile_id:04}.dense.glft"))
}

/// Tiles the map, computes or imports each tile's descriptor and dense
/// features, and writes the database into `out_dir`.
pub fn build_database(
    map_path: &Path,
    georef: &GeoRef,
    opts: &BuildOptions,
    extractor: &FallbackDenseExtractor,
    out_dir: &Path,
) -> Result<TileDatabase> {
    georef.validate()?;
    let map = load_rgb(map_path)?;
    let (w, h) = map.dimensions();
    let rects = tile_satellite_map(w, h, opts.tile_size, opts.overlap)?;
    let tiles_dir = out_dir.join("tiles");
    std::fs::create_dir_all(&tiles_dir).map_err(|e| GeolocError::io(&tiles_dir, e))?;

    let tiles = rects
        .par_iter()
        .enumerate()
        .map(|(n, &rect)| {
            let tile_id = n as u32;
            let external = opts.descriptors_from.as_deref();
            let dense = match external.map(|d| external_dense_path(d, tile_id)) {
                Some(p) if p.exists() => DenseFeatureMap::load(&p)?,
                _ => extractor.extract(&crop_rgb(&map, rect))?,
            };
            let descriptor = match external {
                Some(d) => read_descriptor_file(external_descriptor_path(d, tile_id))?,
                None => aggregate_descriptor(&dense)?,
            };
            let dense_path = tiles_dir.join(format!("tile_{tile_id:04}.glft"));
            dense.save(&dense_path)?;
            Ok(TileRecord {
                tile_id,
                rect,
                georef: georef.shifted([rect.x0 as f64, rect.y0 as f64])?,
                descriptor,
                dense_features: Some(dense_path),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let db = TileDatabase {
        map_image: std::path::absolute(map_path).map_err(|e| GeolocError::io(map_path, e))?,
        map_width: w,
        map_height: h,
        map_georef: *georef,
        tile_size: opts.tile_size,
        overlap: opts.overlap,
        descriptor_source: match &opts.descriptors_from {
            Some(d) => format!("external:{}", d.display()),
            None => FALLBACK_SOURCE.into(),
        },
        tiles,
    };
    db.save(out_dir)?;
    Ok(db)
}

/// A loaded database with the map raster and tile features in memory.
pub struct Database {
    pub tiles: TileDatabase,
    pub map_gray: GrayImageF,
    dense: Vec<DenseFeatureMap>,
}

impl Database {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let tiles = TileDatabase::load(dir)?;
        let map = load_rgb(&tiles.map_image)?;
        Self::from_parts(tiles, &map)
    }

    /// Builds the in-memory database from a tile index and the map raster,
    /// loading each tile's stored dense features.
    pub fn from_parts(tiles: TileDatabase, map: &RgbImageF) -> Result<Self> {
        if map.dimensions() != (tiles.map_width, tiles.map_height) {
            return Err(GeolocError::Format(format!(
                "map image is {:?}, database expects {}x{}",
                map.dimensions(),
                tiles.map_width,
                tiles.map_height
            )));
        }
        let dense = tiles
            .tiles
            .iter()
            .map(|t| {
                let p = t.dense_features.as_ref().ok_or_else(|| {
                    GeolocError::Format(format!("tile {} has no dense features", t.tile_id))
                })?;
                DenseFeatureMap::load(p)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Database {
            tiles,
            map_gray: to_gray(map),
            dense,
        })
    }

    fn tile_index(&self, tile_id: u32) -> Result<usize> {
        self.tiles
            .tiles
            .iter()
            .position(|t| t.tile_id == tile_id)
            .ok_or_else(|| GeolocError::Format(format!("unknown tile {tile_id}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameStatus {
    /// Position from the fine homography.
    Ok,
    /// Coarse matching succeeded but no fine stage did; position is the
    /// matched satellite region's center.
    FineFail,
    /// Position is the top-1 tile center.
    RetrievalOnly,
    /// The frame's inputs could not be read; no position.
    InputError,
}

impl fmt::Display for FrameStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FrameStatus::Ok => "ok",
            FrameStatus::FineFail => "fine_fail",
            FrameStatus::RetrievalOnly => "retrieval_only",
            FrameStatus::InputError => "input_error",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub frame_id: String,
    pub status: FrameStatus,
    pub tile_id: Option<u32>,
    /// UAV region in frame pixels, satellite region in tile pixels.
    pub region: Option<RegionCorrespondence>,
    /// UAV-region pixels → satellite-region pixels.
    pub homography: Option<[[f64; 3]; 3]>,
    pub inliers: usize,
    /// Estimated frame center in map pixels.
    pub map_pixel: Option<[f64; 2]>,
    pub estimate: Option<GeoPoint>,
    pub ground_truth: GeoPoint,
    pub error_m: Option<f64>,
    /// Why earlier candidates or stages were rejected.
    pub notes: Vec<String>,
}

impl FrameResult {
    fn new(frame: &FrameEntry) -> Self {
        FrameResult {
            frame_id: frame.frame_id.clone(),
            status: FrameStatus::InputError,
            tile_id: None,
            region: None,
            homography: None,
            inliers: 0,
            map_pixel: None,
            estimate: None,
            ground_truth: frame.ground_truth(),
            error_m: None,
            notes: Vec::new(),
        }
    }

    fn place(&mut self, georef: &GeoRef, map_pixel: [f64; 2]) -> Result<()> {
        let est = pixel_to_geo(georef, map_pixel)?;
        self.map_pixel = Some(map_pixel);
        self.estimate = Some(est);
        self.error_m = Some(localization_error(est, self.ground_truth));
        Ok(())
    }
}

/// Frame inputs after loading and the central-square crop.
struct FrameInputs {
    /// Grayscale central square, if the frame has an image.
    gray: Option<GrayImageF>,
    /// Side of the central square in frame pixels.
    side: u32,
    features: DenseFeatureMap,
    query: QueryDescriptor,
}

fn central_square(w: u32, h: u32) -> PixelRect {
    let side = w.min(h);
    let (x0, y0) = ((w - side) / 2, (h - side) / 2);
    PixelRect::new(x0, y0, x0 + side, y0 + side)
}

fn load_frame(frame: &FrameEntry, models: &Models) -> Result<FrameInputs> {
    let image = frame.image.as_ref().map(load_rgb).transpose()?;
    let square = image.as_ref().map(|img| {
        let r = central_square(img.width(), img.height());
        (r, crop_rgb(img, r))
    });
    let features = match (&frame.features, &square) {
        (Some(p), _) => DenseFeatureMap::load(p)?,
        (None, Some((_, crop))) => models.dense.extract(crop)?,
        (None, None) => {
            return Err(GeolocError::Format(format!(
                "frame {:?} has neither an image nor a feature file",
                frame.frame_id
            )))
        }
    };
    let query = match &frame.descriptor {
        Some(p) => QueryDescriptor::new(&read_descriptor_file(p)?)?,
        None => QueryDescriptor::new(&aggregate_descriptor(&features)?)?,
    };
    let side = match &square {
        Some((r, _)) => r.width(),
        None => features.source_width().max(features.source_height()),
    };
    Ok(FrameInputs {
        gray: square.map(|(_, crop)| to_gray(&crop)),
        side,
        features,
        query,
    })
}

/// Fine-stage outcome for one candidate tile.
struct FineHit {
    homography: [[f64; 3]; 3],
    inliers: usize,
    map_pixel: [f64; 2],
}

fn fine_stage(
    inputs: &FrameInputs,
    region: &RegionCorrespondence,
    tile: &TileRecord,
    db: &Database,
    models: &Models,
    cfg: &PipelineConfig,
) -> Result<FineHit> {
    let gray = inputs.gray.as_ref().ok_or_else(|| {
        GeolocError::Format("fine matching needs the frame image".into())
    })?;
    let region_a = region.uav_region;
    let region_b = region.sat_region;
    let patch_a = crop_gray(gray, region_a);
    let sat_abs = PixelRect::new(
        tile.rect.x0 + region_b.x0,
        tile.rect.y0 + region_b.y0,
        tile.rect.x0 + region_b.x1,
        tile.rect.y0 + region_b.y1,
    );
    let patch_b = crop_gray(&db.map_gray, sat_abs);
    let seed = cfg.seed ^ (tile.tile_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let fit = match_regions(&patch_a, &patch_b, models.fine.as_ref(), &cfg.fine, seed)?;

    // Frame center relative to region A.
    let c = inputs.side as f64 / 2.0;
    let c_a = [c - region_a.x0 as f64, c - region_a.y0 as f64];
    let p = project_center(&fit.homography, c_a)?;
    let (s_min, s_max, det) = local_scales(&fit.homography.rows(), c_a);
    if det <= 0.0 || s_min < 1.0 / cfg.max_scale_change || s_max > cfg.max_scale_change {
        return Err(GeolocError::Estimation(format!(
            "implausible homography: local scales {s_min:.2}..{s_max:.2}, det {det:.2}"
        )));
    }
    // Reject projections far outside the matched region: the estimate
    // must stay within one region size of it.
    let (bw, bh) = (region_b.width() as f64, region_b.height() as f64);
    if p[0] < -bw || p[0] > 2.0 * bw || p[1] < -bh || p[1] > 2.0 * bh {
        return Err(GeolocError::Estimation(format!(
            "center projects to ({:.1}, {:.1}), outside the {}x{} region",
            p[0], p[1], region_b.width(), region_b.height()
        )));
    }
    Ok(FineHit {
        homography: fit.homography.rows(),
        inliers: fit.inliers,
        map_pixel: [sat_abs.x0 as f64 + p[0], sat_abs.y0 as f64 + p[1]],
    })
}

/// Singular values and determinant of the homography's Jacobian at `p`.
fn local_scales(h: &[[f64; 3]; 3], p: [f64; 2]) -> (f64, f64, f64) {
    let [x, y] = p;
    let w = h[2][0] * x + h[2][1] * y + h[2][2];
    let u = (h[0][0] * x + h[0][1] * y + h[0][2]) / w;
    let v = (h[1][0] * x + h[1][1] * y + h[1][2]) / w;
    let j = nalgebra::Matrix2::new(
        (h[0][0] - u * h[2][0]) / w,
        (h[0][1] - u * h[2][1]) / w,
        (h[1][0] - v * h[2][0]) / w,
        (h[1][1] - v * h[2][1]) / w,
    );
    let sv = j.singular_values();
    (sv.min(), sv.max(), j.determinant())
}

/// Coarse match against one tile, with both regions mapped back to full
/// resolution (frame pixels and tile pixels).
fn coarse_stage(
    inputs: &FrameInputs,
    fs: &DenseFeatureMap,
    tile: &TileRecord,
    models: &Models,
    cfg: &PipelineConfig,
) -> Result<RegionCorrespondence> {
    let fu = &inputs.features;
    let matches = coarse_match(fu, fs, &models.consensus, &cfg.coarse)?;
    let r = center_region_correspondence(&matches, fu, fs, &cfg.coarse)?;
    let su = inputs.side as f64 / fu.source_width() as f64;
    let ss = tile.rect.width() as f64 / fs.source_width() as f64;
    let uav = r.uav_region.rescaled(su, su, inputs.side, inputs.side);
    let sat = r.sat_region.rescaled(ss, ss, tile.rect.width(), tile.rect.height());
    if uav.is_empty() || sat.is_empty() {
        return Err(GeolocError::CoarseMatchFailure("empty region after rescaling".into()));
    }
    Ok(RegionCorrespondence {
        uav_region: uav,
        sat_region: sat,
        ..r
    })
}

/// Localizes one frame: retrieval, then coarse and fine matching on each
/// of the top-k tiles in rank order until one succeeds. Failures degrade
/// to the best coarse region center, then to the top-1 tile center.
pub fn localize_frame(
    frame: &FrameEntry,
    db: &Database,
    models: &Models,
    cfg: &PipelineConfig,
) -> Result<FrameResult> {
    cfg.validate()?;
    if db.tiles.tiles.is_empty() {
        return Err(GeolocError::Config("tile database is empty".into()));
    }
    let mut result = FrameResult::new(frame);
    let inputs = match load_frame(frame, models) {
        Ok(i) => i,
        Err(e) => {
            result.notes.push(format!("input: {e}"));
            return Ok(result);
        }
    };
    let hits = match query_top_k(&inputs.query, &db.tiles.tiles, cfg.k) {
        Ok(h) => h,
        Err(e @ GeolocError::Dimension(_)) => {
            result.notes.push(format!("retrieval: {e}"));
            return Ok(result);
        }
        Err(e) => return Err(e),
    };
    let georef = &db.tiles.map_georef;
    let top = db.tile_index(hits[0].tile_id)?;
    let place_at_tile_center = |result: &mut FrameResult| -> Result<()> {
        let t = &db.tiles.tiles[top];
        let (cx, cy) = t.rect.center();
        result.status = FrameStatus::RetrievalOnly;
        result.tile_id = Some(t.tile_id);
        result.place(georef, [cx, cy])
    };
    if cfg.mode == MatchingMode::RetrievalOnly {
        place_at_tile_center(&mut result)?;
        return Ok(result);
    }

    let mut best_coarse: Option<(RetrievalHit, RegionCorrespondence)> = None;
    for hit in &hits {
        let idx = db.tile_index(hit.tile_id)?;
        let tile = &db.tiles.tiles[idx];
        let region = match coarse_stage(&inputs, &db.dense[idx], tile, models, cfg) {
            Ok(r) => r,
            Err(e) => {
                result.notes.push(format!("tile {}: coarse: {e}", hit.tile_id));
                continue;
            }
        };
        let better = |b: &RegionCorrespondence| {
            (region.support, region.confidence) > (b.support, b.confidence)
        };
        if best_coarse.as_ref().is_none_or(|(_, b)| better(b)) {
            best_coarse = Some((*hit, region));
        }
        match fine_stage(&inputs, &region, tile, db, models, cfg) {
            Ok(fine) => {
                result.status = FrameStatus::Ok;
                result.tile_id = Some(hit.tile_id);
                result.region = Some(region);
                result.homography = Some(fine.homography);
                result.inliers = fine.inliers;
                result.place(georef, fine.map_pixel)?;
                return Ok(result);
            }
            Err(e) => result.notes.push(format!("tile {}: fine: {e}", hit.tile_id)),
        }
    }
    match best_coarse {
        Some((hit, region)) => {
            let tile = db.tiles.tile(hit.tile_id).expect("hit comes from the database");
            let (cx, cy) = region.sat_region.center();
            result.status = FrameStatus::FineFail;
            result.tile_id = Some(hit.tile_id);
            result.region = Some(region);
            result.place(georef, [tile.rect.x0 as f64 + cx, tile.rect.y0 as f64 + cy])?;
        }
        None => place_at_tile_center(&mut result)?,
    }
    Ok(result)
}

/// Per-frame results plus trajectory metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub results: Vec<FrameResult>,
    pub eval: TrajectoryEval,
}

/// Localization error used for metrics: frames without an estimate count
/// as drift.
fn scored_error(r: &FrameResult) -> f64 {
    r.error_m.unwrap_or(f64::MAX)
}

/// Localizes every frame independently, in manifest order.
pub fn run_sequence(
    manifest: &DatasetManifest,
    db: &Database,
    models: &Models,
    cfg: &PipelineConfig,
) -> Result<SequenceReport> {
    manifest.validate()?;
    let mut results = Vec::with_capacity(manifest.frames.len());
    for frame in &manifest.frames {
        let r = localize_frame(frame, db, models, cfg)?;
        log::info!(
            "{}: {} tile {:?} error {:?} m",
            r.frame_id,
            r.status,
            r.tile_id,
            r.error_m
        );
        results.push(r);
    }
    let errors: Vec<f64> = results.iter().map(scored_error).collect();
    let eval = evaluate_trajectory(&errors)?;
    Ok(SequenceReport { results, eval })
}

impl SequenceReport {
    pub fn rows(&self) -> Vec<TrajectoryRow> {
        self.results
            .iter()
            .zip(&self.eval.drift)
            .map(|(r, &drift)| {
                let est = r.estimate.unwrap_or(GeoPoint::new(f64::NAN, f64::NAN));
                TrajectoryRow {
                    frame_id: r.frame_id.clone(),
                    est_lat: est.lat,
                    est_lon: est.lon,
                    gt_lat: r.ground_truth.lat,
                    gt_lon: r.ground_truth.lon,
                    error_m: r.error_m.unwrap_or(f64::INFINITY),
                    drift,
                }
            })
            .collect()
    }

    pub fn summary(&self) -> MetricsSummary {
        MetricsSummary::from(&self.eval)
    }

    /// Writes `results.csv`, `results.json` and `metrics.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| GeolocError::io(dir, e))?;
        let csv_path = dir.join("results.csv");
        let file = std::fs::File::create(&csv_path).map_err(|e| GeolocError::io(&csv_path, e))?;
        write_trajectory_csv(file, &self.rows())?;
        let write_json = |name: &str, value: serde_json::Value| -> Result<()> {
            let path = dir.join(name);
            let text =
                serde_json::to_string_pretty(&value).map_err(|e| GeolocError::json(&path, e))?;
            std::fs::write(&path, text).map_err(|e| GeolocError::io(&path, e))
        };
        write_json("results.json", serde_json::json!(self.results))?;
        write_json("metrics.json", serde_json::json!(self.summary()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_square_is_centered() {
        assert_eq!(central_square(640, 480), PixelRect::new(80, 0, 560, 480));
        assert_eq!(central_square(300, 500), PixelRect::new(0, 100, 300, 400));
        assert_eq!(central_square(64, 64), PixelRect::new(0, 0, 64, 64));
    }

    #[test]
    fn config_validation() {
        assert!(PipelineConfig::default().validate().is_ok());
        let bad = PipelineConfig { k: 0, ..Default::default() };
        assert!(matches!(bad.validate(), Err(GeolocError::Config(_))));
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = PipelineConfig {
            fine_backend: FineBackendKind::Neural("w".into()),
            mode: MatchingMode::RetrievalOnly,
            ..Default::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&text).unwrap(), cfg);
        let partial: PipelineConfig = serde_json::from_str(r#"{"k": 5}"#).unwrap();
        assert_eq!(partial.k, 5);
        assert_eq!(partial.fine, FineConfig::default());
    }

    #[test]
    fn local_scales_of_similarity_and_reflection() {
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let h = [[1.5 * c, -1.5 * s, 4.0], [1.5 * s, 1.5 * c, -2.0], [0.0, 0.0, 1.0]];
        let (lo, hi, det) = local_scales(&h, [10.0, 20.0]);
        assert!((lo - 1.5).abs() < 1e-12 && (hi - 1.5).abs() < 1e-12);
        assert!((det - 2.25).abs() < 1e-12);
        let flip = [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(local_scales(&flip, [3.0, 3.0]).2 < 0.0);
        // Projective: the Jacobian at the origin of x / (1 + 0.01 x) is 1.
        let persp = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.01, 0.0, 1.0]];
        let (lo, hi, _) = local_scales(&persp, [0.0, 0.0]);
        assert!((lo - 1.0).abs() < 1e-12 && (hi - 1.0).abs() < 1e-12);
        let (lo, _, _) = local_scales(&persp, [100.0, 0.0]);
        assert!((lo - 0.25).abs() < 1e-12);
    }

    #[test]
    fn status_names() {
        assert_eq!(FrameStatus::FineFail.to_string(), "fine_fail");
        assert_eq!(
            serde_json::to_string(&FrameStatus::RetrievalOnly).unwrap(),
            "\"retrieval_only\""
        );
    }
}
