//! Procedural benchmark: a textured, geo-referenced map and UAV-like frames
//! rendered from it through known homographies.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GeolocError, Result};
use crate::geo::{pixel_to_geo, GeoRef};
use crate::imaging::{quantize, save_rgb, warp_perspective, RgbImageF};
use crate::store::{DatasetManifest, FrameEntry, MapEntry};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub map_size: u32,
    pub frames: usize,
    /// Ground sample distance of the map in m/px.
    pub gsd: f64,
    pub frame_size: u32,
    pub tile_size: u32,
    pub overlap: u32,
    pub scale_range: (f64, f64),
    /// Maximum absolute rotation in degrees.
    pub max_rotation_deg: f64,
    /// Maximum magnitude of each projective coefficient, per pixel.
    pub max_perspective: f64,
    /// Relative brightness and contrast jitter.
    pub photometric_jitter: f64,
    pub origin_lat: f64,
    pub origin_lon: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 42,
            map_size: 2048,
            frames: 50,
            gsd: 0.5,
            frame_size: 512,
            tile_size: 512,
            overlap: 256,
            scale_range: (0.8, 1.2),
            max_rotation_deg: 15.0,
            max_perspective: 1e-4,
            photometric_jitter: 0.2,
            origin_lat: 47.3769,
            origin_lon: 8.5417,
        }
    }
}

/// Ground truth of one rendered frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FramePose {
    /// Frame pixel → map pixel.
    pub frame_to_map: [[f64; 3]; 3],
    /// Map pixel under the frame center.
    pub center: [f64; 2],
    pub scale: f64,
    pub rotation_deg: f64,
    pub gain: f64,
    pub contrast: f64,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub map: RgbImageF,
    pub georef: GeoRef,
    pub frames: Vec<RgbImageF>,
    pub poses: Vec<FramePose>,
}

impl SynthDataset {
    pub fn frame_id(n: usize) -> String {
        format!("frame_{n:04}")
    }

    /// Manifest with image paths relative to the output directory.
    pub fn manifest(&self) -> Result<DatasetManifest> {
        let frames = self
            .poses
            .iter()
            .enumerate()
            .map(|(n, pose)| {
                let gt = pixel_to_geo(&self.georef, pose.center)?;
                Ok(FrameEntry {
                    frame_id: Self::frame_id(n),
                    image: Some(PathBuf::from(format!("frames/{}.png", Self::frame_id(n)))),
                    features: None,
                    descriptor: None,
                    gt_lat: gt.lat,
                    gt_lon: gt.lon,
                    timestamp: n as f64,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DatasetManifest {
            frames,
            map: MapEntry {
                width: self.config.map_size,
                height: self.config.map_size,
                georef: self.georef,
                tile_size: self.config.tile_size,
                overlap: self.config.overlap,
                image: Some(PathBuf::from("map.png")),
            },
        })
    }

    /// Writes `map.png`, `georef.json`, `frames/*.png`, `poses.json` and
    /// `manifest.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        let frames_dir = dir.join("frames");
        std::fs::create_dir_all(&frames_dir).map_err(|e| GeolocError::io(&frames_dir, e))?;
        save_rgb(&self.map, dir.join("map.png"))?;
        self.frames
            .par_iter()
            .enumerate()
            .try_for_each(|(n, f)| save_rgb(f, frames_dir.join(format!("{}.png", Self::frame_id(n)))))?;
        let write_json = |name: &str, value: &serde_json::Value| -> Result<()> {
            let path = dir.join(name);
            let text = serde_json::to_string_pretty(value).map_err(|e| GeolocError::json(&path, e))?;
            std::fs::write(&path, text).map_err(|e| GeolocError::io(&path, e))
        };
        write_json("georef.json", &serde_json::json!(self.georef))?;
        write_json("poses.json", &serde_json::json!(self.poses))?;
        let manifest_path = dir.join("manifest.json");
        self.manifest()?.save(&manifest_path)?;
        Ok(manifest_path)
    }
}

/// Smoothly interpolated lattice noise in `[-1, 1]`.
struct ValueNoise {
    cells: usize,
    wavelength: f64,
    lattice: Vec<f32>,
}

impl ValueNoise {
    fn new(size: u32, wavelength: f64, rng: &mut ChaCha8Rng) -> Self {
        let cells = (size as f64 / wavelength).ceil() as usize + 2;
        let lattice = (0..cells * cells).map(|_| rng.random_range(-1.0..1.0)).collect();
        ValueNoise { cells, wavelength, lattice }
    }

    fn at(&self, x: f64, y: f64) -> f32 {
        let (gx, gy) = (x / self.wavelength, y / self.wavelength);
        let (i, j) = (gx.floor().max(0.0) as usize, gy.floor().max(0.0) as usize);
        let (i, j) = (i.min(self.cells - 2), j.min(self.cells - 2));
        let s = |t: f64| (t * t * (3.0 - 2.0 * t)) as f32;
        let (fx, fy) = (s((gx - i as f64).clamp(0.0, 1.0)), s((gy - j as f64).clamp(0.0, 1.0)));
        let v = |a: usize, b: usize| self.lattice[b * self.cells + a];
        let top = v(i, j) * (1.0 - fx) + v(i + 1, j) * fx;
        let bot = v(i, j + 1) * (1.0 - fx) + v(i + 1, j + 1) * fx;
        top * (1.0 - fy) + bot * fy
    }
}

/// Land-cover palette: base color and texture strength.
const LAND_COVER: [([f32; 3], f32); 6] = [
    ([0.55, 0.58, 0.30], 0.8),
    ([0.20, 0.33, 0.20], 1.2),
    ([0.52, 0.52, 0.52], 0.6),
    ([0.22, 0.30, 0.45], 0.3),
    ([0.58, 0.47, 0.33], 1.0),
    ([0.42, 0.56, 0.33], 0.9),
];

const ROOF_COLORS: [[f32; 3]; 5] = [
    [0.62, 0.30, 0.24],
    [0.78, 0.76, 0.72],
    [0.35, 0.35, 0.38],
    [0.70, 0.55, 0.40],
    [0.25, 0.22, 0.20],
];

struct Shape {
    center: [f64; 2],
    half: [f64; 2],
    cos: f64,
    sin: f64,
    color: [f32; 3],
    round: bool,
}

impl Shape {
    fn covers(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        if self.round {
            (u / self.half[0]).powi(2) + (v / self.half[1]).powi(2) <= 1.0
        } else {
            u.abs() <= self.half[0] && v.abs() <= self.half[1]
        }
    }

    fn reach(&self) -> f64 {
        self.half[0].hypot(self.half[1])
    }
}

/// Renders the procedural map: warped Voronoi land cover, multi-octave
/// texture, roads, buildings and tree crowns.
pub fn render_map(size: u32, rng: &mut ChaCha8Rng) -> RgbImageF {
    let s = size as f64;
    let region_step = 340.0;
    let n_side = (s / region_step).ceil() as usize + 1;
    let mut sites = Vec::new();
    for gy in 0..n_side {
        for gx in 0..n_side {
            let x = (gx as f64 + rng.random_range(0.15..0.85)) * region_step - region_step / 2.0;
            let y = (gy as f64 + rng.random_range(0.15..0.85)) * region_step - region_step / 2.0;
            let class = rng.random_range(0..LAND_COVER.len());
            let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.05..0.05));
            sites.push(([x, y], class, tint));
        }
    }
    let warp_x = ValueNoise::new(size, 160.0, rng);
    let warp_y = ValueNoise::new(size, 160.0, rng);
    let octaves: Vec<(ValueNoise, f32)> = [(90.0, 0.10), (40.0, 0.08), (18.0, 0.06), (8.0, 0.03)]
        .iter()
        .map(|&(l, a)| (ValueNoise::new(size, l, rng), a))
        .collect();
    let hue = ValueNoise::new(size, 60.0, rng);

    // Roads: long straight strips; buildings denser in built-up cover.
    let mut shapes = Vec::new();
    for _ in 0..(s / 180.0) as usize {
        let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
        shapes.push(Shape {
            center: [rng.random_range(0.0..s), rng.random_range(0.0..s)],
            half: [s, rng.random_range(2.5..5.0)],
            cos: angle.cos(),
            sin: angle.sin(),
            color: [0.40, 0.40, 0.42],
            round: false,
        });
    }
    let n_buildings = (s * s / 3500.0) as usize;
    for _ in 0..n_buildings {
        let center = [rng.random_range(0.0..s), rng.random_range(0.0..s)];
        let angle: f64 = rng.random_range(-0.6..0.6);
        let round = rng.random_bool(0.3);
        let half = if round {
            let r = rng.random_range(3.0..8.0);
            [r, r]
        } else {
            [rng.random_range(5.0..20.0), rng.random_range(5.0..16.0)]
        };
        let color = if round {
            [0.12, 0.25, 0.12]
        } else {
            ROOF_COLORS[rng.random_range(0..ROOF_COLORS.len())]
        };
        shapes.push(Shape { center, half, cos: angle.cos(), sin: angle.sin(), color, round });
    }

    // Bucket shapes by 64-px blocks so each pixel tests only nearby shapes.
    const BLOCK: f64 = 64.0;
    let nb = (s / BLOCK).ceil() as usize;
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); nb * nb];
    for (n, sh) in shapes.iter().enumerate() {
        let r = sh.reach();
        let bx0 = ((sh.center[0] - r) / BLOCK).floor().max(0.0) as usize;
        let by0 = ((sh.center[1] - r) / BLOCK).floor().max(0.0) as usize;
        let bx1 = (((sh.center[0] + r) / BLOCK).floor() as usize).min(nb - 1);
        let by1 = (((sh.center[1] + r) / BLOCK).floor() as usize).min(nb - 1);
        if sh.center[0] + r < 0.0 || sh.center[1] + r < 0.0 {
            continue;
        }
        for by in by0..=by1 {
            for bx in bx0..=bx1 {
                buckets[by * nb + bx].push(n);
            }
        }
    }

    let mut data = vec![0.0f32; (size * size * 3) as usize];
    data.par_chunks_mut(size as usize * 3).enumerate().for_each(|(y, row)| {
        for x in 0..size as usize {
            let (xf, yf) = (x as f64, y as f64);
            let wx = xf + 45.0 * warp_x.at(xf, yf) as f64;
            let wy = yf + 45.0 * warp_y.at(xf, yf) as f64;
            let (_, class, tint) = sites
                .iter()
                .min_by(|a, b| {
                    let da = (a.0[0] - wx).powi(2) + (a.0[1] - wy).powi(2);
                    let db = (b.0[0] - wx).powi(2) + (b.0[1] - wy).powi(2);
                    da.total_cmp(&db)
                })
                .expect("sites");
            let (base, strength) = LAND_COVER[*class];
            let t: f32 = octaves.iter().map(|(n, a)| a * n.at(xf, yf)).sum::<f32>() * strength;
            let h = 0.04 * hue.at(xf, yf) * strength;
            let mut px = [
                base[0] + tint[0] + t + h,
                base[1] + tint[1] + t,
                base[2] + tint[2] + t - h,
            ];
            let bucket = &buckets[(y / BLOCK as usize) * nb + x / BLOCK as usize];
            for &n in bucket {
                let sh = &shapes[n];
                if sh.covers(xf, yf) {
                    let shade = 0.03 * octaves[3].0.at(xf, yf);
                    px = [sh.color[0] + shade, sh.color[1] + shade, sh.color[2] + shade];
                }
            }
            for c in 0..3 {
                row[x * 3 + c] = px[c].clamp(0.02, 0.95);
            }
        }
    });
    RgbImageF::from_raw(size, size, data).expect("buffer size matches")
}

fn frame_to_map(center: [f64; 2], scale: f64, angle: f64, persp: [f64; 2], half: f64) -> Matrix3<f64> {
    let t_center = Matrix3::new(1.0, 0.0, center[0], 0.0, 1.0, center[1], 0.0, 0.0, 1.0);
    let (c, s) = (angle.cos(), angle.sin());
    let rs = Matrix3::new(scale * c, -scale * s, 0.0, scale * s, scale * c, 0.0, 0.0, 0.0, 1.0);
    let k = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, persp[0], persp[1], 1.0);
    let t_frame = Matrix3::new(1.0, 0.0, -half, 0.0, 1.0, -half, 0.0, 0.0, 1.0);
    t_center * rs * k * t_frame
}

/// Generates the map and `frames` warped views with exact ground truth.
/// Deterministic for a given config.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    if cfg.map_size < 4 * cfg.tile_size {
        return Err(GeolocError::Config(format!(
            "map size {} must be at least four tiles ({} px)",
            cfg.map_size,
            4 * cfg.tile_size
        )));
    }
    if !(cfg.scale_range.0 > 0.0 && cfg.scale_range.0 <= cfg.scale_range.1) {
        return Err(GeolocError::Config(format!("bad scale range {:?}", cfg.scale_range)));
    }
    let georef = GeoRef::new(cfg.origin_lat, cfg.origin_lon, cfg.gsd, cfg.gsd)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let map = quantize(&render_map(cfg.map_size, &mut rng));

    let half = cfg.frame_size as f64 / 2.0;
    // Keep the whole (slightly keystoned) footprint on the map.
    let margin = (half * cfg.scale_range.1 * std::f64::consts::SQRT_2 * 1.1).ceil() + 2.0;
    let lo = margin;
    let hi = cfg.map_size as f64 - margin;
    if lo >= hi {
        return Err(GeolocError::Config("frame footprint does not fit the map".into()));
    }
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut poses = Vec::with_capacity(cfg.frames);
    for _ in 0..cfg.frames {
        let center = [rng.random_range(lo..hi), rng.random_range(lo..hi)];
        let scale = rng.random_range(cfg.scale_range.0..=cfg.scale_range.1);
        let rotation_deg = rng.random_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg);
        let p = cfg.max_perspective;
        let persp = [rng.random_range(-p..=p), rng.random_range(-p..=p)];
        let j = cfg.photometric_jitter;
        let gain = rng.random_range(1.0 - j..=1.0 + j);
        let contrast = rng.random_range(1.0 - j..=1.0 + j);
        let h = frame_to_map(center, scale, rotation_deg.to_radians(), persp, half);

        let mut frame = warp_perspective(&map, &h, cfg.frame_size, cfg.frame_size);
        let n = (frame.width() * frame.height() * 3) as f32;
        let mean = frame.as_raw().iter().sum::<f32>() / n;
        for v in frame.iter_mut() {
            *v = ((mean + contrast as f32 * (*v - mean)) * gain as f32).clamp(0.0, 1.0);
        }
        let mapped = h * Vector3::new(half, half, 1.0);
        frames.push(quantize(&frame));
        poses.push(FramePose {
            frame_to_map: std::array::from_fn(|r| std::array::from_fn(|c| h[(r, c)])),
            center: [mapped.x / mapped.z, mapped.y / mapped.z],
            scale,
            rotation_deg,
            gain,
            contrast,
        });
    }
    Ok(SynthDataset {
        config: *cfg,
        map,
        georef,
        frames,
        poses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            map_size: 512,
            tile_size: 128,
            overlap: 64,
            frame_size: 96,
            frames: 3,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synth_dataset(&small()).unwrap();
        let b = synth_dataset(&small()).unwrap();
        assert_eq!(a.map, b.map);
        assert_eq!(a.poses, b.poses);
        assert_eq!(a.manifest().unwrap(), b.manifest().unwrap());
        let c = synth_dataset(&SynthConfig { seed: 7, ..small() }).unwrap();
        assert_ne!(a.map, c.map);
    }

    #[test]
    fn ground_truth_is_warped_center() {
        let d = synth_dataset(&small()).unwrap();
        for pose in &d.poses {
            let m = Matrix3::from_fn(|r, c| pose.frame_to_map[r][c]);
            let v = m * Vector3::new(48.0, 48.0, 1.0);
            assert!((v.x / v.z - pose.center[0]).abs() < 1e-9);
            assert!((v.y / v.z - pose.center[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_warp_center_is_crop_center() {
        let cfg = SynthConfig {
            scale_range: (1.0, 1.0),
            max_rotation_deg: 0.0,
            max_perspective: 0.0,
            photometric_jitter: 0.0,
            ..small()
        };
        let d = synth_dataset(&cfg).unwrap();
        let pose = d.poses[0];
        let m = Matrix3::from_fn(|r, c| pose.frame_to_map[r][c]);
        let corner = m * Vector3::new(0.0, 0.0, 1.0);
        assert!((corner.x + 48.0 - pose.center[0]).abs() < 1e-9);
        assert!((corner.y + 48.0 - pose.center[1]).abs() < 1e-9);
        // Integer crop offsets reproduce the map exactly.
        let (x0, y0) = (corner.x, corner.y);
        if x0.fract() == 0.0 && y0.fract() == 0.0 {
            assert_eq!(d.frames[0].get_pixel(0, 0), d.map.get_pixel(x0 as u32, y0 as u32));
        }
    }

    #[test]
    fn rejects_small_map() {
        let cfg = SynthConfig { map_size: 400, tile_size: 128, ..small() };
        assert!(synth_dataset(&cfg).is_err());
    }
}
