//! Satellite-map tiling, the global-descriptor database and top-k lookup.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{GeolocError, Result};
use crate::geo::GeoRef;
use crate::imaging::PixelRect;
use crate::store::{read_tensor, write_tensor, TensorMeta};
use crate::tensor::DenseFeatureMap;

/// Exponent of the generalized-mean pooling fallback aggregator.
pub const GEM_POWER: f64 = 3.0;

fn axis_starts(len: u32, tile: u32, step: u32) -> Vec<u32> {
    let last = len - tile;
    let mut starts: Vec<u32> = (0..).map(|n| n * step).take_while(|&s| s < last).collect();
    starts.push(last);
    starts
}

/// Row-major tile grid with stride `tile_size - overlap`; the last row and
/// column are shifted inward so every tile is full-size.
pub fn tile_satellite_map(
    width: u32,
    height: u32,
    tile_size: u32,
    overlap: u32,
) -> Result<Vec<PixelRect>> {
    if tile_size == 0 || overlap >= tile_size {
        return Err(GeolocError::Config(format!(
            "tile_size {tile_size} must exceed overlap {overlap}"
        )));
    }
    if width < tile_size || height < tile_size {
        return Err(GeolocError::Format(format!(
            "{width}x{height} map is smaller than the {tile_size} px tile"
        )));
    }
    let step = tile_size - overlap;
    let xs = axis_starts(width, tile_size, step);
    let ys = axis_starts(height, tile_size, step);
    Ok(ys
        .iter()
        .flat_map(|&y| {
            xs.iter()
                .map(move |&x| PixelRect::new(x, y, x + tile_size, y + tile_size))
        })
        .collect())
}

fn normalized(v: Vec<f64>) -> Result<Vec<f32>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(GeolocError::Contract(
            "descriptor is all zero (or non-finite) and cannot be normalized".into(),
        ));
    }
    Ok(v.iter().map(|x| (x / norm) as f32).collect())
}

/// Generalized-mean pooling (p = 3) over cells, then L2 normalization.
/// Negative feature values are clamped to zero before pooling.
pub fn aggregate_descriptor(f: &DenseFeatureMap) -> Result<Vec<f32>> {
    let c = f.channels();
    let mut acc = vec![0.0f64; c];
    for cell in f.data().chunks_exact(c) {
        for (a, &v) in acc.iter_mut().zip(cell) {
            *a += (v.max(0.0) as f64).powf(GEM_POWER);
        }
    }
    let n = f.cells() as f64;
    normalized(acc.into_iter().map(|a| (a / n).powf(1.0 / GEM_POWER)).collect())
}

/// A unit-norm query vector.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryDescriptor(Vec<f32>);

impl QueryDescriptor {
    /// Normalizes a raw descriptor.
    pub fn new(raw: &[f32]) -> Result<Self> {
        Ok(QueryDescriptor(normalized(raw.iter().map(|&v| v as f64).collect())?))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileRecord {
    pub tile_id: u32,
    pub rect: PixelRect,
    pub georef: GeoRef,
    /// Unit-norm global descriptor. Persisted in a tensor file next to the
    /// database manifest rather than in the JSON.
    #[serde(skip)]
    pub descriptor: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dense_features: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalHit {
    pub tile_id: u32,
    pub similarity: f64,
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Exhaustive cosine ranking: descending similarity, ties by lower tile id,
/// truncated to `k`.
pub fn query_top_k(q: &QueryDescriptor, db: &[TileRecord], k: usize) -> Result<Vec<RetrievalHit>> {
    if db.is_empty() {
        return Err(GeolocError::Config("tile database is empty".into()));
    }
    if k == 0 {
        return Err(GeolocError::Config("k must be at least 1".into()));
    }
    let mut hits = Vec::with_capacity(db.len());
    for t in db {
        if t.descriptor.len() != q.as_slice().len() {
            return Err(GeolocError::Dimension(format!(
                "query has {} dims, tile {} has {}",
                q.as_slice().len(),
                t.tile_id,
                t.descriptor.len()
            )));
        }
        hits.push(RetrievalHit {
            tile_id: t.tile_id,
            similarity: dot(q.as_slice(), &t.descriptor),
        });
    }
    hits.sort_by(|a, b| {
        b.similarity
            .total_cmp(&a.similarity)
            .then(a.tile_id.cmp(&b.tile_id))
    });
    hits.truncate(k);
    Ok(hits)
}

const DB_MANIFEST: &str = "db.json";
const DB_DESCRIPTORS: &str = "descriptors.glft";

/// Persistent tile database: JSON manifest plus a descriptor matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileDatabase {
    pub map_image: PathBuf,
    pub map_width: u32,
    pub map_height: u32,
    pub map_georef: GeoRef,
    pub tile_size: u32,
    pub overlap: u32,
    /// Name of the backend that produced the descriptors.
    pub descriptor_source: String,
    pub tiles: Vec<TileRecord>,
}

impl TileDatabase {
    pub fn tile(&self, tile_id: u32) -> Option<&TileRecord> {
        self.tiles
            .get(tile_id as usize)
            .filter(|t| t.tile_id == tile_id)
            .or_else(|| self.tiles.iter().find(|t| t.tile_id == tile_id))
    }

    pub fn descriptor_dim(&self) -> usize {
        self.tiles.first().map_or(0, |t| t.descriptor.len())
    }

    /// Writes `db.json` and `descriptors.glft` into `dir`. Paths inside the
    /// directory are stored relative to it.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| GeolocError::io(dir, e))?;
        let d = self.descriptor_dim();
        if self.tiles.iter().any(|t| t.descriptor.len() != d) {
            return Err(GeolocError::Dimension(
                "tile descriptors differ in length".into(),
            ));
        }
        let flat: Vec<f32> = self.tiles.iter().flat_map(|t| t.descriptor.iter().copied()).collect();
        write_tensor(
            dir.join(DB_DESCRIPTORS),
            &flat,
            &[self.tiles.len(), d],
            &TensorMeta::layer("global_descriptors"),
        )?;
        let mut stored = self.clone();
        stored.map_image = relative_to(&stored.map_image, dir);
        for t in &mut stored.tiles {
            if let Some(p) = &t.dense_features {
                t.dense_features = Some(relative_to(p, dir));
            }
        }
        let path = dir.join(DB_MANIFEST);
        let text = serde_json::to_string_pretty(&stored).map_err(|e| GeolocError::json(&path, e))?;
        std::fs::write(&path, text).map_err(|e| GeolocError::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(DB_MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| GeolocError::io(&path, e))?;
        let mut db: TileDatabase = serde_json::from_str(&text)
            .map_err(|e| GeolocError::Format(format!("{}: {e}", path.display())))?;
        let rec = read_tensor(dir.join(DB_DESCRIPTORS))?;
        let &[n, d] = rec.dims.as_slice() else {
            return Err(GeolocError::Format(format!(
                "descriptor tensor must be rank 2, got dims {:?}",
                rec.dims
            )));
        };
        if n != db.tiles.len() {
            return Err(GeolocError::Format(format!(
                "{} descriptors for {} tiles",
                n,
                db.tiles.len()
            )));
        }
        for (t, row) in db.tiles.iter_mut().zip(rec.data.chunks_exact(d.max(1))) {
            t.descriptor = row.to_vec();
            if let Some(p) = &t.dense_features {
                t.dense_features = Some(dir.join(p));
            }
        }
        if db.map_image.is_relative() {
            db.map_image = dir.join(&db.map_image);
        }
        for t in &db.tiles {
            let norm = dot(&t.descriptor, &t.descriptor).sqrt();
            if (norm - 1.0).abs() > 1e-5 {
                return Err(GeolocError::Format(format!(
                    "tile {} descriptor has norm {norm}",
                    t.tile_id
                )));
            }
            if !t.rect.within(db.map_width, db.map_height) {
                return Err(GeolocError::Format(format!(
                    "tile {} rectangle {:?} leaves the map",
                    t.tile_id, t.rect
                )));
            }
        }
        Ok(db)
    }
}

fn relative_to(p: &Path, dir: &Path) -> PathBuf {
    p.strip_prefix(dir).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf())
}

/// Reads an externally computed global descriptor (any rank, flattened).
pub fn read_descriptor_file(path: impl AsRef<Path>) -> Result<Vec<f32>> {
    let rec = read_tensor(path.as_ref())?;
    QueryDescriptor::new(&rec.data)
        .map(|q| q.0)
        .map_err(|e| GeolocError::Format(format!("{}: {e}", path.as_ref().display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(id: u32, v: &[f32]) -> TileRecord {
        TileRecord {
            tile_id: id,
            rect: PixelRect::new(0, 0, 1, 1),
            georef: GeoRef::new(0.0, 0.0, 1.0, 1.0).unwrap(),
            descriptor: QueryDescriptor::new(v).unwrap().0,
            dense_features: None,
        }
    }

    #[test]
    fn tiling_examples() {
        assert_eq!(tile_satellite_map(1024, 1024, 512, 0).unwrap().len(), 4);
        assert_eq!(tile_satellite_map(1024, 1024, 512, 256).unwrap().len(), 9);
        let t = tile_satellite_map(700, 700, 512, 0).unwrap();
        assert_eq!(t.len(), 4);
        assert_eq!(t[3], PixelRect::new(188, 188, 700, 700));
        assert_eq!(tile_satellite_map(2048, 2048, 512, 256).unwrap().len(), 49);
        assert!(matches!(tile_satellite_map(500, 900, 512, 0), Err(GeolocError::Format(_))));
        assert!(tile_satellite_map(1024, 1024, 512, 512).is_err());
    }

    #[test]
    fn gem_examples() {
        let f = DenseFeatureMap::with_stride(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0], 14).unwrap();
        let d = aggregate_descriptor(&f).unwrap();
        assert!((d[0] - std::f32::consts::FRAC_1_SQRT_2).abs() < 1e-6 && (d[1] - std::f32::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        let c = DenseFeatureMap::with_stride(2, 2, 2, [3.0, 4.0].repeat(4), 14).unwrap();
        let d = aggregate_descriptor(&c).unwrap();
        assert!((d[0] - 0.6).abs() < 1e-6 && (d[1] - 0.8).abs() < 1e-6);
        let z = DenseFeatureMap::with_stride(1, 1, 2, vec![0.0, 0.0], 14).unwrap();
        assert!(aggregate_descriptor(&z).is_err());
    }

    #[test]
    fn ranking_example() {
        let db = vec![record(0, &[1.0, 0.0]), record(1, &[0.0, 1.0]), record(2, &[0.6, 0.8])];
        let q = QueryDescriptor::new(&[1.0, 0.0]).unwrap();
        let hits = query_top_k(&q, &db, 5).unwrap();
        let ids: Vec<u32> = hits.iter().map(|h| h.tile_id).collect();
        assert_eq!(ids, vec![0, 2, 1]);
        assert!((hits[0].similarity - 1.0).abs() < 1e-9);
        assert!((hits[1].similarity - 0.6).abs() < 1e-6);
        assert!(hits[2].similarity.abs() < 1e-9);
        assert_eq!(query_top_k(&q, &db, 1).unwrap().len(), 1);
        assert!(query_top_k(&q, &[], 1).is_err());
    }

    #[test]
    fn ties_prefer_lower_id() {
        let db = vec![record(3, &[1.0, 0.0]), record(1, &[1.0, 0.0])];
        let q = QueryDescriptor::new(&[2.0, 0.0]).unwrap();
        let hits = query_top_k(&q, &db, 2).unwrap();
        assert_eq!(hits[0].tile_id, 1);
    }

    #[test]
    fn database_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let db = TileDatabase {
            map_image: dir.path().join("map.png"),
            map_width: 4,
            map_height: 4,
            map_georef: GeoRef::new(10.0, 20.0, 0.5, 0.5).unwrap(),
            tile_size: 1,
            overlap: 0,
            descriptor_source: "test".into(),
            tiles: vec![record(0, &[1.0, 2.0]), record(1, &[0.0, 1.0])],
        };
        db.save(dir.path()).unwrap();
        let back = TileDatabase::load(dir.path()).unwrap();
        assert_eq!(back, db);
    }

    proptest! {
        #[test]
        fn tiling_covers_map(w in 64u32..600, h in 64u32..600, tile in 16u32..64, ov_frac in 0.0f64..0.9) {
            let overlap = ((tile as f64) * ov_frac) as u32;
            let tiles = tile_satellite_map(w, h, tile, overlap).unwrap();
            let step = tile - overlap;
            let per_axis = |len: u32| (len - tile).div_ceil(step) as usize + 1;
            prop_assert_eq!(tiles.len(), per_axis(w) * per_axis(h));
            let mut covered = vec![false; (w * h) as usize];
            for t in &tiles {
                prop_assert!(t.within(w, h));
                prop_assert_eq!((t.width(), t.height()), (tile, tile));
                for y in t.y0..t.y1 { for x in t.x0..t.x1 { covered[(y * w + x) as usize] = true; } }
            }
            prop_assert!(covered.iter().all(|&c| c));
        }

        #[test]
        fn ranking_is_scale_invariant(raw in proptest::collection::vec(proptest::collection::vec(0.01f32..1.0, 4), 2..12),
                                      q in proptest::collection::vec(0.01f32..1.0, 4),
                                      alpha in 0.01f32..100.0) {
            let db: Vec<TileRecord> = raw.iter().enumerate().map(|(i, v)| record(i as u32, v)).collect();
            let scaled: Vec<TileRecord> = raw.iter().enumerate()
                .map(|(i, v)| record(i as u32, &v.iter().map(|x| x * alpha).collect::<Vec<_>>())).collect();
            let q = QueryDescriptor::new(&q).unwrap();
            let a: Vec<u32> = query_top_k(&q, &db, db.len()).unwrap().iter().map(|h| h.tile_id).collect();
            let b: Vec<u32> = query_top_k(&q, &scaled, db.len()).unwrap().iter().map(|h| h.tile_id).collect();
            prop_assert_eq!(a, b);
        }
    }
}
