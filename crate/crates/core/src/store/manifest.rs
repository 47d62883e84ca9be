//! JSON dataset manifests: the frame list with ground truth plus the
//! reference map description.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{GeolocError, Result};
use crate::geo::{GeoPoint, GeoRef};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub frame_id: String,
    /// UAV image (PNG). Needed by the fallback dense backend and the fine stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
    /// Precomputed dense feature tensor for the coarse stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<PathBuf>,
    /// Precomputed global descriptor for retrieval.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub descriptor: Option<PathBuf>,
    pub gt_lat: f64,
    pub gt_lon: f64,
    #[serde(default)]
    pub timestamp: f64,
}

impl FrameEntry {
    pub fn ground_truth(&self) -> GeoPoint {
        GeoPoint::new(self.gt_lat, self.gt_lon)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapEntry {
    pub width: u32,
    pub height: u32,
    pub georef: GeoRef,
    pub tile_size: u32,
    pub overlap: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub frames: Vec<FrameEntry>,
    pub map: MapEntry,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for f in &self.frames {
            if !seen.insert(f.frame_id.as_str()) {
                return Err(GeolocError::Format(format!(
                    "duplicate frame_id {:?}",
                    f.frame_id
                )));
            }
            if !f.ground_truth().is_valid() {
                return Err(GeolocError::Format(format!(
                    "frame {:?} has out-of-range ground truth",
                    f.frame_id
                )));
            }
        }
        self.map
            .georef
            .validate()
            .map_err(|e| GeolocError::Format(format!("map georef: {e}")))?;
        if self.map.tile_size == 0 || self.map.overlap >= self.map.tile_size {
            return Err(GeolocError::Format(format!(
                "tile_size {} must exceed overlap {}",
                self.map.tile_size, self.map.overlap
            )));
        }
        Ok(())
    }

    /// Parses and validates a manifest; relative paths are resolved against
    /// the manifest's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| GeolocError::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| GeolocError::Format(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for f in &mut m.frames {
            resolve(&mut f.image, base);
            resolve(&mut f.features, base);
            resolve(&mut f.descriptor, base);
        }
        resolve(&mut m.map.image, base);
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| GeolocError::json(path, e))?;
        std::fs::write(path, text).map_err(|e| GeolocError::io(path, e))
    }
}

fn resolve(p: &mut Option<PathBuf>, base: &Path) {
    if let Some(inner) = p {
        if inner.is_relative() {
            *inner = base.join(&*inner);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> DatasetManifest {
        DatasetManifest {
            frames: vec![FrameEntry {
                frame_id: "0".into(),
                image: Some("frames/0.png".into()),
                features: None,
                descriptor: None,
                gt_lat: 28.0,
                gt_lon: 113.0,
                timestamp: 0.0,
            }],
            map: MapEntry {
                width: 2048,
                height: 2048,
                georef: GeoRef::new(28.0, 113.0, 0.5, 0.5).unwrap(),
                tile_size: 512,
                overlap: 256,
                image: Some("map.png".into()),
            },
        }
    }

    #[test]
    fn relative_paths_resolve_against_manifest_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        sample().save(&path).unwrap();
        let m = DatasetManifest::load(&path).unwrap();
        assert_eq!(m.frames[0].image.as_deref(), Some(dir.path().join("frames/0.png").as_path()));
        assert_eq!(m.map.image.as_deref(), Some(dir.path().join("map.png").as_path()));
    }

    #[test]
    fn missing_geo_fields_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        std::fs::write(
            &path,
            r#"{"frames":[{"frame_id":"a","image":"a.png"}],"map":{"width":1,"height":1,
                "georef":{"lat0":0,"lon0":0,"gx":1,"gy":1},"tile_size":1,"overlap":0}}"#,
        )
        .unwrap();
        assert!(matches!(DatasetManifest::load(&path), Err(GeolocError::Format(_))));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut m = sample();
        m.frames.push(m.frames[0].clone());
        assert!(m.validate().is_err());
    }
}
