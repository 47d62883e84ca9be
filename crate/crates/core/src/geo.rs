//! Geo-referencing between map pixels and latitude/longitude, and the
//! trajectory metrics (success rate, mean localization error, drift).

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{GeolocError, Result};

/// Meters per degree of latitude in the local equirectangular model.
pub const METERS_PER_DEGREE: f64 = 111_320.0;
/// A frame counts as localized when its error is strictly below this.
pub const SUCCESS_THRESHOLD_M: f64 = 25.0;
/// A frame counts as drifted when its error is strictly above this.
pub const DRIFT_THRESHOLD_M: f64 = 50.0;
const MAX_ABS_LATITUDE: f64 = 89.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Self {
        GeoPoint { lat, lon }
    }

    pub fn is_valid(&self) -> bool {
        self.lat.is_finite() && self.lon.is_finite() && self.lat.abs() <= 90.0 && self.lon.abs() <= 180.0
    }
}

/// Affine pixel-to-world transform of an image: pixel (0, 0) sits at
/// (`lat0`, `lon0`), x grows east and y grows south.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoRef {
    pub lat0: f64,
    pub lon0: f64,
    /// Meters per pixel along x (east).
    pub gx: f64,
    /// Meters per pixel along y (south).
    pub gy: f64,
}

impl GeoRef {
    pub fn new(lat0: f64, lon0: f64, gx: f64, gy: f64) -> Result<Self> {
        let r = GeoRef { lat0, lon0, gx, gy };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gx > 0.0 && self.gy > 0.0 && self.gx.is_finite() && self.gy.is_finite()) {
            return Err(GeolocError::Config(format!(
                "meters per pixel must be positive, got gx={} gy={}",
                self.gx, self.gy
            )));
        }
        if !GeoPoint::new(self.lat0, self.lon0).is_valid() {
            return Err(GeolocError::Config(format!(
                "origin ({}, {}) out of range",
                self.lat0, self.lon0
            )));
        }
        if self.lat0.abs() >= MAX_ABS_LATITUDE {
            return Err(GeolocError::UnsupportedLatitude(self.lat0));
        }
        Ok(())
    }

    fn meters_per_degree_lon(&self) -> f64 {
        METERS_PER_DEGREE * self.lat0.to_radians().cos()
    }

    /// Geo reference of a sub-image whose top-left corner is `offset` pixels
    /// into this one.
    pub fn shifted(&self, offset: [f64; 2]) -> Result<GeoRef> {
        let origin = pixel_to_geo(self, offset)?;
        GeoRef::new(origin.lat, origin.lon, self.gx, self.gy)
    }
}

pub fn pixel_to_geo(r: &GeoRef, p: [f64; 2]) -> Result<GeoPoint> {
    r.validate()?;
    Ok(GeoPoint {
        lat: r.lat0 - p[1] * r.gy / METERS_PER_DEGREE,
        lon: r.lon0 + p[0] * r.gx / r.meters_per_degree_lon(),
    })
}

pub fn geo_to_pixel(r: &GeoRef, g: GeoPoint) -> Result<[f64; 2]> {
    r.validate()?;
    Ok([
        (g.lon - r.lon0) * r.meters_per_degree_lon() / r.gx,
        (r.lat0 - g.lat) * METERS_PER_DEGREE / r.gy,
    ])
}

/// Equirectangular distance in meters between two nearby points.
pub fn localization_error(est: GeoPoint, gt: GeoPoint) -> f64 {
    let dlat = (est.lat - gt.lat) * METERS_PER_DEGREE;
    let mean_lat = 0.5 * (est.lat + gt.lat);
    // Mean latitude keeps the metric symmetric in its arguments.
    let dlon = (est.lon - gt.lon) * METERS_PER_DEGREE * mean_lat.to_radians().cos();
    (dlat * dlat + dlon * dlon).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEval {
    pub errors: Vec<f64>,
    pub success_rate: f64,
    /// Mean error over non-drift frames; `None` when every frame drifted.
    pub mle: Option<f64>,
    pub drift: Vec<bool>,
}

impl TrajectoryEval {
    pub fn all_drift(&self) -> bool {
        self.mle.is_none()
    }

    pub fn frames(&self) -> usize {
        self.errors.len()
    }
}

pub fn evaluate_trajectory(errors: &[f64]) -> Result<TrajectoryEval> {
    if errors.is_empty() {
        return Err(GeolocError::Contract(
            "cannot evaluate an empty trajectory".into(),
        ));
    }
    if let Some(bad) = errors.iter().find(|e| !(e.is_finite() && **e >= 0.0)) {
        return Err(GeolocError::Contract(format!(
            "localization errors must be finite and non-negative, got {bad}"
        )));
    }
    let drift: Vec<bool> = errors.iter().map(|&e| e > DRIFT_THRESHOLD_M).collect();
    let successes = errors.iter().filter(|&&e| e < SUCCESS_THRESHOLD_M).count();
    let kept: Vec<f64> = errors
        .iter()
        .zip(&drift)
        .filter(|(_, &d)| !d)
        .map(|(&e, _)| e)
        .collect();
    let mle = if kept.is_empty() {
        None
    } else {
        Some(kept.iter().sum::<f64>() / kept.len() as f64)
    };
    Ok(TrajectoryEval {
        errors: errors.to_vec(),
        success_rate: successes as f64 / errors.len() as f64,
        mle,
        drift,
    })
}

/// One line of the results CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub frame_id: String,
    pub est_lat: f64,
    pub est_lon: f64,
    pub gt_lat: f64,
    pub gt_lon: f64,
    pub error_m: f64,
    pub drift: bool,
}

pub fn write_trajectory_csv<W: Write>(out: W, rows: &[TrajectoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)
            .map_err(|e| GeolocError::Format(format!("csv write: {e}")))?;
    }
    w.flush()
        .map_err(|e| GeolocError::io("<csv output>", e))?;
    Ok(())
}

pub fn read_trajectory_csv<R: Read>(input: R) -> Result<Vec<TrajectoryRow>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| GeolocError::Format(format!("csv row {}: {e}", i + 1))))
        .collect()
}

/// Summary written next to the CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub frames: usize,
    pub success_rate: f64,
    pub mle_m: Option<f64>,
    pub drift_frames: usize,
    pub all_drift: bool,
    pub success_threshold_m: f64,
    pub drift_threshold_m: f64,
}

impl From<&TrajectoryEval> for MetricsSummary {
    fn from(e: &TrajectoryEval) -> Self {
        MetricsSummary {
            frames: e.frames(),
            success_rate: e.success_rate,
            mle_m: e.mle,
            drift_frames: e.drift.iter().filter(|d| **d).count(),
            all_drift: e.all_drift(),
            success_threshold_m: SUCCESS_THRESHOLD_M,
            drift_threshold_m: DRIFT_THRESHOLD_M,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn origin_maps_to_origin() {
        let r = GeoRef::new(28.2, 112.9, 0.5, 0.5).unwrap();
        let g = pixel_to_geo(&r, [0.0, 0.0]).unwrap();
        assert_eq!(g, GeoPoint::new(28.2, 112.9));
    }

    #[test]
    fn one_degree_south_at_equator() {
        let r = GeoRef::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let g = pixel_to_geo(&r, [0.0, 111_320.0]).unwrap();
        assert!((g.lat + 1.0).abs() < 1e-12);
    }

    #[test]
    fn polar_origin_rejected() {
        assert!(matches!(
            GeoRef::new(89.95, 0.0, 1.0, 1.0),
            Err(GeolocError::UnsupportedLatitude(_))
        ));
        let r = GeoRef { lat0: -89.9, lon0: 0.0, gx: 1.0, gy: 1.0 };
        assert!(pixel_to_geo(&r, [1.0, 1.0]).is_err());
    }

    #[test]
    fn error_metric_basics() {
        let a = GeoPoint::new(0.0, 0.0);
        assert_eq!(localization_error(a, a), 0.0);
        let b = GeoPoint::new(0.001, 0.0);
        assert!((localization_error(b, a) - 111.32).abs() < 0.01);
        let c = GeoPoint::new(30.0, 120.0);
        let d = GeoPoint::new(30.002, 120.003);
        assert_eq!(localization_error(c, d), localization_error(d, c));
    }

    #[test]
    fn trajectory_examples() {
        let e = evaluate_trajectory(&[10.0, 20.0, 30.0]).unwrap();
        assert!((e.success_rate - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(e.mle, Some(20.0));
        assert!(e.drift.iter().all(|d| !d));

        let e = evaluate_trajectory(&[60.0, 70.0]).unwrap();
        assert_eq!(e.success_rate, 0.0);
        assert!(e.all_drift());

        let e = evaluate_trajectory(&[25.0, 50.0]).unwrap();
        assert_eq!(e.success_rate, 0.0);
        assert_eq!(e.drift, vec![false, false]);
        assert_eq!(e.mle, Some(37.5));

        assert!(evaluate_trajectory(&[]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![TrajectoryRow {
            frame_id: "f0".into(),
            est_lat: 1.0,
            est_lon: 2.0,
            gt_lat: 1.0,
            gt_lon: 2.0,
            error_m: 0.0,
            drift: false,
        }];
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("frame_id,est_lat,est_lon,gt_lat,gt_lon,error_m,drift\n"));
        assert_eq!(read_trajectory_csv(buf.as_slice()).unwrap(), rows);
    }

    proptest! {
        #[test]
        fn pixel_geo_round_trip(lat0 in -59.9f64..59.9, lon0 in -179.0f64..179.0,
                                gx in 0.05f64..5.0, gy in 0.05f64..5.0,
                                x in -5000.0f64..5000.0, y in -5000.0f64..5000.0) {
            let r = GeoRef::new(lat0, lon0, gx, gy).unwrap();
            let g = pixel_to_geo(&r, [x, y]).unwrap();
            let p = geo_to_pixel(&r, g).unwrap();
            prop_assert!((p[0] - x).abs() < 1e-6 && (p[1] - y).abs() < 1e-6);
        }

        #[test]
        fn success_rate_monotone(errs in proptest::collection::vec(0.0f64..100.0, 1..20),
                                 idx in 0usize..20, bump in 0.0f64..50.0) {
            let base = evaluate_trajectory(&errs).unwrap();
            let mut raised = errs.clone();
            let i = idx % raised.len();
            raised[i] += bump;
            let after = evaluate_trajectory(&raised).unwrap();
            prop_assert!(after.success_rate <= base.success_rate);
        }

        #[test]
        fn mle_permutation_invariant(errs in proptest::collection::vec(0.0f64..100.0, 1..20)) {
            let a = evaluate_trajectory(&errs).unwrap();
            let mut rev = errs.clone();
            rev.reverse();
            let b = evaluate_trajectory(&rev).unwrap();
            match (a.mle, b.mle) {
                (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-9),
                (None, None) => {}
                _ => prop_assert!(false),
            }
        }
    }
}
