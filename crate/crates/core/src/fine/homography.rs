use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{FineConfig, PointMatchSet};
use crate::error::{GeolocError, Result};

/// Below this `|w|` a projected point is treated as being at infinity.
const MIN_HOMOGENEOUS_W: f64 = 1e-12;

/// Invertible 3×3 projective transform, scaled so `h[2][2] = 1` when that
/// entry is nonzero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Homography {
    m: [[f64; 3]; 3],
}

impl Homography {
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        let mut m = m;
        if m[(2, 2)].abs() > f64::EPSILON * m.norm() {
            m /= m[(2, 2)];
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(GeolocError::Estimation("homography has non-finite entries".into()));
        }
        let det = m.determinant();
        if !(det.abs() > 1e-12 * m.norm().powi(3)) {
            return Err(GeolocError::Estimation(format!("homography is singular (det {det:e})")));
        }
        Ok(Homography {
            m: [
                [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
                [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
                [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
            ],
        })
    }

    pub fn identity() -> Self {
        Homography::new(Matrix3::identity()).expect("identity is invertible")
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self> {
        Homography::new(Matrix3::from_fn(|r, c| rows[r][c]))
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.m[r][c])
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        self.m
    }

    pub fn inverse(&self) -> Result<Homography> {
        let inv = self
            .matrix()
            .try_inverse()
            .ok_or_else(|| GeolocError::Estimation("homography is not invertible".into()))?;
        Homography::new(inv)
    }

    /// Applies the transform; `None` for points mapped to infinity.
    pub fn apply(&self, p: [f64; 2]) -> Option<[f64; 2]> {
        let v = self.matrix() * Vector3::new(p[0], p[1], 1.0);
        (v.z.abs() >= MIN_HOMOGENEOUS_W).then(|| [v.x / v.z, v.y / v.z])
    }
}

/// Maps the UAV-region center through `h`.
pub fn project_center(h: &Homography, c: [f64; 2]) -> Result<[f64; 2]> {
    h.apply(c).ok_or_else(|| {
        GeolocError::Projection(format!("({}, {}) maps to a point at infinity", c[0], c[1]))
    })
}

/// `|b - H a|² + |a - H⁻¹ b|²`, infinite when either side is at infinity.
pub fn symmetric_transfer_error(h: &Homography, h_inv: &Homography, a: [f64; 2], b: [f64; 2]) -> f64 {
    let d2 = |p: Option<[f64; 2]>, q: [f64; 2]| match p {
        Some(p) => (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2),
        None => f64::INFINITY,
    };
    d2(h.apply(a), b) + d2(h_inv.apply(b), a)
}

/// Similarity transform moving the centroid to the origin with mean
/// distance √2.
fn normalizer(pts: &[[f64; 2]]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p[1]).sum::<f64>() / n;
    let mean = pts
        .iter()
        .map(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    let s = if mean > 0.0 { std::f64::consts::SQRT_2 / mean } else { 1.0 };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

/// Direct linear transform with Hartley normalization; least squares when
/// more than four correspondences are given.
pub fn dlt_homography(src: &[[f64; 2]], dst: &[[f64; 2]]) -> Result<Homography> {
    if src.len() != dst.len() || src.len() < 4 {
        return Err(GeolocError::Estimation(format!(
            "DLT needs at least 4 correspondences, got {}",
            src.len().min(dst.len())
        )));
    }
    let ts = normalizer(src);
    let td = normalizer(dst);
    let apply = |t: &Matrix3<f64>, p: [f64; 2]| [t[(0, 0)] * p[0] + t[(0, 2)], t[(1, 1)] * p[1] + t[(1, 2)]];
    let rows = (2 * src.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (n, (&s, &d)) in src.iter().zip(dst).enumerate() {
        let [x, y] = apply(&ts, s);
        let [u, v] = apply(&td, d);
        let r = 2 * n;
        a.row_mut(r).copy_from_slice(&[-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u]);
        a.row_mut(r + 1).copy_from_slice(&[0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v]);
    }
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| GeolocError::Estimation("SVD did not converge".into()))?;
    let (k, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |best, (k, &s)| if s < best.1 { (k, s) } else { best });
    let h = v_t.row(k);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let td_inv = td
        .try_inverse()
        .ok_or_else(|| GeolocError::Estimation("degenerate point spread".into()))?;
    Homography::new(td_inv * hn * ts)
}

fn collinear(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> bool {
    let cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
    let scale = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2))
        .max((c[0] - a[0]).powi(2) + (c[1] - a[1]).powi(2));
    cross.abs() <= 1e-9 * scale.max(f64::MIN_POSITIVE)
}

fn degenerate(pts: &[[f64; 2]]) -> bool {
    (0..4).any(|skip| {
        let t: Vec<[f64; 2]> = (0..4).filter(|&i| i != skip).map(|i| pts[i]).collect();
        collinear(t[0], t[1], t[2])
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacOutcome {
    pub homography: Homography,
    pub inliers: Vec<bool>,
    pub iterations: usize,
}

struct Scored {
    h: Homography,
    inliers: Vec<bool>,
    count: usize,
    mean_error: f64,
}

fn score(h: Homography, src: &[[f64; 2]], dst: &[[f64; 2]], thr2: f64) -> Option<Scored> {
    let h_inv = h.inverse().ok()?;
    let mut inliers = vec![false; src.len()];
    let (mut count, mut total) = (0, 0.0);
    for (n, (&a, &b)) in src.iter().zip(dst).enumerate() {
        let e = symmetric_transfer_error(&h, &h_inv, a, b);
        if e < thr2 {
            inliers[n] = true;
            count += 1;
            total += e;
        }
    }
    Some(Scored {
        h,
        inliers,
        count,
        mean_error: if count > 0 { total / count as f64 } else { f64::INFINITY },
    })
}

fn mean_error_on(h: &Homography, src: &[[f64; 2]], dst: &[[f64; 2]], mask: &[bool]) -> f64 {
    let Ok(h_inv) = h.inverse() else {
        return f64::INFINITY;
    };
    let (mut n, mut total) = (0, 0.0);
    for ((&a, &b), _) in src.iter().zip(dst).zip(mask).filter(|(_, &m)| m) {
        total += symmetric_transfer_error(h, &h_inv, a, b);
        n += 1;
    }
    total / n.max(1) as f64
}

/// Seeded RANSAC over 4-point samples. Inliers have symmetric transfer
/// error below `ransac_threshold²`. The best hypothesis (most inliers, then
/// lower mean error, then earlier trial) is refitted on its inliers; the
/// refit is kept only if it does not raise their mean error.
pub fn estimate_homography_ransac(
    matches: &PointMatchSet,
    cfg: &FineConfig,
    seed: u64,
) -> Result<RansacOutcome> {
    let n = matches.len();
    if n < 4 {
        return Err(GeolocError::Estimation(format!("{n} matches, need at least 4")));
    }
    let src: Vec<[f64; 2]> = matches.matches.iter().map(|m| m.pt_a).collect();
    let dst: Vec<[f64; 2]> = matches.matches.iter().map(|m| m.pt_b).collect();
    let thr2 = cfg.ransac_threshold * cfg.ransac_threshold;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<Scored> = None;
    let mut needed = cfg.ransac_max_iters;
    let mut iter = 0;
    while iter < needed.min(cfg.ransac_max_iters) {
        iter += 1;
        let idx = sample(&mut rng, n, 4).into_vec();
        let s: Vec<[f64; 2]> = idx.iter().map(|&i| src[i]).collect();
        let d: Vec<[f64; 2]> = idx.iter().map(|&i| dst[i]).collect();
        if degenerate(&s) || degenerate(&d) {
            continue;
        }
        let Ok(h) = dlt_homography(&s, &d) else { continue };
        let Some(cand) = score(h, &src, &dst, thr2) else { continue };
        let better = match &best {
            None => cand.count > 0,
            Some(b) => cand.count > b.count || (cand.count == b.count && cand.mean_error < b.mean_error),
        };
        if better {
            let w = cand.count as f64 / n as f64;
            let p_good = w.powi(4);
            needed = if p_good >= 1.0 {
                0
            } else if p_good <= 0.0 {
                cfg.ransac_max_iters
            } else {
                let k = (1.0 - cfg.ransac_confidence).ln() / (1.0 - p_good).ln();
                k.ceil().min(cfg.ransac_max_iters as f64) as usize
            };
            best = Some(cand);
        }
    }
    let best = best.ok_or_else(|| {
        GeolocError::Estimation(format!("all {iter} samples were degenerate or unusable"))
    })?;

    let mut out = RansacOutcome {
        homography: best.h,
        inliers: best.inliers.clone(),
        iterations: iter,
    };
    if best.count >= 4 {
        let s: Vec<[f64; 2]> = (0..n).filter(|&i| best.inliers[i]).map(|i| src[i]).collect();
        let d: Vec<[f64; 2]> = (0..n).filter(|&i| best.inliers[i]).map(|i| dst[i]).collect();
        if let Ok(refit) = dlt_homography(&s, &d) {
            let before = mean_error_on(&best.h, &src, &dst, &best.inliers);
            let after = mean_error_on(&refit, &src, &dst, &best.inliers);
            if after <= before {
                out.homography = refit;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn known() -> Homography {
        Homography::from_rows([[1.1, 0.05, 12.0], [-0.04, 0.95, -7.0], [2e-4, -1e-4, 1.0]]).unwrap()
    }

    #[test]
    fn identity_from_exact_points() {
        let pts = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0]];
        let h = dlt_homography(&pts, &pts).unwrap();
        let m = h.matrix() - Matrix3::identity();
        assert!(m.abs().max() < 1e-9, "{m}");
    }

    #[test]
    fn projection_examples() {
        let c = [128.0, 128.0];
        assert_eq!(project_center(&Homography::identity(), c).unwrap(), c);
        let t = Homography::from_rows([[1.0, 0.0, 10.0], [0.0, 1.0, 5.0], [0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(project_center(&t, c).unwrap(), [138.0, 133.0]);
        let h = known();
        let m = h.matrix();
        let v = m * Vector3::new(c[0], c[1], 1.0);
        let p = project_center(&h, c).unwrap();
        assert!((p[0] - v.x / v.z).abs() < 1e-9 && (p[1] - v.y / v.z).abs() < 1e-9);
        let far = Homography::from_rows([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, -128.0]]).unwrap();
        assert!(matches!(project_center(&far, c), Err(GeolocError::Projection(_))));
    }

    #[test]
    fn too_few_matches() {
        let set = PointMatchSet::from_points(&[([0.0, 0.0], [0.0, 0.0]); 3]);
        assert!(matches!(
            estimate_homography_ransac(&set, &FineConfig::default(), 0),
            Err(GeolocError::Estimation(_))
        ));
    }

    #[test]
    fn collinear_samples_fail() {
        let pts: Vec<_> = (0..10).map(|i| ([i as f64, 2.0 * i as f64], [i as f64, 2.0 * i as f64])).collect();
        let set = PointMatchSet::from_points(&pts);
        assert!(matches!(
            estimate_homography_ransac(&set, &FineConfig::default(), 0),
            Err(GeolocError::Estimation(_))
        ));
    }

    #[test]
    fn recovers_known_transform_and_is_deterministic() {
        let h = known();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut pairs = Vec::new();
        for _ in 0..30 {
            let a = [rng.random_range(0.0..200.0), rng.random_range(0.0..200.0)];
            pairs.push((a, h.apply(a).unwrap()));
        }
        for _ in 0..20 {
            let a = [rng.random_range(0.0..200.0), rng.random_range(0.0..200.0)];
            pairs.push((a, [rng.random_range(0.0..200.0), rng.random_range(0.0..200.0)]));
        }
        let set = PointMatchSet::from_points(&pairs);
        let cfg = FineConfig::default();
        let out = estimate_homography_ransac(&set, &cfg, 4).unwrap();
        assert!(out.inliers[..30].iter().all(|&v| v));
        let p = project_center(&out.homography, [100.0, 100.0]).unwrap();
        let t = h.apply([100.0, 100.0]).unwrap();
        assert!((p[0] - t[0]).hypot(p[1] - t[1]) < 1e-6);
        assert_eq!(out, estimate_homography_ransac(&set, &cfg, 4).unwrap());
    }
}
