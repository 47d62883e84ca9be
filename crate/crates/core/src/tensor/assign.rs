use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Tensor4;
use crate::error::{GeolocError, Result};

/// Match probabilities in both directions: `prob_u` is normalized over the
/// UAV cells for each satellite cell, `prob_s` over the satellite cells for
/// each UAV cell.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentProbabilities {
    pub prob_u: Tensor4,
    pub prob_s: Tensor4,
}

/// Softmax of the refined match scores along each image's axes.
pub fn dual_softmax(m: &Tensor4) -> Result<AssignmentProbabilities> {
    if !m.is_finite() {
        return Err(GeolocError::Contract("dual softmax needs finite scores".into()));
    }
    let (nu, ns) = (m.uav_cells(), m.sat_cells());

    let mut prob_s = m.clone();
    prob_s
        .data_mut()
        .par_chunks_mut(ns)
        .for_each(softmax_in_place);

    // Column softmax via the transposed layout, then back.
    let mut cols = m.transposed();
    cols.data_mut()
        .par_chunks_mut(nu)
        .for_each(softmax_in_place);
    let prob_u = cols.transposed();
    Ok(AssignmentProbabilities { prob_u, prob_s })
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellMatch {
    /// `(i, j)` on the UAV grid.
    pub uav: (usize, usize),
    /// `(k, l)` on the satellite grid.
    pub sat: (usize, usize),
    /// `prob_u * prob_s` at the matched entry.
    pub score: f64,
}

/// Mutually exclusive cell correspondences, ordered by UAV cell.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CellMatchSet {
    pub matches: Vec<CellMatch>,
}

impl CellMatchSet {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &CellMatch> {
        self.matches.iter()
    }
}

fn argmax_first(values: impl Iterator<Item = f64>) -> usize {
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0;
    for (n, v) in values.enumerate() {
        if v > best {
            best = v;
            arg = n;
        }
    }
    arg
}

/// Keeps entries that are the argmax of both their probability slices and
/// whose score `prob_u * prob_s` is at least `threshold`.
pub fn hard_assign(p: &AssignmentProbabilities, threshold: f64) -> CellMatchSet {
    let dims = p.prob_u.dims();
    let (nu, ns) = (p.prob_u.uav_cells(), p.prob_u.sat_cells());
    let pu = p.prob_u.data();
    let ps = p.prob_s.data();

    let best_u_for_sat: Vec<usize> = (0..ns)
        .into_par_iter()
        .map(|q| argmax_first((0..nu).map(|r| pu[r * ns + q])))
        .collect();
    let best_s_for_uav: Vec<usize> = (0..nu)
        .into_par_iter()
        .map(|r| argmax_first(ps[r * ns..(r + 1) * ns].iter().copied()))
        .collect();

    let matches = (0..nu)
        .filter_map(|r| {
            let q = best_s_for_uav[r];
            if best_u_for_sat[q] != r {
                return None;
            }
            let score = pu[r * ns + q] * ps[r * ns + q];
            (score >= threshold).then_some(CellMatch {
                uav: (r / dims[1], r % dims[1]),
                sat: (q / dims[3], q % dims[3]),
                score,
            })
        })
        .collect();
    CellMatchSet { matches }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    #[test]
    fn constant_input_is_uniform() {
        let m = Tensor4::from_fn([2, 2, 3, 1], |_| 0.7);
        let p = dual_softmax(&m).unwrap();
        assert!(p.prob_u.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!(p.prob_s.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn large_gap_wins() {
        let m = Tensor4::from_vec([2, 2, 1, 1], vec![10.0, 0.0, 0.0, 0.0]).unwrap();
        let p = dual_softmax(&m).unwrap();
        // e^10 / (e^10 + 3)
        assert!(p.prob_u.get(0, 0, 0, 0) >= 0.9996);
    }

    #[test]
    fn self_match_identity() {
        let m = Tensor4::from_fn([2, 3, 2, 3], |[i, j, k, l]| ((i, j) == (k, l)) as u8 as f64);
        let set = hard_assign(&dual_softmax(&m).unwrap(), 0.0);
        assert_eq!(set.len(), 6);
        assert!(set.iter().all(|c| c.uav == c.sat));
    }

    #[test]
    fn uniform_tie_break() {
        let m = Tensor4::zeros([2, 2, 2, 2]);
        let set = hard_assign(&dual_softmax(&m).unwrap(), 0.0);
        assert_eq!(set.len(), 1);
        assert_eq!(set.matches[0].uav, (0, 0));
        assert_eq!(set.matches[0].sat, (0, 0));
        assert!((set.matches[0].score - 0.0625).abs() < 1e-15);
    }

    #[test]
    fn threshold_filters_everything() {
        let m = Tensor4::from_fn([2, 2, 2, 2], |[i, j, k, l]| ((i, j) == (k, l)) as u8 as f64);
        let p = dual_softmax(&m).unwrap();
        assert!(hard_assign(&p, 1.01).is_empty());
    }

    #[test]
    fn rejects_non_finite() {
        let m = Tensor4::from_fn([1, 1, 1, 2], |_| f64::NAN);
        assert!(dual_softmax(&m).is_err());
    }

    proptest! {
        #[test]
        fn normalized_and_injective(vals in proptest::collection::vec(-3.0f64..3.0, 81)) {
            let m = Tensor4::from_vec([3, 3, 3, 3], vals).unwrap();
            let p = dual_softmax(&m).unwrap();
            for k in 0..3 { for l in 0..3 {
                let s: f64 = (0..3).flat_map(|i| (0..3).map(move |j| (i, j)))
                    .map(|(i, j)| p.prob_u.get(i, j, k, l)).sum();
                prop_assert!((s - 1.0).abs() < 1e-5);
            }}
            for i in 0..3 { for j in 0..3 {
                let s: f64 = (0..3).flat_map(|k| (0..3).map(move |l| (k, l)))
                    .map(|(k, l)| p.prob_s.get(i, j, k, l)).sum();
                prop_assert!((s - 1.0).abs() < 1e-5);
            }}
            prop_assert!(p.prob_u.data().iter().chain(p.prob_s.data()).all(|v| (0.0..=1.0).contains(v)));
            let set = hard_assign(&p, 0.0);
            let us: HashSet<_> = set.iter().map(|c| c.uav).collect();
            let ss: HashSet<_> = set.iter().map(|c| c.sat).collect();
            prop_assert_eq!(us.len(), set.len());
            prop_assert_eq!(ss.len(), set.len());
            prop_assert!(!set.is_empty());
        }
    }
}
