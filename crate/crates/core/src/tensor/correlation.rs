use rayon::prelude::*;

use super::{DenseFeatureMap, Tensor4};
use crate::error::{GeolocError, Result};

/// Lower bound on slice maxima in the soft mutual-NN ratio.
pub const SOFT_MNN_EPS: f64 = 1e-12;

/// Cosine similarity of every UAV cell against every satellite cell,
/// clamped to `[0, 1]`. Zero-norm feature vectors have zero similarity.
pub fn cosine_correlation(fu: &DenseFeatureMap, fs: &DenseFeatureMap) -> Result<Tensor4> {
    if fu.channels() != fs.channels() {
        return Err(GeolocError::Dimension(format!(
            "channel mismatch: UAV map has {} channels, satellite map has {}",
            fu.channels(),
            fs.channels()
        )));
    }
    let u = unit_rows(fu);
    let s = unit_rows(fs);
    let c = fu.channels();
    let n_s = fs.cells();
    let mut data = vec![0.0; fu.cells() * n_s];
    data.par_chunks_mut(n_s).enumerate().for_each(|(p, row)| {
        let a = &u[p * c..(p + 1) * c];
        for (q, out) in row.iter_mut().enumerate() {
            let b = &s[q * c..(q + 1) * c];
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            *out = dot.clamp(0.0, 1.0);
        }
    });
    Tensor4::from_vec([fu.height(), fu.width(), fs.height(), fs.width()], data)
}

fn unit_rows(f: &DenseFeatureMap) -> Vec<f64> {
    let c = f.channels();
    let mut out = Vec::with_capacity(f.data().len());
    for cell in f.data().chunks_exact(c) {
        let norm = cell.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if norm > 0.0 {
            out.extend(cell.iter().map(|&v| v as f64 / norm));
        } else {
            out.extend(std::iter::repeat_n(0.0, c));
        }
    }
    out
}

/// Per-slice maxima and their (lowest row-major) argmax positions.
struct SliceMax {
    /// For each satellite cell `(k, l)`: max over UAV cells.
    col_max: Vec<f64>,
    col_arg: Vec<usize>,
    /// For each UAV cell `(i, j)`: max over satellite cells.
    row_max: Vec<f64>,
    row_arg: Vec<usize>,
}

fn slice_maxima(t: &Tensor4) -> SliceMax {
    let (nu, ns) = (t.uav_cells(), t.sat_cells());
    let d = t.data();
    let mut col_max = vec![f64::NEG_INFINITY; ns];
    let mut col_arg = vec![0; ns];
    let mut row_max = vec![f64::NEG_INFINITY; nu];
    let mut row_arg = vec![0; nu];
    for p in 0..nu {
        let row = &d[p * ns..(p + 1) * ns];
        for (q, &v) in row.iter().enumerate() {
            if v > row_max[p] {
                row_max[p] = v;
                row_arg[p] = q;
            }
            if v > col_max[q] {
                col_max[q] = v;
                col_arg[q] = p;
            }
        }
    }
    SliceMax {
        col_max,
        col_arg,
        row_max,
        row_arg,
    }
}

/// Rescales every score by its ratio to the maxima of both slices through
/// it: `s * (s / max_ab s_abkl) * (s / max_cd s_ijcd)`.
pub fn soft_mutual_nn(t: &Tensor4) -> Result<Tensor4> {
    if let Some(pos) = t.data().iter().position(|&v| !(v >= 0.0)) {
        return Err(GeolocError::Contract(format!(
            "soft mutual NN needs non-negative finite scores, entry {pos} is {}",
            t.data()[pos]
        )));
    }
    let m = slice_maxima(t);
    let ns = t.sat_cells();
    let mut out = t.clone();
    out.data_mut()
        .par_chunks_mut(ns)
        .enumerate()
        .for_each(|(p, row)| {
            let b = m.row_max[p].max(SOFT_MNN_EPS);
            for (q, v) in row.iter_mut().enumerate() {
                let s = *v;
                let a = m.col_max[q].max(SOFT_MNN_EPS);
                *v = s * (s / a) * (s / b);
            }
        });
    Ok(out)
}

/// Gradient of a scalar through [`soft_mutual_nn`]: given `input` and the
/// upstream gradient with respect to the output, returns the gradient with
/// respect to the input. Slice maxima route their gradient to the argmax
/// entry (lowest row-major index on ties).
pub fn soft_mutual_nn_backward(input: &Tensor4, upstream: &Tensor4) -> Tensor4 {
    assert_eq!(input.dims(), upstream.dims());
    let m = slice_maxima(input);
    let (nu, ns) = (input.uav_cells(), input.sat_cells());
    let s = input.data();
    let g = upstream.data();
    let mut grad = vec![0.0; s.len()];
    // Accumulated sum_p g_p * out_p over each slice, used for the max terms.
    let mut col_acc = vec![0.0; ns];
    let mut row_acc = vec![0.0; nu];
    for p in 0..nu {
        let b = m.row_max[p].max(SOFT_MNN_EPS);
        for q in 0..ns {
            let idx = p * ns + q;
            let a = m.col_max[q].max(SOFT_MNN_EPS);
            let v = s[idx];
            let out = v * (v / a) * (v / b);
            grad[idx] += g[idx] * 3.0 * v * v / (a * b);
            let go = g[idx] * out;
            col_acc[q] += go;
            row_acc[p] += go;
        }
    }
    for q in 0..ns {
        if m.col_max[q] > SOFT_MNN_EPS {
            grad[m.col_arg[q] * ns + q] -= col_acc[q] / m.col_max[q];
        }
    }
    for p in 0..nu {
        if m.row_max[p] > SOFT_MNN_EPS {
            grad[p * ns + m.row_arg[p]] -= row_acc[p] / m.row_max[p];
        }
    }
    Tensor4::from_vec(input.dims(), grad).expect("same dims")
}
