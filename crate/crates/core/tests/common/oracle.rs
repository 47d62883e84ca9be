//! Brute-force reference implementations used as test oracles. Everything
//! here is written from the defining formulas with plain loops and shares no
//! code with the library's optimized kernels.

#![allow(dead_code)]

use geoloc::tensor::{CellMatchSet, Conv4dModel, Label};

pub type Vol = Vec<f64>; // [i][j][k][l] row-major

fn at(d: [usize; 4], i: usize, j: usize, k: usize, l: usize) -> usize {
    ((i * d[1] + j) * d[2] + k) * d[3] + l
}

pub fn cosine(fu: &[Vec<f64>], fs: &[Vec<f64>]) -> Vol {
    let mut out = Vec::new();
    for a in fu {
        for b in fs {
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            let v = if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
            };
            out.push(v.clamp(0.0, 1.0));
        }
    }
    out
}

pub fn soft_mnn(s: &Vol, d: [usize; 4]) -> Vol {
    let mut out = s.clone();
    for i in 0..d[0] {
        for j in 0..d[1] {
            for k in 0..d[2] {
                for l in 0..d[3] {
                    let mut col = 0.0f64;
                    for a in 0..d[0] {
                        for b in 0..d[1] {
                            col = col.max(s[at(d, a, b, k, l)]);
                        }
                    }
                    let mut row = 0.0f64;
                    for c in 0..d[2] {
                        for e in 0..d[3] {
                            row = row.max(s[at(d, i, j, c, e)]);
                        }
                    }
                    let v = s[at(d, i, j, k, l)];
                    out[at(d, i, j, k, l)] = v * (v / col.max(1e-12)) * (v / row.max(1e-12));
                }
            }
        }
    }
    out
}

pub fn transpose(s: &Vol, d: [usize; 4]) -> Vol {
    let td = [d[2], d[3], d[0], d[1]];
    let mut out = vec![0.0; s.len()];
    for i in 0..d[0] {
        for j in 0..d[1] {
            for k in 0..d[2] {
                for l in 0..d[3] {
                    out[at(td, k, l, i, j)] = s[at(d, i, j, k, l)];
                }
            }
        }
    }
    out
}

/// Direct 4D convolution with zero padding, followed by ReLU.
pub fn conv_relu(x: &[Vol], d: [usize; 4], w: &[f64], bias: &[f64], cin: usize, cout: usize) -> Vec<Vol> {
    let mut pre = conv(x, d, w, bias, cin, cout);
    pre.iter_mut().flatten().for_each(|v| *v = v.max(0.0));
    pre
}

/// Direct 4D convolution with zero padding (pre-activation).
pub fn conv(x: &[Vol], d: [usize; 4], w: &[f64], bias: &[f64], cin: usize, cout: usize) -> Vec<Vol> {
    let n: usize = d.iter().product();
    let mut out = vec![vec![0.0; n]; cout];
    // input with channels innermost, kernels as [tap][in][out]
    let x_pos: Vec<f64> = (0..n).flat_map(|p| x.iter().map(move |xc| xc[p])).collect();
    let w_tap: Vec<f64> = (0..81)
        .flat_map(|t| (0..cin).flat_map(move |c| (0..cout).map(move |o| w[(o * cin + c) * 81 + t])))
        .collect();
    for i in 0..d[0] {
        for j in 0..d[1] {
            for k in 0..d[2] {
                for l in 0..d[3] {
                    // (tap, input index) for every tap that lands inside the volume
                    let mut taps = Vec::with_capacity(81);
                    for t in 0..81 {
                        let off = [(t / 27) as isize - 1, ((t / 9) % 3) as isize - 1, ((t / 3) % 3) as isize - 1, (t % 3) as isize - 1];
                        let p = [i as isize + off[0], j as isize + off[1], k as isize + off[2], l as isize + off[3]];
                        if (0..4).all(|a| p[a] >= 0 && p[a] < d[a] as isize) {
                            taps.push((t, at(d, p[0] as usize, p[1] as usize, p[2] as usize, p[3] as usize)));
                        }
                    }
                    let mut acc = bias.to_vec();
                    for &(t, idx) in &taps {
                        for c in 0..cin {
                            let xv = x_pos[idx * cin + c];
                            let wt = &w_tap[(t * cin + c) * cout..(t * cin + c + 1) * cout];
                            for (a, wv) in acc.iter_mut().zip(wt) {
                                *a += wv * xv;
                            }
                        }
                    }
                    for (o, a) in acc.into_iter().enumerate() {
                        out[o][at(d, i, j, k, l)] = a;
                    }
                }
            }
        }
    }
    out
}

pub fn network(model: &Conv4dModel, s: &Vol, d: [usize; 4]) -> Vol {
    network_traced(model, s, d, &mut Vec::new())
}

/// Like [`network`], appending the ReLU on/off state of every
/// pre-activation to `pattern`.
pub fn network_traced(model: &Conv4dModel, s: &Vol, d: [usize; 4], pattern: &mut Vec<u32>) -> Vol {
    let mut x = vec![s.clone()];
    for bank in model.layers() {
        x = conv(&x, d, &bank.weights, &bank.bias, bank.in_channels, bank.out_channels);
        for v in x.iter_mut().flatten() {
            pattern.push((*v > 0.0) as u32);
            *v = v.max(0.0);
        }
    }
    x.remove(0)
}

/// Flat indices of the maximum of every `(k, l)` column and `(i, j)` row.
pub fn slice_argmaxes(s: &Vol, d: [usize; 4]) -> Vec<u32> {
    let mut out = Vec::new();
    let argmax = |it: &mut dyn Iterator<Item = usize>| {
        let mut best: Option<usize> = None;
        for idx in it {
            if best.is_none_or(|b| s[idx] > s[b]) {
                best = Some(idx);
            }
        }
        best.unwrap() as u32
    };
    for k in 0..d[2] {
        for l in 0..d[3] {
            let mut it = (0..d[0]).flat_map(|i| (0..d[1]).map(move |j| at(d, i, j, k, l)));
            out.push(argmax(&mut it));
        }
    }
    for i in 0..d[0] {
        for j in 0..d[1] {
            let mut it = (0..d[2]).flat_map(|k| (0..d[3]).map(move |l| at(d, i, j, k, l)));
            out.push(argmax(&mut it));
        }
    }
    out
}

pub struct Probs {
    pub pu: Vol,
    pub ps: Vol,
}

pub fn dual_softmax(m: &Vol, d: [usize; 4]) -> Probs {
    let mut pu = vec![0.0; m.len()];
    let mut ps = vec![0.0; m.len()];
    for k in 0..d[2] {
        for l in 0..d[3] {
            let z: f64 = (0..d[0]).flat_map(|i| (0..d[1]).map(move |j| (i, j))).map(|(i, j)| m[at(d, i, j, k, l)].exp()).sum();
            for i in 0..d[0] {
                for j in 0..d[1] {
                    pu[at(d, i, j, k, l)] = m[at(d, i, j, k, l)].exp() / z;
                }
            }
        }
    }
    for i in 0..d[0] {
        for j in 0..d[1] {
            let z: f64 = (0..d[2]).flat_map(|k| (0..d[3]).map(move |l| (k, l))).map(|(k, l)| m[at(d, i, j, k, l)].exp()).sum();
            for k in 0..d[2] {
                for l in 0..d[3] {
                    ps[at(d, i, j, k, l)] = m[at(d, i, j, k, l)].exp() / z;
                }
            }
        }
    }
    Probs { pu, ps }
}

/// The full coarse objective from raw cell features, evaluated at a fixed
/// match selection.
pub fn loss(
    fu: &[Vec<f64>],
    fs: &[Vec<f64>],
    d: [usize; 4],
    model: &Conv4dModel,
    label: Label,
    matches: &CellMatchSet,
) -> f64 {
    loss_traced(fu, fs, d, model, label, matches).0
}

/// [`loss`] plus the discrete state it depends on: every ReLU on/off bit
/// and the slice maxima selected by the second SoftMNN. Inside a region
/// where this pattern is constant the loss is smooth in the weights.
pub fn loss_traced(
    fu: &[Vec<f64>],
    fs: &[Vec<f64>],
    d: [usize; 4],
    model: &Conv4dModel,
    label: Label,
    matches: &CellMatchSet,
) -> (f64, Vec<u32>) {
    let mut pattern = Vec::new();
    let s = soft_mnn(&cosine(fu, fs), d);
    let td = [d[2], d[3], d[0], d[1]];
    let a = network_traced(model, &s, d, &mut pattern);
    let b = transpose(&network_traced(model, &transpose(&s, d), td, &mut pattern), td);
    let m: Vol = a.iter().zip(&b).map(|(x, y)| x + y).collect();
    pattern.extend(slice_argmaxes(&m, d));
    if matches.is_empty() {
        return (0.0, pattern);
    }
    let p = dual_softmax(&soft_mnn(&m, d), d);
    let n = matches.len() as f64;
    let mut total = 0.0;
    for c in matches.iter() {
        let idx = at(d, c.uav.0, c.uav.1, c.sat.0, c.sat.1);
        total += p.pu[idx] + p.ps[idx];
    }
    (-label.sign() * total / n, pattern)
}
