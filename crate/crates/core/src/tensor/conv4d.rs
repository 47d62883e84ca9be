use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Tensor4;
use crate::error::{GeolocError, Result};
use crate::store::{read_tensor, write_tensor, TensorMeta};

/// Taps in a 3×3×3×3 kernel.
pub const KERNEL_TAPS: usize = 81;
/// Channel widths through the consensus network.
pub const CHANNEL_CHAIN: [usize; 4] = [1, 16, 16, 1];
const CENTER_TAP: usize = 40;

#[inline]
fn tap_offsets(t: usize) -> [isize; 4] {
    [
        (t / 27) as isize - 1,
        ((t / 9) % 3) as isize - 1,
        ((t / 3) % 3) as isize - 1,
        (t % 3) as isize - 1,
    ]
}

#[inline]
fn tap_index(o: [isize; 4]) -> usize {
    ((o[0] + 1) * 27 + (o[1] + 1) * 9 + (o[2] + 1) * 3 + (o[3] + 1)) as usize
}

/// A stack of 4D volumes, layout `[channel][i][j][k][l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelTensor4 {
    channels: usize,
    dims: [usize; 4],
    data: Vec<f64>,
}

impl ChannelTensor4 {
    pub fn zeros(channels: usize, dims: [usize; 4]) -> Self {
        ChannelTensor4 {
            channels,
            dims,
            data: vec![0.0; channels * dims.iter().product::<usize>()],
        }
    }

    pub fn from_tensor(t: &Tensor4) -> Self {
        ChannelTensor4 {
            channels: 1,
            dims: t.dims(),
            data: t.data().to_vec(),
        }
    }

    /// The single channel of a one-channel stack as a [`Tensor4`].
    pub fn into_tensor(self) -> Result<Tensor4> {
        if self.channels != 1 {
            return Err(GeolocError::Dimension(format!(
                "expected 1 channel, got {}",
                self.channels
            )));
        }
        Tensor4::from_vec(self.dims, self.data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn volume(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let v = self.volume();
        &self.data[c * v..(c + 1) * v]
    }

    fn relu_in_place(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.max(0.0));
    }
}

/// One 3×3×3×3 convolution layer: weights `[out][in][tap]` and one bias per
/// output channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelBank {
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl KernelBank {
    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        KernelBank {
            in_channels,
            out_channels,
            weights: vec![0.0; in_channels * out_channels * KERNEL_TAPS],
            bias: vec![0.0; out_channels],
        }
    }

    /// Uniform in `(-a, a)` with `a = 1/sqrt(fan_in)`, zero bias.
    pub fn random(in_channels: usize, out_channels: usize, rng: &mut impl Rng) -> Self {
        let a = 1.0 / ((in_channels * KERNEL_TAPS) as f64).sqrt();
        let mut bank = Self::zeros(in_channels, out_channels);
        for w in &mut bank.weights {
            *w = rng.random_range(-a..a);
        }
        bank
    }

    #[inline]
    pub fn weight_index(&self, out: usize, inp: usize, tap: usize) -> usize {
        (out * self.in_channels + inp) * KERNEL_TAPS + tap
    }

    pub fn kernel(&self, out: usize, inp: usize) -> &[f64] {
        let s = self.weight_index(out, inp, 0);
        &self.weights[s..s + KERNEL_TAPS]
    }

    pub fn kernel_mut(&mut self, out: usize, inp: usize) -> &mut [f64] {
        let s = self.weight_index(out, inp, 0);
        &mut self.weights[s..s + KERNEL_TAPS]
    }

    fn validate(&self) -> Result<()> {
        if self.weights.len() != self.in_channels * self.out_channels * KERNEL_TAPS
            || self.bias.len() != self.out_channels
        {
            return Err(GeolocError::Dimension(format!(
                "kernel bank {}→{} has {} weights and {} biases",
                self.in_channels,
                self.out_channels,
                self.weights.len(),
                self.bias.len()
            )));
        }
        if self.weights.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(GeolocError::Contract("non-finite kernel weight".into()));
        }
        Ok(())
    }

    /// Nonzero taps as `(tap, weight)` for each (out, in) pair.
    fn active_taps(&self, out: usize, inp: usize) -> Vec<(usize, f64)> {
        self.kernel(out, inp)
            .iter()
            .enumerate()
            .filter(|(_, w)| **w != 0.0)
            .map(|(t, w)| (t, *w))
            .collect()
    }
}

/// Index ranges `[lo, hi)` of output positions along one axis whose input
/// `x + off` is inside `[0, n)`.
#[inline]
fn valid_range(n: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (n as isize - off).clamp(0, n as isize) as usize;
    (lo.min(hi), hi)
}

/// Zero-padded 4D cross-correlation; spatial dims are preserved.
pub fn conv4d_forward(input: &ChannelTensor4, bank: &KernelBank) -> Result<ChannelTensor4> {
    bank.validate()?;
    if input.channels != bank.in_channels {
        return Err(GeolocError::Dimension(format!(
            "conv4d expects {} input channels, got {}",
            bank.in_channels, input.channels
        )));
    }
    let dims = input.dims;
    let [ni, nj, nk, nl] = dims;
    let vol = input.volume();
    let slab = nj * nk * nl;
    let mut out = ChannelTensor4::zeros(bank.out_channels, dims);
    let taps: Vec<Vec<Vec<(usize, f64)>>> = (0..bank.out_channels)
        .map(|o| (0..bank.in_channels).map(|c| bank.active_taps(o, c)).collect())
        .collect();

    out.data
        .par_chunks_mut(slab.max(1))
        .enumerate()
        .for_each(|(chunk, dst)| {
            let o = chunk / ni;
            let i = chunk % ni;
            dst.iter_mut().for_each(|v| *v = bank.bias[o]);
            for c in 0..bank.in_channels {
                let src = &input.data[c * vol..(c + 1) * vol];
                for &(t, w) in &taps[o][c] {
                    let [di, dj, dk, dl] = tap_offsets(t);
                    let ii = i as isize + di;
                    if ii < 0 || ii >= ni as isize {
                        continue;
                    }
                    let ii = ii as usize;
                    let (j0, j1) = valid_range(nj, dj);
                    let (k0, k1) = valid_range(nk, dk);
                    let (l0, l1) = valid_range(nl, dl);
                    for j in j0..j1 {
                        let jj = (j as isize + dj) as usize;
                        for k in k0..k1 {
                            let kk = (k as isize + dk) as usize;
                            let d0 = (j * nk + k) * nl;
                            let s0 = ((ii * nj + jj) * nk + kk) * nl;
                            let ls = (l0 as isize + dl) as usize;
                            let d = &mut dst[d0 + l0..d0 + l1];
                            let s = &src[s0 + ls..s0 + ls + (l1 - l0)];
                            for (x, y) in d.iter_mut().zip(s) {
                                *x += w * y;
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Gradients of a scalar through [`conv4d_forward`]. Returns
/// `(grad_input, grad_weights, grad_bias)` given `dL/d(output)`.
pub fn conv4d_backward(
    input: &ChannelTensor4,
    bank: &KernelBank,
    grad_out: &ChannelTensor4,
) -> Result<(ChannelTensor4, Vec<f64>, Vec<f64>)> {
    if grad_out.channels != bank.out_channels || grad_out.dims != input.dims {
        return Err(GeolocError::Dimension(
            "conv4d backward: gradient shape does not match the layer output".into(),
        ));
    }
    let dims = input.dims;
    let [ni, nj, nk, nl] = dims;
    let vol = input.volume();

    let grad_bias: Vec<f64> = (0..bank.out_channels)
        .map(|o| grad_out.channel(o).iter().sum())
        .collect();

    // dL/dw[o][c][t] = sum_p g[o][p] * x[c][p + delta_t]
    let grad_weights: Vec<f64> = (0..bank.out_channels * bank.in_channels)
        .into_par_iter()
        .flat_map_iter(|oc| {
            let o = oc / bank.in_channels;
            let c = oc % bank.in_channels;
            let g = grad_out.channel(o);
            let x = input.channel(c);
            (0..KERNEL_TAPS).map(move |t| {
                let [di, dj, dk, dl] = tap_offsets(t);
                let (i0, i1) = valid_range(ni, di);
                let (j0, j1) = valid_range(nj, dj);
                let (k0, k1) = valid_range(nk, dk);
                let (l0, l1) = valid_range(nl, dl);
                let mut acc = 0.0;
                for i in i0..i1 {
                    let ii = (i as isize + di) as usize;
                    for j in j0..j1 {
                        let jj = (j as isize + dj) as usize;
                        for k in k0..k1 {
                            let kk = (k as isize + dk) as usize;
                            let g0 = ((i * nj + j) * nk + k) * nl;
                            let x0 = ((ii * nj + jj) * nk + kk) * nl;
                            let ls = (l0 as isize + dl) as usize;
                            acc += g[g0 + l0..g0 + l1]
                                .iter()
                                .zip(&x[x0 + ls..x0 + ls + (l1 - l0)])
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                        }
                    }
                }
                acc
            })
        })
        .collect();

    // dL/dx[c][q] = sum_o sum_t w[o][c][t] * g[o][q - delta_t]
    let slab = nj * nk * nl;
    let mut grad_in = ChannelTensor4::zeros(bank.in_channels, dims);
    let taps: Vec<Vec<Vec<(usize, f64)>>> = (0..bank.out_channels)
        .map(|o| (0..bank.in_channels).map(|c| bank.active_taps(o, c)).collect())
        .collect();
    grad_in
        .data
        .par_chunks_mut(slab.max(1))
        .enumerate()
        .for_each(|(chunk, dst)| {
            let c = chunk / ni;
            let i = chunk % ni;
            for o in 0..bank.out_channels {
                let g = &grad_out.data[o * vol..(o + 1) * vol];
                for &(t, w) in &taps[o][c] {
                    let [di, dj, dk, dl] = tap_offsets(t);
                    // Input q receives from output p = q - delta.
                    let (mi, mj, mk, ml) = (-di, -dj, -dk, -dl);
                    let pi = i as isize + mi;
                    if pi < 0 || pi >= ni as isize {
                        continue;
                    }
                    let pi = pi as usize;
                    let (j0, j1) = valid_range(nj, mj);
                    let (k0, k1) = valid_range(nk, mk);
                    let (l0, l1) = valid_range(nl, ml);
                    for j in j0..j1 {
                        let pj = (j as isize + mj) as usize;
                        for k in k0..k1 {
                            let pk = (k as isize + mk) as usize;
                            let d0 = (j * nk + k) * nl;
                            let s0 = ((pi * nj + pj) * nk + pk) * nl;
                            let ls = (l0 as isize + ml) as usize;
                            for (x, y) in dst[d0 + l0..d0 + l1]
                                .iter_mut()
                                .zip(&g[s0 + ls..s0 + ls + (l1 - l0)])
                            {
                                *x += w * y;
                            }
                        }
                    }
                }
            }
        });
    Ok((grad_in, grad_weights, grad_bias))
}

/// The three-layer 4D convolutional consensus network (each layer followed
/// by ReLU).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv4dModel {
    layers: Vec<KernelBank>,
}

/// Activations kept from a forward pass for backpropagation.
pub(crate) struct ForwardTrace {
    /// `activations[n]` is the input of layer `n`; the last entry is the output.
    pub activations: Vec<ChannelTensor4>,
}

impl Conv4dModel {
    pub fn new(layers: Vec<KernelBank>) -> Result<Self> {
        if layers.len() != CHANNEL_CHAIN.len() - 1 {
            return Err(GeolocError::Dimension(format!(
                "consensus model needs {} layers, got {}",
                CHANNEL_CHAIN.len() - 1,
                layers.len()
            )));
        }
        for (n, bank) in layers.iter().enumerate() {
            bank.validate()?;
            if bank.in_channels != CHANNEL_CHAIN[n] || bank.out_channels != CHANNEL_CHAIN[n + 1] {
                return Err(GeolocError::Dimension(format!(
                    "layer {n} is {}→{}, expected {}→{}",
                    bank.in_channels,
                    bank.out_channels,
                    CHANNEL_CHAIN[n],
                    CHANNEL_CHAIN[n + 1]
                )));
            }
        }
        Ok(Conv4dModel { layers })
    }

    /// Freshly initialized weights for training.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = CHANNEL_CHAIN
            .windows(2)
            .map(|w| KernelBank::random(w[0], w[1], &mut rng))
            .collect();
        Conv4dModel { layers }
    }

    /// Every layer passes channel 0 through its center tap; all other
    /// weights and biases are zero.
    pub fn identity() -> Self {
        let layers = CHANNEL_CHAIN
            .windows(2)
            .map(|w| {
                let mut bank = KernelBank::zeros(w[0], w[1]);
                bank.kernel_mut(0, 0)[CENTER_TAP] = 1.0;
                bank
            })
            .collect();
        Conv4dModel { layers }
    }

    /// Untrained consensus filter: the first two layers average scores along
    /// locally translation-consistent neighbours `(i+d, j+e, k+d, l+e)`,
    /// the last passes through. Used when no trained weights are supplied.
    pub fn translation_prior() -> Self {
        let mut model = Self::identity();
        for bank in model.layers.iter_mut().take(2) {
            let k = bank.kernel_mut(0, 0);
            k.iter_mut().for_each(|w| *w = 0.0);
            for d in -1..=1 {
                for e in -1..=1 {
                    k[tap_index([d, e, d, e])] = 1.0 / 9.0;
                }
            }
        }
        model
    }

    pub fn layers(&self) -> &[KernelBank] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [KernelBank] {
        &mut self.layers
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|b| b.weights.len() + b.bias.len())
            .sum()
    }

    /// `ReLU(conv)` three times.
    pub fn apply(&self, t: &Tensor4) -> Result<Tensor4> {
        let mut x = ChannelTensor4::from_tensor(t);
        for bank in &self.layers {
            x = conv4d_forward(&x, bank)?;
            x.relu_in_place();
        }
        x.into_tensor()
    }

    pub(crate) fn trace(&self, t: &Tensor4) -> Result<ForwardTrace> {
        let mut activations = vec![ChannelTensor4::from_tensor(t)];
        for bank in &self.layers {
            let mut y = conv4d_forward(activations.last().unwrap(), bank)?;
            y.relu_in_place();
            activations.push(y);
        }
        Ok(ForwardTrace { activations })
    }

    /// Backpropagates `dL/d(output)` through a traced forward pass,
    /// accumulating weight and bias gradients into `grads`.
    pub(crate) fn backward(
        &self,
        trace: &ForwardTrace,
        grad_output: &Tensor4,
        grads: &mut [(Vec<f64>, Vec<f64>)],
    ) -> Result<()> {
        let mut g = ChannelTensor4::from_tensor(grad_output);
        for n in (0..self.layers.len()).rev() {
            let out = &trace.activations[n + 1];
            // ReLU: gradient passes where the activation is positive.
            for (gv, &a) in g.data.iter_mut().zip(&out.data) {
                if a <= 0.0 {
                    *gv = 0.0;
                }
            }
            let (gin, gw, gb) = conv4d_backward(&trace.activations[n], &self.layers[n], &g)?;
            for (acc, v) in grads[n].0.iter_mut().zip(gw) {
                *acc += v;
            }
            for (acc, v) in grads[n].1.iter_mut().zip(gb) {
                *acc += v;
            }
            g = gin;
        }
        Ok(())
    }

    /// Writes one tensor file per kernel bank (`layer0.glft` ...) plus
    /// `model.json` listing them.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| GeolocError::io(dir, e))?;
        let mut files = Vec::new();
        for (n, bank) in self.layers.iter().enumerate() {
            let name = format!("layer{n}.glft");
            let mut meta = TensorMeta::layer(format!("consensus.{n}"));
            let bias: Vec<f32> = bank.bias.iter().map(|&b| b as f32).collect();
            meta.extra.insert("bias".into(), serde_json::json!(bias));
            let w: Vec<f32> = bank.weights.iter().map(|&v| v as f32).collect();
            write_tensor(
                dir.join(&name),
                &w,
                &[bank.out_channels, bank.in_channels, 3, 3, 3, 3],
                &meta,
            )?;
            files.push(name);
        }
        let manifest = serde_json::json!({ "kind": "consensus4d", "layers": files });
        let path = dir.join("model.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap())
            .map_err(|e| GeolocError::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("model.json");
        let text = std::fs::read_to_string(&path).map_err(|e| GeolocError::io(&path, e))?;
        let manifest: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| GeolocError::json(&path, e))?;
        let files = manifest["layers"]
            .as_array()
            .ok_or_else(|| GeolocError::Format(format!("{}: missing layers", path.display())))?;
        let mut layers = Vec::new();
        for f in files {
            let name = f.as_str().ok_or_else(|| {
                GeolocError::Format(format!("{}: layer entries must be strings", path.display()))
            })?;
            let rec = read_tensor(dir.join(name))?;
            let &[o, i, 3, 3, 3, 3] = rec.dims.as_slice() else {
                return Err(GeolocError::Format(format!(
                    "{name}: kernel bank dims {:?} are not [out, in, 3, 3, 3, 3]",
                    rec.dims
                )));
            };
            let bias: Vec<f64> = rec
                .meta
                .extra
                .get("bias")
                .and_then(|b| serde_json::from_value::<Vec<f32>>(b.clone()).ok())
                .ok_or_else(|| GeolocError::Format(format!("{name}: missing bias metadata")))?
                .into_iter()
                .map(f64::from)
                .collect();
            layers.push(KernelBank {
                in_channels: i,
                out_channels: o,
                weights: rec.data.into_iter().map(f64::from).collect(),
                bias,
            });
        }
        Conv4dModel::new(layers).map_err(|e| GeolocError::Format(format!("{}: {e}", dir.display())))
    }
}

/// `N(S) + N(Sᵀ)ᵀ`: the consensus network applied in both matching
/// directions, which makes the result symmetric under exchanging the
/// two images.
pub fn neighborhood_consensus(t: &Tensor4, model: &Conv4dModel) -> Result<Tensor4> {
    if t.data().iter().any(|&v| !(v >= 0.0)) {
        return Err(GeolocError::Contract(
            "neighbourhood consensus needs non-negative scores".into(),
        ));
    }
    let forward = model.apply(t)?;
    let backward = model.apply(&t.transposed())?.transposed();
    let data = forward
        .data()
        .iter()
        .zip(backward.data())
        .map(|(a, b)| a + b)
        .collect();
    Tensor4::from_vec(t.dims(), data)
}
