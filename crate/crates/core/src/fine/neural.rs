//! Forward-only CNN fine backend with weights loaded from tensor files.
//!
//! Backbone: five 3×3 stride-2 convolutions (1→8→16→24→64→128, ReLU), so
//! stages sit at H/8 (24 ch), H/16 (64 ch) and H/32 (128 ch). Each stage is
//! projected to 64 channels by a 1×1 convolution, the coarser two are
//! bilinearly upsampled (half-pixel centers) to H/8, the three are summed
//! and a 1×1 fusion layer gives the descriptor map. Reliability is
//! `sigmoid(1×1(ReLU(1×1(desc))))`. Keypoint logits come from four 1×1
//! convolutions over the 8×8 pixel-unshuffled input.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{FineBackend, FineFeatures, CELL, DESCRIPTOR_DIM, KEYPOINT_BINS};
use crate::error::{GeolocError, Result};
use crate::imaging::GrayImageF;
use crate::store::{read_tensor, write_tensor, TensorMeta};

/// `(name, out_channels, in_channels, kernel)` for every layer.
pub const NEURAL_LAYERS: [(&str, usize, usize, usize); 15] = [
    ("block1", 8, 1, 3),
    ("block2", 16, 8, 3),
    ("block3", 24, 16, 3),
    ("block4", 64, 24, 3),
    ("block5", 128, 64, 3),
    ("proj1", 64, 24, 1),
    ("proj2", 64, 64, 1),
    ("proj3", 64, 128, 1),
    ("fusion", 64, 64, 1),
    ("rel1", 64, 64, 1),
    ("rel2", 1, 64, 1),
    ("kp1", 64, 64, 1),
    ("kp2", 64, 64, 1),
    ("kp3", 64, 64, 1),
    ("kp4", KEYPOINT_BINS, 64, 1),
];

const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    /// `[out][in][ky][kx]`.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightsManifest {
    kind: String,
    layers: Vec<LayerEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerEntry {
    name: String,
    file: PathBuf,
}

/// All layers of the network in [`NEURAL_LAYERS`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralWeights {
    pub layers: Vec<ConvLayer>,
}

impl NeuralWeights {
    /// Deterministic random weights (uniform ±1/√fan-in), for tests.
    pub fn random(seed: u64) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let layers = NEURAL_LAYERS
            .iter()
            .map(|&(_, o, i, k)| {
                let a = 1.0 / ((i * k * k) as f32).sqrt();
                ConvLayer {
                    out_channels: o,
                    in_channels: i,
                    kernel: k,
                    weights: (0..o * i * k * k).map(|_| rng.random_range(-a..a)).collect(),
                    bias: (0..o).map(|_| rng.random_range(-0.1..0.1)).collect(),
                }
            })
            .collect();
        NeuralWeights { layers }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| GeolocError::io(dir, e))?;
        let mut entries = Vec::new();
        for (&(name, ..), layer) in NEURAL_LAYERS.iter().zip(&self.layers) {
            let file = PathBuf::from(format!("{name}.glft"));
            let mut meta = TensorMeta::layer(name);
            meta.extra.insert("bias".into(), serde_json::json!(layer.bias));
            write_tensor(
                dir.join(&file),
                &layer.weights,
                &[layer.out_channels, layer.in_channels, layer.kernel, layer.kernel],
                &meta,
            )?;
            entries.push(LayerEntry { name: name.into(), file });
        }
        let manifest = WeightsManifest { kind: "fine-neural".into(), layers: entries };
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| GeolocError::json(&path, e))?;
        std::fs::write(&path, text).map_err(|e| GeolocError::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| {
            GeolocError::BackendUnavailable(format!(
                "neural fine weights not found ({}: {e}); pass a weights directory or use the classical backend",
                path.display()
            ))
        })?;
        let manifest: WeightsManifest = serde_json::from_str(&text)
            .map_err(|e| GeolocError::Format(format!("{}: {e}", path.display())))?;
        let mut layers = Vec::new();
        for &(name, o, i, k) in &NEURAL_LAYERS {
            let entry = manifest.layers.iter().find(|l| l.name == name).ok_or_else(|| {
                GeolocError::Format(format!("{}: missing layer {name}", path.display()))
            })?;
            let file = dir.join(&entry.file);
            let rec = read_tensor(&file).map_err(|e| match e {
                GeolocError::Io { .. } => GeolocError::BackendUnavailable(format!(
                    "weights file for {name} unreadable: {e}"
                )),
                other => other,
            })?;
            if rec.dims != [o, i, k, k] {
                return Err(GeolocError::Format(format!(
                    "{}: layer {name} has dims {:?}, expected {:?}",
                    file.display(),
                    rec.dims,
                    [o, i, k, k]
                )));
            }
            let bias: Vec<f32> = rec
                .meta
                .extra
                .get("bias")
                .and_then(|b| serde_json::from_value(b.clone()).ok())
                .ok_or_else(|| {
                    GeolocError::Format(format!("{}: metadata lacks a bias array", file.display()))
                })?;
            if bias.len() != o {
                return Err(GeolocError::Format(format!(
                    "{}: {} biases for {o} outputs",
                    file.display(),
                    bias.len()
                )));
            }
            layers.push(ConvLayer {
                out_channels: o,
                in_channels: i,
                kernel: k,
                weights: rec.data,
                bias,
            });
        }
        Ok(NeuralWeights { layers })
    }

    fn layer(&self, name: &str) -> &ConvLayer {
        let n = NEURAL_LAYERS.iter().position(|l| l.0 == name).expect("known layer");
        &self.layers[n]
    }
}

/// Channel-major feature volume.
#[derive(Debug, Clone)]
struct Chw {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Chw {
    fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.h + y) * self.w + x]
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Act {
    None,
    Relu,
    Sigmoid,
}

fn conv(x: &Chw, l: &ConvLayer, stride: usize, act: Act) -> Chw {
    let k = l.kernel;
    let pad = k / 2;
    let oh = (x.h + 2 * pad - k) / stride + 1;
    let ow = (x.w + 2 * pad - k) / stride + 1;
    let mut data = vec![0.0f32; l.out_channels * oh * ow];
    data.par_chunks_mut(oh * ow).enumerate().for_each(|(o, plane)| {
        for (n, v) in plane.iter_mut().enumerate() {
            let (oy, ox) = (n / ow, n % ow);
            let mut acc = l.bias[o];
            for i in 0..l.in_channels {
                for ky in 0..k {
                    let y = (oy * stride + ky) as isize - pad as isize;
                    if y < 0 || y >= x.h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let xx = (ox * stride + kx) as isize - pad as isize;
                        if xx < 0 || xx >= x.w as isize {
                            continue;
                        }
                        acc += l.weights[((o * l.in_channels + i) * k + ky) * k + kx]
                            * x.at(i, y as usize, xx as usize);
                    }
                }
            }
            *v = match act {
                Act::None => acc,
                Act::Relu => acc.max(0.0),
                Act::Sigmoid => 1.0 / (1.0 + (-acc).exp()),
            };
        }
    });
    Chw { c: l.out_channels, h: oh, w: ow, data }
}

/// Bilinear resize with half-pixel centers (no corner alignment).
fn upsample(x: &Chw, h: usize, w: usize) -> Chw {
    let coord = |dst: usize, src_len: usize, dst_len: usize| {
        let s = ((dst as f32 + 0.5) * src_len as f32 / dst_len as f32 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(src_len - 1);
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, s - i0 as f32)
    };
    let mut data = vec![0.0f32; x.c * h * w];
    for c in 0..x.c {
        for y in 0..h {
            let (y0, y1, fy) = coord(y, x.h, h);
            for xx in 0..w {
                let (x0, x1, fx) = coord(xx, x.w, w);
                let top = x.at(c, y0, x0) * (1.0 - fx) + x.at(c, y0, x1) * fx;
                let bot = x.at(c, y1, x0) * (1.0 - fx) + x.at(c, y1, x1) * fx;
                data[(c * h + y) * w + xx] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Chw { c: x.c, h, w, data }
}

fn add(a: &Chw, b: &Chw) -> Chw {
    Chw {
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
        ..a.clone()
    }
}

/// Channel `dy*8 + dx` holds pixel `(8y + dy, 8x + dx)`.
fn pixel_unshuffle(x: &Chw) -> Chw {
    let (h, w) = (x.h / CELL, x.w / CELL);
    let mut data = vec![0.0f32; CELL * CELL * h * w];
    for dy in 0..CELL {
        for dx in 0..CELL {
            let c = dy * CELL + dx;
            for y in 0..h {
                for xx in 0..w {
                    data[(c * h + y) * w + xx] = x.at(0, y * CELL + dy, xx * CELL + dx);
                }
            }
        }
    }
    Chw { c: CELL * CELL, h, w, data }
}

fn to_hwc(x: &Chw) -> Vec<f32> {
    let mut out = Vec::with_capacity(x.data.len());
    for y in 0..x.h {
        for xx in 0..x.w {
            for c in 0..x.c {
                out.push(x.at(c, y, xx));
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct NeuralBackend {
    weights: NeuralWeights,
}

impl NeuralBackend {
    pub fn new(weights: NeuralWeights) -> Self {
        NeuralBackend { weights }
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        Ok(NeuralBackend::new(NeuralWeights::load(dir)?))
    }
}

impl FineBackend for NeuralBackend {
    fn name(&self) -> &str {
        "neural"
    }

    fn extract(&self, img: &GrayImageF) -> Result<FineFeatures> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        if w == 0 || h == 0 || w % 32 != 0 || h % 32 != 0 {
            return Err(GeolocError::Dimension(format!(
                "neural backend needs sides divisible by 32, got {w}x{h}"
            )));
        }
        let raw: Vec<f32> = img.pixels().map(|p| p.0[0]).collect();
        let n = raw.len() as f32;
        let mean = raw.iter().sum::<f32>() / n;
        let std = (raw.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / n).sqrt();
        let input = Chw {
            c: 1,
            h,
            w,
            data: raw.iter().map(|v| (v - mean) / (std + 1e-6)).collect(),
        };

        let wt = &self.weights;
        let x1 = conv(&input, wt.layer("block1"), 2, Act::Relu);
        let x2 = conv(&x1, wt.layer("block2"), 2, Act::Relu);
        let s8 = conv(&x2, wt.layer("block3"), 2, Act::Relu);
        let s16 = conv(&s8, wt.layer("block4"), 2, Act::Relu);
        let s32 = conv(&s16, wt.layer("block5"), 2, Act::Relu);

        let p8 = conv(&s8, wt.layer("proj1"), 1, Act::None);
        let p16 = upsample(&conv(&s16, wt.layer("proj2"), 1, Act::None), s8.h, s8.w);
        let p32 = upsample(&conv(&s32, wt.layer("proj3"), 1, Act::None), s8.h, s8.w);
        let desc = conv(&add(&add(&p8, &p16), &p32), wt.layer("fusion"), 1, Act::None);

        let rel = conv(
            &conv(&desc, wt.layer("rel1"), 1, Act::Relu),
            wt.layer("rel2"),
            1,
            Act::Sigmoid,
        );

        let mut kp = pixel_unshuffle(&input);
        for name in ["kp1", "kp2", "kp3"] {
            kp = conv(&kp, wt.layer(name), 1, Act::Relu);
        }
        let logits = conv(&kp, wt.layer("kp4"), 1, Act::None);

        debug_assert_eq!(desc.c, DESCRIPTOR_DIM);
        FineFeatures::new(s8.h, s8.w, to_hwc(&desc), rel.data, to_hwc(&logits))
    }
}
