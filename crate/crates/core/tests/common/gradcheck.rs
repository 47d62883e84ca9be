//! Central finite-difference check of the analytic consensus-loss
//! gradients against the brute-force oracle.
//!
//! The loss is piecewise smooth: ReLU gates and the slice maxima inside
//! SoftMNN switch discretely. A difference quotient whose interval
//! straddles such a switch measures a secant across a kink rather than the
//! derivative, so each probe first confirms that the discrete pattern at
//! `w ± h` equals the one at `w`, shrinking `h` until it does.

#![allow(dead_code)]

use geoloc::tensor::{loss_gradients, Conv4dModel, DenseFeatureMap, Label, TrainingPair};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracle;

pub const SIDE: usize = 4;
pub const CHANNELS: usize = 8;
pub const STEP: f64 = 1e-4;
pub const MIN_STEP: f64 = 1e-7;
pub const TOLERANCE: f64 = 1e-4;
/// Gradients below this magnitude are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-7;
pub const WEIGHTS_PER_LAYER: usize = 12;
pub const DIRECTIONS: usize = 4;
/// Three layers of sampled weights, the 16 + 16 + 1 biases, and the directions.
pub const PROBES_PER_SEED: usize = 3 * WEIGHTS_PER_LAYER + 33 + DIRECTIONS;

#[derive(Debug, Default, Clone)]
pub struct GradReport {
    pub checked: usize,
    /// Probes that needed a step below [`STEP`] to stay off a kink.
    pub refined: usize,
    /// Probes that sit on a kink at every step down to [`MIN_STEP`].
    pub on_kink: usize,
    pub max_rel: f64,
    pub worst: String,
}

impl GradReport {
    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        self.refined += other.refined;
        self.on_kink += other.on_kink;
        if other.max_rel > self.max_rel {
            self.max_rel = other.max_rel;
            self.worst = other.worst;
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

struct Problem {
    fu: Vec<Vec<f64>>,
    fs: Vec<Vec<f64>>,
    pair: TrainingPair,
}

fn problem(seed: u64) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = SIDE * SIDE;
    // Features are rounded to f32 first so the oracle sees exactly what the
    // library stores.
    let mut draw = || -> Vec<Vec<f64>> {
        (0..cells)
            .map(|_| (0..CHANNELS).map(|_| rng.random_range(-1.0f32..1.0) as f64).collect())
            .collect()
    };
    let fu = draw();
    let fs = draw();
    let map = |v: &Vec<Vec<f64>>| {
        let data = v.iter().flatten().map(|&x| x as f32).collect();
        DenseFeatureMap::with_stride(SIDE, SIDE, CHANNELS, data, 14).unwrap()
    };
    let label = if seed.is_multiple_of(2) { Label::Positive } else { Label::Negative };
    let pair = TrainingPair { uav: map(&fu), sat: map(&fs), label };
    Problem { fu, fs, pair }
}

/// Checks `WEIGHTS_PER_LAYER` random weights and every bias per layer, plus
/// `DIRECTIONS` random directional derivatives over all parameters.
pub fn check_seed(seed: u64) -> GradReport {
    let p = problem(seed);
    let model = Conv4dModel::random(seed.wrapping_add(1000));
    let g = loss_gradients(&p.pair, &model).unwrap();
    let d = [SIDE; 4];
    let eval = |m: &Conv4dModel| oracle::loss_traced(&p.fu, &p.fs, d, m, p.pair.label, &g.matches);
    let (_, base_pattern) = eval(&model);

    // A probe moves the parameters along `dir` (sparse: (layer, is_bias, index, coefficient)).
    let probe = |dir: &[(usize, bool, usize, f64)], label: String, report: &mut GradReport| {
        let analytic: f64 = dir
            .iter()
            .map(|&(l, is_bias, n, c)| {
                let lg = &g.gradients.layers[l];
                c * if is_bias { lg.bias[n] } else { lg.weights[n] }
            })
            .sum();
        let shifted = |h: f64| {
            let mut m = model.clone();
            for &(l, is_bias, n, c) in dir {
                let bank = &mut m.layers_mut()[l];
                if is_bias {
                    bank.bias[n] += h * c;
                } else {
                    bank.weights[n] += h * c;
                }
            }
            eval(&m)
        };
        let mut h = STEP;
        while h >= MIN_STEP {
            let (lp, pp) = shifted(h);
            if pp != base_pattern {
                h /= 10.0;
                continue;
            }
            let (lm, pm) = shifted(-h);
            if pm == base_pattern {
                let numeric = (lp - lm) / (2.0 * h);
                let rel = relative_error(analytic, numeric);
                report.checked += 1;
                if h < STEP {
                    report.refined += 1;
                }
                if rel > report.max_rel {
                    report.max_rel = rel;
                    report.worst = format!(
                        "seed {seed} {label}: analytic {analytic:e}, numeric {numeric:e} (h {h:e})"
                    );
                }
                return;
            }
            h /= 10.0;
        }
        report.on_kink += 1;
    };

    let mut report = GradReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (l, bank) in model.layers().iter().enumerate() {
        for n in sample(&mut rng, bank.weights.len(), WEIGHTS_PER_LAYER) {
            probe(&[(l, false, n, 1.0)], format!("layer {l} weight {n}"), &mut report);
        }
        for n in 0..bank.bias.len() {
            probe(&[(l, true, n, 1.0)], format!("layer {l} bias {n}"), &mut report);
        }
    }
    for t in 0..DIRECTIONS {
        let mut dir = Vec::new();
        for (l, bank) in model.layers().iter().enumerate() {
            for n in 0..bank.weights.len() {
                dir.push((l, false, n, rng.random_range(-1.0..1.0)));
            }
            for n in 0..bank.bias.len() {
                dir.push((l, true, n, rng.random_range(-1.0..1.0)));
            }
        }
        let norm = dir.iter().map(|e| e.3 * e.3).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|e| e.3 /= norm);
        probe(&dir, format!("direction {t}"), &mut report);
    }
    report
}
