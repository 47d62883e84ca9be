use serde::{Deserialize, Serialize};

use super::conv4d::ForwardTrace;
use super::{
    cosine_correlation, dual_softmax, hard_assign, soft_mutual_nn, soft_mutual_nn_backward,
    AssignmentProbabilities, CellMatchSet, Conv4dModel, DenseFeatureMap, Tensor4,
};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    /// The two images show the same place (`y = +1`).
    Positive,
    /// Unrelated places (`y = -1`).
    Negative,
}

impl Label {
    pub fn sign(self) -> f64 {
        match self {
            Label::Positive => 1.0,
            Label::Negative => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub uav: DenseFeatureMap,
    pub sat: DenseFeatureMap,
    pub label: Label,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOutcome {
    pub value: f64,
    /// Set when hard assignment kept no matches; the loss is then 0.
    pub empty_matches: bool,
}

/// `-y * (mean prob_u + mean prob_s)` over the hard-assigned matches.
pub fn weak_supervision_loss(p: &AssignmentProbabilities, label: Label) -> LossOutcome {
    let matches = hard_assign(p, 0.0);
    loss_for_matches(p, &matches, label)
}

fn loss_for_matches(p: &AssignmentProbabilities, matches: &CellMatchSet, label: Label) -> LossOutcome {
    if matches.is_empty() {
        log::warn!("weak supervision loss: hard assignment is empty, loss defined as 0");
        return LossOutcome {
            value: 0.0,
            empty_matches: true,
        };
    }
    let n = matches.len() as f64;
    let (mut su, mut ss) = (0.0, 0.0);
    for m in matches.iter() {
        su += p.prob_u.get(m.uav.0, m.uav.1, m.sat.0, m.sat.1);
        ss += p.prob_s.get(m.uav.0, m.uav.1, m.sat.0, m.sat.1);
    }
    LossOutcome {
        value: -label.sign() * (su / n + ss / n),
        empty_matches: false,
    }
}

/// Gradient of one kernel bank.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradients {
    pub layers: Vec<LayerGradient>,
}

impl ModelGradients {
    pub fn zeros_like(model: &Conv4dModel) -> Self {
        ModelGradients {
            layers: model
                .layers()
                .iter()
                .map(|b| LayerGradient {
                    weights: vec![0.0; b.weights.len()],
                    bias: vec![0.0; b.bias.len()],
                })
                .collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias))
            .fold(0.0, |a, b| a.max(b.abs()))
    }
}

#[derive(Debug, Clone)]
pub struct LossGradients {
    pub loss: LossOutcome,
    pub gradients: ModelGradients,
    /// The match selection the gradients were taken at.
    pub matches: CellMatchSet,
}

struct Forward {
    trace_fwd: ForwardTrace,
    trace_bwd: ForwardTrace,
    consensus: Tensor4,
    probs: AssignmentProbabilities,
}

fn forward(pair: &TrainingPair, model: &Conv4dModel) -> Result<Forward> {
    let refined_input = soft_mutual_nn(&cosine_correlation(&pair.uav, &pair.sat)?)?;
    let trace_fwd = model.trace(&refined_input)?;
    let trace_bwd = model.trace(&refined_input.transposed())?;
    let a = trace_fwd.activations.last().unwrap().clone().into_tensor()?;
    let b = trace_bwd.activations.last().unwrap().clone().into_tensor()?.transposed();
    let consensus = Tensor4::from_vec(
        a.dims(),
        a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
    )?;
    let probs = dual_softmax(&soft_mutual_nn(&consensus)?)?;
    Ok(Forward {
        trace_fwd,
        trace_bwd,
        consensus,
        probs,
    })
}

/// The training objective evaluated with a given match selection held
/// fixed (the selection used when differentiating).
pub fn loss_at_fixed_matches(
    pair: &TrainingPair,
    model: &Conv4dModel,
    matches: &CellMatchSet,
) -> Result<f64> {
    let f = forward(pair, model)?;
    Ok(loss_for_matches(&f.probs, matches, pair.label).value)
}

/// Analytic gradient of the weak-supervision loss with respect to every
/// weight and bias, treating the hard-assigned match indices as constants.
pub fn loss_gradients(pair: &TrainingPair, model: &Conv4dModel) -> Result<LossGradients> {
    let f = forward(pair, model)?;
    let matches = hard_assign(&f.probs, 0.0);
    let loss = loss_for_matches(&f.probs, &matches, pair.label);
    let mut grads = ModelGradients::zeros_like(model);
    if matches.is_empty() {
        return Ok(LossGradients {
            loss,
            gradients: grads,
            matches,
        });
    }

    let dims = f.consensus.dims();
    let (nu, ns) = (f.consensus.uav_cells(), f.consensus.sat_cells());
    let pu = f.probs.prob_u.data();
    let ps = f.probs.prob_s.data();
    let g = -pair.label.sign() / matches.len() as f64;

    // Through both softmaxes to the refined scores.
    let mut d_refined = vec![0.0; nu * ns];
    for m in matches.iter() {
        let r = m.uav.0 * dims[1] + m.uav.1;
        let q = m.sat.0 * dims[3] + m.sat.1;
        let hit_u = pu[r * ns + q];
        for rr in 0..nu {
            let v = pu[rr * ns + q];
            d_refined[rr * ns + q] += g * v * (((rr == r) as u8 as f64) - hit_u);
        }
        let hit_s = ps[r * ns + q];
        for qq in 0..ns {
            let v = ps[r * ns + qq];
            d_refined[r * ns + qq] += g * v * (((qq == q) as u8 as f64) - hit_s);
        }
    }
    let d_refined = Tensor4::from_vec(dims, d_refined)?;
    let d_consensus = soft_mutual_nn_backward(&f.consensus, &d_refined);

    let mut flat: Vec<(Vec<f64>, Vec<f64>)> = grads
        .layers
        .iter()
        .map(|l| (l.weights.clone(), l.bias.clone()))
        .collect();
    model.backward(&f.trace_fwd, &d_consensus, &mut flat)?;
    model.backward(&f.trace_bwd, &d_consensus.transposed(), &mut flat)?;
    for (dst, (w, b)) in grads.layers.iter_mut().zip(flat) {
        dst.weights = w;
        dst.bias = b;
    }
    Ok(LossGradients {
        loss,
        gradients: grads,
        matches,
    })
}
