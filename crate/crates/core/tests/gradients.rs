mod common;

use common::oracle;
use geoloc::tensor::{
    loss_at_fixed_matches, loss_gradients, Conv4dModel, DenseFeatureMap, Label, TrainingPair,
};

fn line_map(n: usize, seed: u32) -> DenseFeatureMap {
    let c = 3;
    let data = (0..n * c)
        .map(|v| (((v as u32).wrapping_mul(2654435761) ^ seed) % 97) as f32 / 97.0 + 0.05)
        .collect();
    DenseFeatureMap::with_stride(n, 1, c, data, 14).unwrap()
}

#[test]
fn taps_reaching_only_padding_get_zero_gradient() {
    // With single-column grids every tap that steps along j or l reads
    // padding, so no output depends on it.
    let pair = TrainingPair { uav: line_map(5, 1), sat: line_map(5, 7), label: Label::Positive };
    let model = Conv4dModel::random(4);
    let g = loss_gradients(&pair, &model).unwrap();
    assert!(!g.matches.is_empty());
    let mut nonzero_inside = 0;
    for (bank, grad) in model.layers().iter().zip(&g.gradients.layers) {
        for o in 0..bank.out_channels {
            for i in 0..bank.in_channels {
                for t in 0..81 {
                    let (dj, dl) = ((t / 9) % 3, t % 3);
                    let v = grad.weights[(o * bank.in_channels + i) * 81 + t];
                    if dj != 1 || dl != 1 {
                        assert_eq!(v, 0.0, "tap {t} of ({o}, {i})");
                    } else if v != 0.0 {
                        nonzero_inside += 1;
                    }
                }
            }
        }
    }
    assert!(nonzero_inside > 0);
}

#[test]
fn library_loss_agrees_with_oracle() {
    let fu = line_map(4, 3);
    let fs = line_map(4, 9);
    let cells = |f: &DenseFeatureMap| -> Vec<Vec<f64>> {
        (0..f.height())
            .flat_map(|i| (0..f.width()).map(move |j| (i, j)))
            .map(|(i, j)| f.cell(i, j).iter().map(|&v| v as f64).collect())
            .collect()
    };
    for label in [Label::Positive, Label::Negative] {
        let pair = TrainingPair { uav: fu.clone(), sat: fs.clone(), label };
        let model = Conv4dModel::random(11);
        let g = loss_gradients(&pair, &model).unwrap();
        let lib = loss_at_fixed_matches(&pair, &model, &g.matches).unwrap();
        let reference = oracle::loss(&cells(&fu), &cells(&fs), [4, 1, 4, 1], &model, label, &g.matches);
        assert!((lib - reference).abs() < 1e-10, "{lib} vs {reference}");
        assert!((g.loss.value - reference).abs() < 1e-10);
    }
}

