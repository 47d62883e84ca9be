//! The neural fine backend against outputs of an independent float64
//! reference forward pass (`tools/neural_reference.py`).

use std::path::PathBuf;

use geoloc::fine::{FineBackend, NeuralBackend};
use geoloc::imaging::GrayImageF;
use geoloc::store::read_tensor;
use image::Luma;

const TOLERANCE: f32 = 1e-4;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/neural").join(name)
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

#[test]
fn reproduces_reference_outputs() {
    let input = read_tensor(fixture("input.glft")).unwrap();
    let (h, w) = (input.dims[0], input.dims[1]);
    let img = GrayImageF::from_fn(w as u32, h as u32, |x, y| Luma([input.data[y as usize * w + x as usize]]));
    let backend = NeuralBackend::load(fixture("weights")).unwrap();
    let f = backend.extract(&img).unwrap();

    let desc = read_tensor(fixture("descriptors.glft")).unwrap();
    let rel = read_tensor(fixture("reliability.glft")).unwrap();
    let logits = read_tensor(fixture("logits.glft")).unwrap();
    assert_eq!(desc.dims, [f.rows(), f.cols(), 64]);
    assert_eq!(rel.dims, [f.rows(), f.cols()]);
    assert_eq!(logits.dims, [f.rows(), f.cols(), 65]);

    for (name, got, want) in [
        ("descriptors", f.descriptor_map(), &desc.data),
        ("reliability", f.reliability_map(), &rel.data),
        ("logits", f.logit_map(), &logits.data),
    ] {
        let d = max_abs_diff(got, want);
        assert!(d < TOLERANCE, "{name}: max abs difference {d:e}");
    }
}
