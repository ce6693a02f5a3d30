use dilhyfs::data::{Dataset, Sample, Split};
use dilhyfs::model::{BranchMask, DualBranchModel, ModelConfig};
use dilhyfs::protocol::{build_stream, evaluate_stream, ScenarioConfig, ScenarioKind};
use dilhyfs::prototype::PrototypeConfig;
use dilhyfs::{Rng, Tensor};

fn placeholder_dataset(classes: usize, train: usize, test: usize) -> Dataset {
    let mut samples = Vec::new();
    for c in 0..classes {
        for i in 0..train + test {
            samples.push(Sample {
                image: Tensor::full(&[1, 2, 2], (c * 1000 + i) as f64),
                class: c,
                split: if i < train { Split::Train } else { Split::Test },
            });
        }
    }
    Dataset { size: 2, num_classes: classes, samples }
}

// Features are well separated Gaussian clusters keyed on the stream label.
fn cluster_features(labels: &[usize], classes: usize, dim: usize, seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    let centers = rng.normal(&[classes, dim]).scale(3.0);
    let mut rows = Vec::with_capacity(labels.len());
    for &l in labels {
        rows.push((0..dim).map(|j| centers.at(l, j) + 0.2 * rng.standard_normal()).collect());
    }
    Tensor::from_rows(&rows).unwrap()
}

#[test]
fn separable_stream_with_many_shots_stays_accurate() {
    let data = placeholder_dataset(10, 60, 20);
    for kind in [ScenarioKind::NWayKShot, ScenarioKind::OneStepKShot] {
        let cfg = ScenarioConfig { kind, n: 2, k: 50, base_classes: 4, ..ScenarioConfig::default() };
        let stream = build_stream(&data, &cfg, 11).unwrap();
        stream.check_invariants(Some(50)).unwrap();
        let feats = cluster_features(&stream.labels, 10, 16, 5);
        let proto = PrototypeConfig { m: 256, ..PrototypeConfig::default() };
        let (acc, lambda, state) = evaluate_stream(&stream, &feats, &proto, 3).unwrap();
        assert_eq!(acc.len(), stream.tasks.len());
        assert!(*acc.last().unwrap() >= 0.95, "{kind:?}: {acc:?}");
        assert!(lambda > 0.0);
        assert_eq!(state.classes().len(), 10);
        // Every class after the base contributes exactly its k shots.
        let base = &stream.tasks[0].classes;
        for (c, &n) in state.classes().iter().zip(state.counts()) {
            assert_eq!(n, if base.contains(c) { 60 } else { 50 });
        }
    }
}

#[test]
fn evaluation_is_reproducible() {
    let data = placeholder_dataset(7, 10, 4);
    let cfg = ScenarioConfig { n: 1, k: 3, base_classes: 4, ..ScenarioConfig::default() };
    let stream = build_stream(&data, &cfg, 2).unwrap();
    let feats = cluster_features(&stream.labels, 7, 6, 9);
    let proto = PrototypeConfig { m: 64, ..PrototypeConfig::default() };
    let a = evaluate_stream(&stream, &feats, &proto, 4).unwrap();
    let b = evaluate_stream(&stream, &feats, &proto, 4).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1.to_bits(), b.1.to_bits());
    assert_eq!(a.2, b.2);
}

#[test]
fn wide_configuration_builds_and_runs() {
    let wide = ModelConfig::paper_scale();
    assert_eq!(wide.input_size, 128);
    assert_eq!(wide.feature_dim(), 512);
    assert_eq!(wide.spectral_blocks, [3, 3, 10, 3]);
    // Same widths and depths on a small input, to keep the forward pass cheap.
    let cfg = ModelConfig { input_size: 16, ..wide };
    let model = DualBranchModel::new(&cfg, 1).unwrap();
    assert_eq!(model.feature_dim(), 512);
    let x = Rng::new(2).normal(&[1, 16, 16]);
    for mask in [BranchMask::Both, BranchMask::SpatialOnly, BranchMask::SpectralOnly] {
        let f = model.forward_masked(&x, mask).unwrap();
        assert_eq!(f.len(), 512);
        assert!(f.is_finite());
    }
}
