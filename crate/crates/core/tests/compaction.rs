mod common;

use aknet::backbone::{build_backbone, split_at, BackboneConfig, Stage};
use aknet::classifier::{compact_kernel, compact_network, compact_params, CompactAxis, PointLayerKind, ShiftPolicy};
use aknet::{Error, ParamStore, Tensor};
use common::compaction_gap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn width_constant_conv2d_equals_compacted_conv1d() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let gap = compaction_gap(&mut rng);
        assert!(gap <= 1e-6, "gap {gap:e}");
    }
}

#[test]
fn compaction_sums_the_right_axis() {
    let w = Tensor::from_fn([1, 1, 2, 3], |i| i as f64);
    // Rows [0 1 2] and [3 4 5].
    assert_eq!(compact_kernel(&w, CompactAxis::Width).unwrap().data(), &[3.0, 12.0]);
    assert_eq!(compact_kernel(&w, CompactAxis::Height).unwrap().data(), &[3.0, 5.0, 7.0]);
    assert!(compact_kernel(&Tensor::<f64>::zeros([2, 2]), CompactAxis::Width).is_err());
}

#[test]
fn point_network_mirrors_back_end() {
    let layers = build_backbone(&BackboneConfig::default()).unwrap();
    let split = split_at(&layers, Stage::S3).unwrap();
    let points = compact_network(&split.back, ShiftPolicy::Drop).unwrap();
    let blocks: Vec<_> = points.iter().filter(|l| l.kind == PointLayerKind::Residual1d).collect();
    assert_eq!(blocks.len(), 2);
    assert_eq!((blocks[0].in_channels, blocks[0].out_channels, blocks[0].stride), (64, 96, 2));
    assert_eq!((blocks[1].in_channels, blocks[1].out_channels, blocks[1].stride), (96, 128, 2));
    assert!(matches!(
        compact_network(&split.back, ShiftPolicy::Reject),
        Err(Error::NoPointCounterpart(_))
    ));
}

#[test]
fn compacted_params_keep_affine_terms() {
    let layers = build_backbone(&BackboneConfig::default()).unwrap();
    let split = split_at(&layers, Stage::S4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut src: ParamStore<f64> = ParamStore::new();
    aknet::backbone::init_layers(&split.back, &mut src, &mut rng);
    let dst = compact_params(&split.back, &src, CompactAxis::Width).unwrap();
    assert_eq!(dst.len(), src.len());
    let w = src.get("s5.block.conv1.weight").unwrap();
    let w1 = dst.get("s5.block.conv1.weight.1d").unwrap();
    assert_eq!(w1, &compact_kernel(w, CompactAxis::Width).unwrap());
    assert_eq!(dst.get("s5.block.conv1.scale.1d").unwrap(), src.get("s5.block.conv1.scale").unwrap());
}
