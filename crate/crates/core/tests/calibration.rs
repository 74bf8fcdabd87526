//! Dataset-level gates: the synthetic set must be separable from raw pixels
//! before it is allowed to gate anything else.

use aet_core::data::{gen_synthetic, images_to_tensor, SyntheticConfig};
use aet_core::model::ProbeSpec;
use aet_core::nn::Tensor;
use aet_core::traineval::{train_probe_on_features, ProbeTrainConfig};

fn flatten(ds: &aet_core::data::Dataset) -> Tensor {
    let t = images_to_tensor(&ds.images.iter().collect::<Vec<_>>(), &ds.stats).unwrap();
    let n = ds.len();
    let per = t.numel() / n;
    Tensor::from_vec(&[n, per], t.into_data()).unwrap()
}

/// A 3-fc probe on raw pixels must separate the four default classes above
/// 80% held-out accuracy; this validates the dataset itself, with the same
/// generator settings the desk-scale run uses.
#[test]
fn synthetic_classes_are_learnable_from_raw_pixels() {
    let train_cfg = SyntheticConfig::new(32, 100, 11);
    let train = gen_synthetic(&train_cfg);
    let mut test_cfg = train_cfg.clone();
    test_cfg.n_per_class = 50;
    test_cfg.seed = 12;
    let test = gen_synthetic(&test_cfg).with_stats(train.stats.clone());

    let (_, err) = train_probe_on_features(
        ProbeSpec::fc(3, train.class_count),
        &flatten(&train),
        &train.labels,
        &flatten(&test),
        &test.labels,
        &ProbeTrainConfig {
            epochs: 15,
            ..Default::default()
        },
        1,
    )
    .unwrap();
    let accuracy = 100.0 * (1.0 - err);
    assert!(
        accuracy > 80.0,
        "raw-pixel probe reaches only {accuracy:.1}% accuracy"
    );
    println!("raw-pixel 3-fc probe accuracy: {accuracy:.1}%");
}
