//! Nearest-neighbor evaluation of frozen features.
//!
//! Features are the globally pooled block-2 maps in eval mode. Votes use
//! Euclidean distance; vote ties break by smaller summed distance, then by
//! smaller class index, which makes results independent of train-set order.

use crate::data::{images_to_tensor, Dataset};
use crate::model::{encode, AetModel, PROBE_TAP};
use crate::nn::Mode;

use super::{Checkpoint, TrainError};

const FEATURE_BATCH: usize = 256;

/// Pooled tap-2 features of every image in the dataset, row per sample.
pub fn pooled_block2_features(
    model: &mut AetModel,
    ds: &Dataset,
) -> Result<Vec<Vec<f64>>, TrainError> {
    if ds.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut feats = Vec::with_capacity(ds.len());
    for chunk in (0..ds.len()).collect::<Vec<_>>().chunks(FEATURE_BATCH) {
        let imgs: Vec<&crate::warp::Image> = chunk.iter().map(|&i| &ds.images[i]).collect();
        let x = images_to_tensor(&imgs, &ds.stats)?;
        let out = encode(&model.encoder, &mut model.params, &x, PROBE_TAP, Mode::Eval)?;
        let width = out.pooled.shape()[1];
        for (row, _) in chunk.iter().enumerate() {
            feats.push(out.pooled.data()[row * width..(row + 1) * width].to_vec());
        }
    }
    Ok(feats)
}

/// Majority vote among the `k` nearest training features.
pub fn knn_on_features(
    train_feats: &[Vec<f64>],
    train_labels: &[usize],
    test_feats: &[Vec<f64>],
    test_labels: &[usize],
    k: usize,
    class_count: usize,
) -> Result<f64, TrainError> {
    if train_feats.is_empty() || test_feats.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if k == 0 || k > train_feats.len() {
        return Err(TrainError::InvalidConfig(format!(
            "k = {k} must be in 1..={}",
            train_feats.len()
        )));
    }
    let mut errors = 0usize;
    for (feat, &truth) in test_feats.iter().zip(test_labels) {
        // Neighbor order: distance, then label, so permuting the training
        // set cannot change the vote.
        let mut dists: Vec<(f64, usize)> = train_feats
            .iter()
            .zip(train_labels)
            .map(|(tf, &label)| {
                let d: f64 = tf
                    .iter()
                    .zip(feat)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                (d, label)
            })
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        let mut votes = vec![0usize; class_count];
        let mut sum_dist = vec![0.0f64; class_count];
        for &(d, label) in &dists[..k] {
            votes[label] += 1;
            sum_dist[label] += d;
        }
        let mut best = 0usize;
        for c in 1..class_count {
            let better = votes[c] > votes[best]
                || (votes[c] == votes[best] && sum_dist[c] < sum_dist[best]);
            if better {
                best = c;
            }
        }
        if best != truth {
            errors += 1;
        }
    }
    Ok(errors as f64 / test_feats.len() as f64)
}

/// Top-1 error of a k-nearest-neighbor classifier on a checkpoint's pooled
/// block-2 features.
pub fn knn_eval(
    ckpt: &Checkpoint,
    train: &Dataset,
    test: &Dataset,
    k: usize,
) -> Result<f64, TrainError> {
    let sweep = knn_sweep(ckpt, train, test, &[k])?;
    Ok(sweep[0].1)
}

/// One evaluation per `k`, with encoder features computed once and reused.
pub fn knn_sweep(
    ckpt: &Checkpoint,
    train: &Dataset,
    test: &Dataset,
    ks: &[usize],
) -> Result<Vec<(usize, f64)>, TrainError> {
    let mut model = ckpt.build_model()?;
    let train_feats = pooled_block2_features(&mut model, train)?;
    let test_feats = pooled_block2_features(&mut model, test)?;
    ks.iter()
        .map(|&k| {
            knn_on_features(
                &train_feats,
                &train.labels,
                &test_feats,
                &test.labels,
                k,
                train.class_count,
            )
            .map(|e| (k, e))
        })
        .collect()
}
