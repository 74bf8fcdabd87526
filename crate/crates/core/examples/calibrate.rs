//! Calibration for the desk-scale run: random-init vs trained
//! nearest-neighbor error, raw-pixel probe learnability, loss trajectory,
//! and wall time. Run with `cargo run --example calibrate [epochs]`.

use std::time::Instant;

use aet_core::data::images_to_tensor;
use aet_core::model::{AetModel, ProbeSpec};
use aet_core::nn::Tensor;
use aet_core::traineval::{
    desk_run_config, knn_eval, spearman_rank_correlation, train_aet, train_probe_on_features,
    Checkpoint, ProbeTrainConfig,
};

fn main() {
    let epochs: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(10);
    let out = tempfile::tempdir().unwrap();
    let mut cfg = desk_run_config(7, out.path());
    cfg.epochs = epochs;
    let (train_ds, test_ds) = cfg.dataset.load().unwrap();
    println!(
        "dataset: {} train / {} test, {} classes, {}x{}x{}",
        train_ds.len(),
        test_ds.len(),
        train_ds.class_count,
        train_ds.channels(),
        train_ds.image_size(),
        train_ds.image_size()
    );

    // Raw-pixel probe learnability.
    let t0 = Instant::now();
    let flat = |ds: &aet_core::data::Dataset| -> Tensor {
        let t = images_to_tensor(&ds.images.iter().collect::<Vec<_>>(), &ds.stats).unwrap();
        let n = ds.len();
        let per = t.numel() / n;
        Tensor::from_vec(&[n, per], t.into_data()).unwrap()
    };
    let train_flat = flat(&train_ds);
    let test_flat = flat(&test_ds);
    let (_, raw_err) = train_probe_on_features(
        ProbeSpec::fc(3, train_ds.class_count),
        &train_flat,
        &train_ds.labels,
        &test_flat,
        &test_ds.labels,
        &ProbeTrainConfig {
            epochs: 15,
            ..Default::default()
        },
        1,
    )
    .unwrap();
    println!(
        "raw-pixel fc_3 probe error: {raw_err:.4} (accuracy {:.2}%)  [{:.1}s]",
        100.0 * (1.0 - raw_err),
        t0.elapsed().as_secs_f64()
    );

    // Random-init encoder baseline.
    let t0 = Instant::now();
    let random_model = AetModel::new(&cfg.nin, 12345, cfg.bn_decay).unwrap();
    let random_ckpt = Checkpoint::from_model(
        &random_model,
        cfg.dataset.clone(),
        cfg.xform,
        cfg.sgd.clone(),
        cfg.bn_decay,
        12345,
        0,
    );
    let random_knn = knn_eval(&random_ckpt, &train_ds, &test_ds, 10).unwrap();
    println!(
        "random-init knn(10) error: {random_knn:.4}  [{:.1}s]",
        t0.elapsed().as_secs_f64()
    );

    // Training run.
    let t0 = Instant::now();
    let (ckpt, log) = train_aet(&cfg).unwrap();
    let train_secs = t0.elapsed().as_secs_f64();
    println!("training {} epochs: {:.1}s total, {:.1}s/epoch", cfg.epochs, train_secs, train_secs / cfg.epochs as f64);
    for row in &log.rows {
        println!(
            "  epoch {:>3}: loss {:.4} lr {:.4}{}{}",
            row.epoch,
            row.aet_loss,
            row.lr,
            row.probe_error
                .map(|e| format!(" probe {e:.4}"))
                .unwrap_or_default(),
            row.knn_error
                .map(|e| format!(" knn {e:.4}"))
                .unwrap_or_default()
        );
    }
    let trained_knn = knn_eval(&ckpt, &train_ds, &test_ds, 10).unwrap();
    println!("trained knn(10) error: {trained_knn:.4}");
    println!(
        "gap (random - trained): {:.2} percentage points",
        100.0 * (random_knn - trained_knn)
    );
    let evals: Vec<(f64, f64)> = log
        .rows
        .iter()
        .filter_map(|r| r.probe_error.map(|p| (r.aet_loss, p)))
        .collect();
    if evals.len() >= 3 {
        let (losses, errs): (Vec<f64>, Vec<f64>) = evals.into_iter().unzip();
        println!(
            "rank correlation (loss vs probe error) over {} checkpoints: {:.3}",
            losses.len(),
            spearman_rank_correlation(&losses, &errs)
        );
    }
    let first = log.rows.first().unwrap().aet_loss;
    let last = log.rows.last().unwrap().aet_loss;
    println!("loss: epoch1 {first:.4} -> final {last:.4} (ratio {:.3})", last / first);
}
