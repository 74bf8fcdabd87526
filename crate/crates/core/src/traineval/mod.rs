//! Training and evaluation orchestration: the transformation-regression
//! pre-training loop, probe training over frozen features, nearest-neighbor
//! evaluation, and metric logging.
//!
//! Every stochastic stream (shuffling, transformation draws, probe
//! initialization) is derived from the run seed and the epoch index, so a
//! resumed run continues bit-identically and two runs of the same
//! configuration produce identical checkpoints and metrics.

mod checkpoint;
mod knn;
mod metrics;

pub use checkpoint::{BlobInfo, BlobKind, Checkpoint, Manifest, CHECKPOINT_MAGIC};
pub use knn::{knn_eval, knn_on_features, knn_sweep, pooled_block2_features};
pub use metrics::{
    export_metrics, import_metrics, parse_metrics, MetricsLog, MetricsRow, METRICS_HEADER,
};

use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    epoch_permutation, gen_synthetic, load_cifar10, make_aet_batch, Dataset, DataError,
    SyntheticConfig,
};
use crate::model::{
    encode, AetModel, ModelError, NinConfig, ProbeHead, ProbeKind, ProbeSpec, PROBE_TAP,
};
use crate::nn::{lr_at_epoch, sgd_step, Graph, Mode, NnError, SgdConfig, Tensor};
use crate::xform::XformConfig;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
    #[error("malformed csv at line {line}: {reason}")]
    MalformedCsv { line: usize, reason: String },
    #[error("cannot export an empty metrics log")]
    EmptyLog,
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Which dataset a run trains on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSpec {
    Synthetic {
        train: SyntheticConfig,
        test_per_class: usize,
        test_seed: u64,
    },
    Cifar10 { dir: PathBuf },
}

impl DatasetSpec {
    /// A synthetic spec whose held-out split reuses the train statistics.
    pub fn synthetic(train: SyntheticConfig, test_per_class: usize) -> Self {
        let test_seed = train.seed.wrapping_add(1);
        Self::Synthetic {
            train,
            test_per_class,
            test_seed,
        }
    }

    pub fn load(&self) -> Result<(Dataset, Dataset), TrainError> {
        match self {
            Self::Synthetic {
                train,
                test_per_class,
                test_seed,
            } => {
                let train_ds = gen_synthetic(train);
                let mut test_cfg = train.clone();
                test_cfg.n_per_class = *test_per_class;
                test_cfg.seed = *test_seed;
                let test_ds = gen_synthetic(&test_cfg).with_stats(train_ds.stats.clone());
                Ok((train_ds, test_ds))
            }
            Self::Cifar10 { dir } => Ok(load_cifar10(dir)?),
        }
    }

    pub fn class_count(&self) -> usize {
        match self {
            Self::Synthetic { train, .. } => train.shapes.len(),
            Self::Cifar10 { .. } => 10,
        }
    }
}

/// Hyperparameters for training a probe head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
}

impl Default for ProbeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            sgd: SgdConfig {
                base_lr: 0.1,
                momentum: 0.9,
                weight_decay: 5e-4,
                drop_factor: 5.0,
                drop_epochs: vec![20, 26],
            },
        }
    }
}

/// Full description of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub xform: XformConfig,
    pub nin: NinConfig,
    pub sgd: SgdConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Checkpoint-and-evaluate every this many epochs (0: only at the end).
    pub eval_every: usize,
    /// Probe kind trained at every evaluation point, if any.
    pub eval_probe: Option<ProbeSpec>,
    /// K for the nearest-neighbor error at every evaluation point, if any.
    pub eval_knn_k: Option<usize>,
    pub probe_train: ProbeTrainConfig,
    /// Whether weight decay also applies to batch-norm affine parameters.
    pub bn_decay: bool,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be > 0".into()));
        }
        if self.batch_size < 2 {
            return Err(TrainError::InvalidConfig(
                "batch size must be >= 2 (batch norm needs batch statistics)".into(),
            ));
        }
        self.sgd
            .validate()
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        self.nin
            .validate()
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        if let Some(spec) = &self.eval_probe {
            spec.validate()
                .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        }
        if let DatasetSpec::Cifar10 { dir } = &self.dataset {
            if !dir.exists() {
                return Err(TrainError::InvalidConfig(format!(
                    "dataset directory {} does not exist",
                    dir.display()
                )));
            }
        }
        Ok(())
    }

    fn eval_due(&self, epoch_1based: usize) -> bool {
        let cadence = self.eval_every > 0 && epoch_1based % self.eval_every == 0;
        cadence || epoch_1based == self.epochs
    }

    fn checkpoint_for(&self, model: &AetModel, epochs_completed: usize) -> Checkpoint {
        Checkpoint::from_model(
            model,
            self.dataset.clone(),
            self.xform,
            self.sgd.clone(),
            self.bn_decay,
            self.seed,
            epochs_completed,
        )
    }
}

/// The desk-scale synthetic run: four shape classes at 32x32 (1,600 train
/// plus 400 held-out images), a tiny two-block encoder, projective
/// transformation sampling, and probe/nearest-neighbor evaluation at a fixed
/// cadence.
pub fn desk_run_config(seed: u64, out_dir: &std::path::Path) -> RunConfig {
    RunConfig {
        dataset: DatasetSpec::synthetic(
            SyntheticConfig {
                shapes: crate::data::DEFAULT_SHAPES.to_vec(),
                image_size: 32,
                channels: 3,
                n_per_class: 400,
                seed: 11,
                noise: 0.07,
            },
            100,
        ),
        xform: XformConfig::projective_default(),
        nin: NinConfig::tiny(3, 32, [12, 20]),
        sgd: SgdConfig {
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            drop_factor: 5.0,
            drop_epochs: vec![20, 27],
        },
        epochs: 30,
        batch_size: 32,
        eval_every: 3,
        eval_probe: Some(ProbeSpec::fc(1, 4)),
        eval_knn_k: Some(10),
        probe_train: ProbeTrainConfig::default(),
        bn_decay: true,
        seed,
        out_dir: out_dir.to_path_buf(),
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent deterministic stream for `(seed, epoch, tag)`.
pub(crate) fn stream_rng(seed: u64, epoch: u64, tag: u64) -> ChaCha8Rng {
    let mut state = seed ^ tag.rotate_left(32) ^ epoch.wrapping_mul(0xA24B_AED4_963E_E407);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

const TAG_EPOCH: u64 = 1;
const TAG_PROBE: u64 = 2;

/// Runs transformation-regression pre-training from scratch.
///
/// Checkpoints land in the output directory at the evaluation cadence and at
/// the end (`final.ckpt`), together with `metrics.csv`.
pub fn train_aet(cfg: &RunConfig) -> Result<(Checkpoint, MetricsLog), TrainError> {
    cfg.validate()?;
    let model = AetModel::new(&cfg.nin, cfg.seed, cfg.bn_decay)?;
    train_loop(cfg, model, 0)
}

/// Continues a run from a checkpoint; the configuration must match the one
/// the checkpoint was trained with.
pub fn resume_aet(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<(Checkpoint, MetricsLog), TrainError> {
    cfg.validate()?;
    let m = &ckpt.manifest;
    if m.nin != cfg.nin {
        return Err(TrainError::ArchMismatch(
            "checkpoint encoder config differs from the run config".into(),
        ));
    }
    if m.seed != cfg.seed || m.xform != cfg.xform || m.sgd != cfg.sgd || m.dataset != cfg.dataset
        || m.bn_decay != cfg.bn_decay
    {
        return Err(TrainError::ArchMismatch(
            "checkpoint training setup differs from the run config".into(),
        ));
    }
    if m.epochs_completed >= cfg.epochs {
        return Err(TrainError::InvalidConfig(format!(
            "checkpoint already covers {} epochs, run asks for {}",
            m.epochs_completed, cfg.epochs
        )));
    }
    let model = ckpt.build_model()?;
    train_loop(cfg, model, m.epochs_completed)
}

fn train_loop(
    cfg: &RunConfig,
    mut model: AetModel,
    start_epoch: usize,
) -> Result<(Checkpoint, MetricsLog), TrainError> {
    let (train_ds, test_ds) = cfg.dataset.load()?;
    if train_ds.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut log = MetricsLog::new();
    for epoch in start_epoch..cfg.epochs {
        let started = Instant::now();
        let lr = lr_at_epoch(&cfg.sgd, epoch);
        let mut rng = stream_rng(cfg.seed, epoch as u64, TAG_EPOCH);
        let perm = epoch_permutation(train_ds.len(), &mut rng);
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for (batch_idx, chunk) in perm.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                // Batch norm cannot use a single-sample remainder.
                continue;
            }
            let batch = make_aet_batch(&train_ds, chunk, &cfg.xform, &mut rng)?;
            let mut step = || -> Result<f64, NnError> {
                let mut g = Graph::new();
                let pred = aet_step_forward(&mut model, &mut g, &batch)?;
                let target = g.leaf(batch.targets.clone())?;
                let loss = g.regression_loss(pred, target)?;
                let value = g.value(loss).item()?;
                g.backward(loss)?;
                g.collect_grads(&mut model.params)?;
                sgd_step(&mut model.params, &cfg.sgd, lr)?;
                Ok(value)
            };
            let loss_value = step().map_err(|e| match e {
                NnError::NonFinite { .. } => TrainError::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: batch_idx,
                },
                other => TrainError::Nn(other),
            })?;
            loss_sum += loss_value * chunk.len() as f64;
            loss_count += chunk.len();
        }
        let epoch_1based = epoch + 1;
        let aet_loss = loss_sum / loss_count.max(1) as f64;
        if !aet_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch: epoch_1based,
                batch: 0,
            });
        }

        let mut probe_error = None;
        let mut knn_error = None;
        if cfg.eval_due(epoch_1based) {
            let ckpt = cfg.checkpoint_for(&model, epoch_1based);
            if let Some(spec) = cfg.eval_probe {
                let mut spec = spec;
                spec.classes = train_ds.class_count;
                let (_, err) = train_probe_on_datasets(
                    &mut model,
                    spec,
                    &train_ds,
                    &test_ds,
                    &cfg.probe_train,
                    stream_rng(cfg.seed, epoch_1based as u64, TAG_PROBE),
                )?;
                probe_error = Some(err);
            }
            if let Some(k) = cfg.eval_knn_k {
                let train_feats = pooled_block2_features(&mut model, &train_ds)?;
                let test_feats = pooled_block2_features(&mut model, &test_ds)?;
                knn_error = Some(knn_on_features(
                    &train_feats,
                    &train_ds.labels,
                    &test_feats,
                    &test_ds.labels,
                    k,
                    train_ds.class_count,
                )?);
            }
            ckpt.save(&cfg.out_dir.join(format!("ckpt_epoch_{epoch_1based:04}.ckpt")))?;
        }

        log.push(MetricsRow {
            epoch: epoch_1based,
            aet_loss,
            lr,
            probe_error,
            knn_error,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }
    let final_ckpt = cfg.checkpoint_for(&model, cfg.epochs);
    final_ckpt.save(&cfg.out_dir.join("final.ckpt"))?;
    export_metrics(&log, &cfg.out_dir.join("metrics.csv"))?;
    Ok((final_ckpt, log))
}

fn aet_step_forward(
    model: &mut AetModel,
    g: &mut Graph,
    batch: &crate::data::AetBatch,
) -> Result<crate::nn::Var, NnError> {
    model
        .forward(g, &batch.originals, &batch.transformed, Mode::Train)
        .map_err(|e| match e {
            ModelError::Nn(inner) => inner,
            other => NnError::ShapeMismatch(other.to_string()),
        })
}

/// Extracts tap-2 features for a probe kind: pooled vectors for fc probes,
/// full maps for the conv probe.
fn probe_features(
    model: &mut AetModel,
    ds: &Dataset,
    kind: ProbeKind,
) -> Result<Tensor, TrainError> {
    if ds.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut rows: Vec<f64> = Vec::new();
    let mut shape_tail: Vec<usize> = Vec::new();
    for chunk in (0..ds.len()).collect::<Vec<_>>().chunks(256) {
        let imgs: Vec<&crate::warp::Image> = chunk.iter().map(|&i| &ds.images[i]).collect();
        let x = crate::data::images_to_tensor(&imgs, &ds.stats)?;
        let out = encode(&model.encoder, &mut model.params, &x, PROBE_TAP, Mode::Eval)?;
        let t = match kind {
            ProbeKind::Fc(_) => out.pooled,
            ProbeKind::Conv => out.map,
        };
        shape_tail = t.shape()[1..].to_vec();
        rows.extend_from_slice(t.data());
    }
    let mut shape = vec![ds.len()];
    shape.extend_from_slice(&shape_tail);
    Ok(Tensor::from_vec(&shape, rows)?)
}

fn tensor_rows(t: &Tensor, indices: &[usize]) -> Tensor {
    let per: usize = t.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(indices.len() * per);
    for &i in indices {
        data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
    }
    let mut shape = vec![indices.len()];
    shape.extend_from_slice(&t.shape()[1..]);
    Tensor::from_vec(&shape, data).expect("row slice shape")
}

/// Error rate of `logits`-argmax against labels.
fn top1_error(logits: &Tensor, labels: &[usize]) -> f64 {
    let (n, c) = logits.dims2().expect("logits are [N,C]");
    let mut errors = 0usize;
    for i in 0..n {
        let row = &logits.data()[i * c..(i + 1) * c];
        let mut best = 0usize;
        for j in 1..c {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best != labels[i] {
            errors += 1;
        }
    }
    errors as f64 / n.max(1) as f64
}

fn train_probe_on_datasets(
    model: &mut AetModel,
    spec: ProbeSpec,
    train_ds: &Dataset,
    test_ds: &Dataset,
    cfg: &ProbeTrainConfig,
    mut rng: ChaCha8Rng,
) -> Result<(ProbeHead, f64), TrainError> {
    use rand::Rng;
    let train_feats = probe_features(model, train_ds, spec.kind)?;
    let test_feats = probe_features(model, test_ds, spec.kind)?;
    let mut head = ProbeHead::new(spec, &train_feats.shape()[1..], rng.gen())?;
    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(&cfg.sgd, epoch);
        let perm = epoch_permutation(train_ds.len(), &mut rng);
        for chunk in perm.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let feats = tensor_rows(&train_feats, chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| train_ds.labels[i]).collect();
            let mut g = Graph::new();
            let fv = g.leaf(feats)?;
            let logits = head.forward(&mut g, fv, Mode::Train)?;
            let loss = g.softmax_cross_entropy(logits, &labels)?;
            g.backward(loss)?;
            g.collect_grads(&mut head.params)?;
            sgd_step(&mut head.params, &cfg.sgd, lr)?;
        }
    }
    let mut g = Graph::new();
    let fv = g.leaf(test_feats)?;
    let logits = head.forward(&mut g, fv, Mode::Eval)?;
    let error = top1_error(g.value(logits), &test_ds.labels);
    Ok((head, error))
}

/// Trains a probe head on a checkpoint's frozen tap-2 features and reports
/// the held-out top-1 error. Encoder weights are never updated.
pub fn train_probe(
    ckpt: &Checkpoint,
    spec: ProbeSpec,
    train_ds: &Dataset,
    test_ds: &Dataset,
    cfg: &ProbeTrainConfig,
    seed: u64,
) -> Result<(ProbeHead, f64), TrainError> {
    if ckpt.manifest.nin.num_blocks < PROBE_TAP {
        return Err(TrainError::ArchMismatch(format!(
            "checkpoint has {} blocks, probes need at least {PROBE_TAP}",
            ckpt.manifest.nin.num_blocks
        )));
    }
    let mut spec = spec;
    spec.classes = train_ds.class_count;
    let mut model = ckpt.build_model()?;
    train_probe_on_datasets(
        &mut model,
        spec,
        train_ds,
        test_ds,
        cfg,
        stream_rng(seed, 0, TAG_PROBE),
    )
}

/// Trains a probe head directly on given feature rows (used to validate the
/// probe machinery on features of known separability, and to probe raw
/// pixels).
pub fn train_probe_on_features(
    spec: ProbeSpec,
    train_feats: &Tensor,
    train_labels: &[usize],
    test_feats: &Tensor,
    test_labels: &[usize],
    cfg: &ProbeTrainConfig,
    seed: u64,
) -> Result<(ProbeHead, f64), TrainError> {
    use rand::Rng;
    let mut rng = stream_rng(seed, 0, TAG_PROBE);
    let mut head = ProbeHead::new(spec, &train_feats.shape()[1..], rng.gen())?;
    let n = train_feats.shape()[0];
    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(&cfg.sgd, epoch);
        let perm = epoch_permutation(n, &mut rng);
        for chunk in perm.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let feats = tensor_rows(train_feats, chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| train_labels[i]).collect();
            let mut g = Graph::new();
            let fv = g.leaf(feats)?;
            let logits = head.forward(&mut g, fv, Mode::Train)?;
            let loss = g.softmax_cross_entropy(logits, &labels)?;
            g.backward(loss)?;
            g.collect_grads(&mut head.params)?;
            sgd_step(&mut head.params, &cfg.sgd, lr)?;
        }
    }
    let mut g = Graph::new();
    let fv = g.leaf(test_feats.clone())?;
    let logits = head.forward(&mut g, fv, Mode::Eval)?;
    let error = top1_error(g.value(logits), test_labels);
    Ok((head, error))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman_rank_correlation(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rx = ranks(xs);
    let ry = ranks(ys);
    pearson(&rx, &ry)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).expect("finite values"));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DEFAULT_SHAPES;
    use crate::xform::Family;

    pub(crate) fn tiny_run_config(out_dir: &std::path::Path) -> RunConfig {
        RunConfig {
            dataset: DatasetSpec::synthetic(
                SyntheticConfig {
                    shapes: DEFAULT_SHAPES.to_vec(),
                    image_size: 16,
                    channels: 1,
                    n_per_class: 8,
                    seed: 5,
                    noise: 0.06,
                },
                2,
            ),
            xform: XformConfig::projective_default(),
            nin: NinConfig::tiny(1, 16, [4, 6]),
            sgd: SgdConfig {
                base_lr: 0.05,
                momentum: 0.9,
                weight_decay: 5e-4,
                drop_factor: 5.0,
                drop_epochs: vec![],
            },
            epochs: 2,
            batch_size: 8,
            eval_every: 0,
            eval_probe: None,
            eval_knn_k: None,
            probe_train: ProbeTrainConfig {
                epochs: 3,
                batch_size: 8,
                sgd: SgdConfig {
                    base_lr: 0.05,
                    momentum: 0.9,
                    weight_decay: 5e-4,
                    drop_factor: 5.0,
                    drop_epochs: vec![],
                },
            },
            bn_decay: true,
            seed: 7,
            out_dir: out_dir.to_path_buf(),
        }
    }

    #[test]
    fn single_epoch_run_produces_one_finite_row() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_run_config(dir.path());
        cfg.epochs = 1;
        let (ckpt, log) = train_aet(&cfg).unwrap();
        assert_eq!(log.rows.len(), 1);
        assert!(log.rows[0].aet_loss.is_finite());
        assert_eq!(ckpt.manifest.epochs_completed, 1);
        assert!(dir.path().join("final.ckpt").exists());
        assert!(dir.path().join("metrics.csv").exists());
    }

    #[test]
    fn zero_epochs_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_run_config(dir.path());
        cfg.epochs = 0;
        assert!(matches!(
            train_aet(&cfg),
            Err(TrainError::InvalidConfig(_))
        ));
        let mut cfg = tiny_run_config(dir.path());
        cfg.batch_size = 1;
        assert!(matches!(
            train_aet(&cfg),
            Err(TrainError::InvalidConfig(_))
        ));
    }

    #[test]
    fn identical_seeds_give_identical_runs() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let cfg_a = tiny_run_config(dir_a.path());
        let cfg_b = tiny_run_config(dir_b.path());
        let (ckpt_a, log_a) = train_aet(&cfg_a).unwrap();
        let (ckpt_b, log_b) = train_aet(&cfg_b).unwrap();
        assert_eq!(ckpt_a.blobs, ckpt_b.blobs);
        let strip = |log: &MetricsLog| {
            log.rows
                .iter()
                .map(|r| (r.epoch, r.aet_loss.to_bits(), r.lr.to_bits()))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&log_a), strip(&log_b));
    }

    #[test]
    fn resume_matches_straight_through_run() {
        let dir_full = tempfile::tempdir().unwrap();
        let mut cfg_full = tiny_run_config(dir_full.path());
        cfg_full.epochs = 4;
        cfg_full.eval_every = 2;
        let (ckpt_full, _) = train_aet(&cfg_full).unwrap();

        let dir_half = tempfile::tempdir().unwrap();
        let mut cfg_half = tiny_run_config(dir_half.path());
        cfg_half.epochs = 2;
        cfg_half.eval_every = 2;
        let (ckpt_half, _) = train_aet(&cfg_half).unwrap();

        let dir_resume = tempfile::tempdir().unwrap();
        let mut cfg_resume = tiny_run_config(dir_resume.path());
        cfg_resume.epochs = 4;
        cfg_resume.eval_every = 2;
        let (ckpt_resumed, log_resumed) = resume_aet(&cfg_resume, &ckpt_half).unwrap();

        assert_eq!(ckpt_full.manifest, ckpt_resumed.manifest);
        assert_eq!(ckpt_full.blobs, ckpt_resumed.blobs);
        assert_eq!(log_resumed.rows.first().map(|r| r.epoch), Some(3));
    }

    #[test]
    fn resume_rejects_mismatched_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_run_config(dir.path());
        let (ckpt, _) = train_aet(&cfg).unwrap();
        let mut other = cfg.clone();
        other.epochs = 4;
        other.seed = 8;
        assert!(matches!(
            resume_aet(&other, &ckpt),
            Err(TrainError::ArchMismatch(_))
        ));
        let mut done = cfg.clone();
        done.epochs = 2;
        assert!(matches!(
            resume_aet(&done, &ckpt),
            Err(TrainError::InvalidConfig(_))
        ));
    }

    #[test]
    fn probe_on_one_hot_features_reaches_zero_error() {
        // Features that literally encode the class: every probe kind must
        // separate them perfectly.
        let classes = 4usize;
        let n = 64usize;
        let mut data = vec![0.0; n * classes];
        let mut labels = vec![0usize; n];
        for i in 0..n {
            let c = i % classes;
            labels[i] = c;
            data[i * classes + c] = 1.0;
        }
        let feats = Tensor::from_vec(&[n, classes], data).unwrap();
        let (_, err) = train_probe_on_features(
            ProbeSpec::fc(1, classes),
            &feats,
            &labels,
            &feats,
            &labels,
            &ProbeTrainConfig {
                epochs: 20,
                batch_size: 16,
                sgd: SgdConfig {
                    base_lr: 0.5,
                    momentum: 0.9,
                    weight_decay: 0.0,
                    drop_factor: 5.0,
                    drop_epochs: vec![],
                },
            },
            3,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn probe_training_leaves_encoder_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_run_config(dir.path());
        let (ckpt, _) = train_aet(&cfg).unwrap();
        let (train_ds, test_ds) = cfg.dataset.load().unwrap();
        let before = ckpt.encoder_param_bytes();
        let (_, err) = train_probe(
            &ckpt,
            ProbeSpec::fc(2, 0),
            &train_ds,
            &test_ds,
            &cfg.probe_train,
            1,
        )
        .unwrap();
        assert!((0.0..=1.0).contains(&err));
        assert_eq!(before, ckpt.encoder_param_bytes());
        // A knn evaluation does not touch the encoder either.
        let _ = knn_eval(&ckpt, &train_ds, &test_ds, 3).unwrap();
        assert_eq!(before, ckpt.encoder_param_bytes());
    }

    #[test]
    fn knn_sweep_matches_individual_evals() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_run_config(dir.path());
        let (ckpt, _) = train_aet(&cfg).unwrap();
        let (train_ds, test_ds) = cfg.dataset.load().unwrap();
        let ks = [1usize, 3, 5, 3];
        let sweep = knn_sweep(&ckpt, &train_ds, &test_ds, &ks).unwrap();
        for (k, err) in &sweep {
            assert_eq!(*err, knn_eval(&ckpt, &train_ds, &test_ds, *k).unwrap());
        }
        // Duplicate K entries give identical errors.
        assert_eq!(sweep[1].1, sweep[3].1);
    }

    #[test]
    fn spearman_detects_monotone_relations() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let ys = [10.0, 20.0, 25.0, 40.0, 100.0];
        assert!((spearman_rank_correlation(&xs, &ys) - 1.0).abs() < 1e-12);
        let flipped: Vec<f64> = ys.iter().map(|v| -v).collect();
        assert!((spearman_rank_correlation(&xs, &flipped) + 1.0).abs() < 1e-12);
        let with_ties = [1.0, 1.0, 2.0, 3.0];
        let other = [5.0, 5.0, 7.0, 9.0];
        assert!(spearman_rank_correlation(&with_ties, &other) > 0.9);
    }

    #[test]
    fn identity_only_sampler_collapses_to_constant_prediction() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_run_config(dir.path());
        cfg.xform = XformConfig::identity_only(Family::Projective);
        cfg.epochs = 30;
        cfg.sgd.base_lr = 0.02;
        let (ckpt, log) = train_aet(&cfg).unwrap();
        let first = log.rows.first().unwrap().aet_loss;
        let last = log.rows.last().unwrap().aet_loss;
        assert!(last < 0.05 * first, "loss {first} -> {last}");
        // Predictions approach the identity target vector.
        let mut model = ckpt.build_model().unwrap();
        let (train_ds, _) = cfg.dataset.load().unwrap();
        let mut rng = stream_rng(99, 0, TAG_EPOCH);
        let batch = make_aet_batch(&train_ds, &[0, 1, 2, 3], &cfg.xform, &mut rng).unwrap();
        let mut g = Graph::new();
        let pred = model
            .forward(&mut g, &batch.originals, &batch.transformed, Mode::Eval)
            .unwrap();
        let identity = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        for row in 0..4 {
            for i in 0..8 {
                let got = g.value(pred).data()[row * 8 + i];
                assert!(
                    (got - identity[i]).abs() < 0.25,
                    "row {row} component {i}: {got}"
                );
            }
        }
    }
}
