//! Dataset ingestion and batching: the CIFAR-10 binary format, a synthetic
//! shape dataset for fast end-to-end verification, per-channel normalization,
//! and assembly of training batches with per-sample transformations.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::Tensor;
use crate::warp::{warp_image, Image};
use crate::xform::{TransformSample, XformConfig};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("corrupt record in {file}: {reason} at byte {offset}")]
    CorruptRecord {
        file: PathBuf,
        offset: u64,
        reason: String,
    },
    #[error("bad label {label} in {file} at byte {offset}")]
    BadLabel {
        file: PathBuf,
        offset: u64,
        label: u8,
    },
    #[error("index {index} out of range for dataset of {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("warp failed: {0}")]
    Warp(#[from] crate::warp::WarpError),
    #[error(transparent)]
    Xform(#[from] crate::xform::XformError),
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
}

/// Per-channel normalization statistics, computed over a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn compute(images: &[Image]) -> Self {
        let channels = images.first().map_or(0, Image::channels);
        let mut mean = vec![0.0; channels];
        let mut count = vec![0usize; channels];
        for img in images {
            let per = img.height() * img.width();
            for c in 0..channels {
                let base = c * per;
                mean[c] += img.pixels()[base..base + per].iter().sum::<f64>();
                count[c] += per;
            }
        }
        for c in 0..channels {
            mean[c] /= count[c].max(1) as f64;
        }
        let mut var = vec![0.0; channels];
        for img in images {
            let per = img.height() * img.width();
            for c in 0..channels {
                let base = c * per;
                var[c] += img.pixels()[base..base + per]
                    .iter()
                    .map(|v| (v - mean[c]) * (v - mean[c]))
                    .sum::<f64>();
            }
        }
        let std = var
            .iter()
            .zip(&count)
            .map(|(v, &n)| (v / n.max(1) as f64).sqrt().max(1e-8))
            .collect();
        Self { mean, std }
    }

    /// Identity statistics: mean 0, std 1 per channel.
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

/// Labeled images with the normalization statistics of their training split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub stats: NormStats,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Replaces the normalization statistics (a test split carries the ones
    /// computed on its training split).
    pub fn with_stats(mut self, stats: NormStats) -> Self {
        self.stats = stats;
        self
    }

    pub fn channels(&self) -> usize {
        self.images.first().map_or(0, Image::channels)
    }

    pub fn image_size(&self) -> usize {
        self.images.first().map_or(0, Image::height)
    }
}

const CIFAR_RECORD: u64 = 3073;
const CIFAR_DIM: usize = 32;
const CIFAR_CLASSES: usize = 10;

/// Loads the binary-format CIFAR-10 files (`data_batch_1..5.bin`,
/// `test_batch.bin`): one label byte then 3072 channel-planar pixel bytes
/// per record, pixels scaled to `[0, 1]`. Test statistics come from the
/// training split.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset), DataError> {
    let train_files: Vec<PathBuf> = (1..=5)
        .map(|i| dir.join(format!("data_batch_{i}.bin")))
        .collect();
    let test_file = dir.join("test_batch.bin");

    let mut train_images = Vec::new();
    let mut train_labels = Vec::new();
    for f in &train_files {
        load_cifar_file(f, &mut train_images, &mut train_labels)?;
    }
    let mut test_images = Vec::new();
    let mut test_labels = Vec::new();
    load_cifar_file(&test_file, &mut test_images, &mut test_labels)?;

    let stats = NormStats::compute(&train_images);
    let train = Dataset {
        images: train_images,
        labels: train_labels,
        class_count: CIFAR_CLASSES,
        stats: stats.clone(),
    };
    let test = Dataset {
        images: test_images,
        labels: test_labels,
        class_count: CIFAR_CLASSES,
        stats,
    };
    Ok((train, test))
}

fn load_cifar_file(
    path: &Path,
    images: &mut Vec<Image>,
    labels: &mut Vec<usize>,
) -> Result<(), DataError> {
    let bytes = fs::read(path).map_err(|_| DataError::MissingFile(path.to_path_buf()))?;
    if bytes.len() as u64 % CIFAR_RECORD != 0 {
        let offset = bytes.len() as u64 - bytes.len() as u64 % CIFAR_RECORD;
        return Err(DataError::CorruptRecord {
            file: path.to_path_buf(),
            offset,
            reason: format!(
                "file length {} is not a multiple of {CIFAR_RECORD}",
                bytes.len()
            ),
        });
    }
    for (rec, chunk) in bytes.chunks_exact(CIFAR_RECORD as usize).enumerate() {
        let label = chunk[0];
        if label as usize >= CIFAR_CLASSES {
            return Err(DataError::BadLabel {
                file: path.to_path_buf(),
                offset: rec as u64 * CIFAR_RECORD,
                label,
            });
        }
        let pixels = chunk[1..].iter().map(|&b| b as f64 / 255.0).collect();
        images.push(Image::from_pixels(3, CIFAR_DIM, CIFAR_DIM, pixels));
        labels.push(label as usize);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Square,
    Disk,
    Triangle,
    Cross,
    HalfDisk,
    Ell,
    Tee,
}

/// The default class set is orientation-bearing: every kind is drawn in a
/// canonical orientation and none is symmetric under quarter turns, so a
/// sampled rotation stays recoverable from the image content.
pub const DEFAULT_SHAPES: [ShapeKind; 4] = [
    ShapeKind::Triangle,
    ShapeKind::HalfDisk,
    ShapeKind::Ell,
    ShapeKind::Tee,
];

/// Configuration of the synthetic shape dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub shapes: Vec<ShapeKind>,
    pub image_size: usize,
    pub channels: usize,
    pub n_per_class: usize,
    pub seed: u64,
    /// Peak amplitude of the uniform background noise.
    pub noise: f64,
}

impl SyntheticConfig {
    pub fn new(image_size: usize, n_per_class: usize, seed: u64) -> Self {
        Self {
            shapes: DEFAULT_SHAPES.to_vec(),
            image_size,
            channels: 3,
            n_per_class,
            seed,
            noise: 0.07,
        }
    }
}

/// Signed distance to a shape boundary in normalized coordinates (negative
/// inside).
fn shape_sdf(kind: ShapeKind, x: f64, y: f64, r: f64) -> f64 {
    match kind {
        ShapeKind::Square => x.abs().max(y.abs()) - r,
        ShapeKind::Disk => (x * x + y * y).sqrt() - r,
        ShapeKind::Triangle => {
            // Isoceles triangle pointing up: intersection of three half
            // planes through the vertices.
            let verts = [(0.0, -r), (0.95 * r, 0.75 * r), (-0.95 * r, 0.75 * r)];
            let mut d = f64::NEG_INFINITY;
            for i in 0..3 {
                let (ax, ay) = verts[i];
                let (bx, by) = verts[(i + 1) % 3];
                let (ex, ey) = (bx - ax, by - ay);
                let len = (ex * ex + ey * ey).sqrt();
                // Outward normal of edge a->b for counter-clockwise order.
                let (nx, ny) = (ey / len, -ex / len);
                d = d.max(nx * (x - ax) + ny * (y - ay));
            }
            d
        }
        ShapeKind::Cross => {
            let arm = 0.38 * r;
            let horiz = (x.abs() - r).max(y.abs() - arm);
            let vert = (x.abs() - arm).max(y.abs() - r);
            horiz.min(vert)
        }
        ShapeKind::HalfDisk => {
            // Flat edge on top, bowl below.
            let disk = (x * x + y * y).sqrt() - r;
            disk.max(-y)
        }
        ShapeKind::Ell => {
            let bar = 0.42 * r;
            // Vertical stroke on the left, foot along the bottom.
            let vertical = ((x + r - bar).abs() - bar).max(y.abs() - r);
            let foot = (x.abs() - r).max((y - r + bar).abs() - bar);
            vertical.min(foot)
        }
        ShapeKind::Tee => {
            let bar = 0.42 * r;
            // Cap along the top, stem down the middle.
            let cap = (x.abs() - r).max((y + r - bar).abs() - bar);
            let stem = (x.abs() - bar).max(y.abs() - r);
            cap.min(stem)
        }
    }
}

/// Renders anti-aliased filled shapes at random positions and sizes over
/// noisy backgrounds; the class is the shape kind. Bit-identical per seed.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Dataset {
    assert!(cfg.image_size >= 16, "synthetic images need size >= 16");
    assert!(!cfg.shapes.is_empty(), "need at least one shape class");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let size = cfg.image_size;
    let px = 2.0 / size as f64;
    let mut images = Vec::with_capacity(cfg.shapes.len() * cfg.n_per_class);
    let mut labels = Vec::with_capacity(images.capacity());
    for (class, &kind) in cfg.shapes.iter().enumerate() {
        for _ in 0..cfg.n_per_class {
            let cx = rng.gen_range(-0.25..0.25);
            let cy = rng.gen_range(-0.25..0.25);
            let r = rng.gen_range(0.28..0.48);
            let bg = rng.gen_range(0.2..0.4);
            let fg = bg + rng.gen_range(0.22..0.45);
            let mut tint = vec![1.0; cfg.channels];
            for t in tint.iter_mut() {
                *t = rng.gen_range(0.8..1.0);
            }
            let mut img = Image::new(cfg.channels, size, size);
            for i in 0..size {
                for j in 0..size {
                    let x = (j as f64 + 0.5) * px - 1.0;
                    let y = (i as f64 + 0.5) * px - 1.0;
                    let sdf = shape_sdf(kind, x - cx, y - cy, r);
                    // One-pixel soft edge.
                    let alpha = (0.5 - sdf / px).clamp(0.0, 1.0);
                    for (c, t) in tint.iter().enumerate() {
                        let noise = rng.gen_range(-cfg.noise..cfg.noise);
                        let v = (bg * (1.0 - alpha) + fg * alpha) * t + noise;
                        img.set(c, i, j, v.clamp(0.0, 1.0));
                    }
                }
            }
            images.push(img);
            labels.push(class);
        }
    }
    let stats = NormStats::compute(&images);
    Dataset {
        images,
        labels,
        class_count: cfg.shapes.len(),
        stats,
    }
}

/// Normalizes images into a `[N,C,H,W]` tensor with the given statistics.
pub fn images_to_tensor(images: &[&Image], stats: &NormStats) -> Result<Tensor, DataError> {
    if images.is_empty() {
        return Ok(Tensor::zeros(&[0, stats.mean.len(), 0, 0]));
    }
    let (c, h, w) = (
        images[0].channels(),
        images[0].height(),
        images[0].width(),
    );
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        for ci in 0..c {
            let base = ci * h * w;
            for &v in &img.pixels()[base..base + h * w] {
                data.push((v - stats.mean[ci]) / stats.std[ci]);
            }
        }
    }
    Ok(Tensor::from_vec(&[images.len(), c, h, w], data)?)
}

/// Reverses [`images_to_tensor`] for one sample row.
pub fn denormalize(data: &[f64], channels: usize, stats: &NormStats) -> Vec<f64> {
    let per = data.len() / channels.max(1);
    let mut out = Vec::with_capacity(data.len());
    for c in 0..channels {
        for &v in &data[c * per..(c + 1) * per] {
            out.push(v * stats.std[c] + stats.mean[c]);
        }
    }
    out
}

/// One training batch: normalized originals, their warped counterparts, and
/// the regression targets of the sampled transformations.
#[derive(Debug, Clone)]
pub struct AetBatch {
    pub originals: Tensor,
    pub transformed: Tensor,
    pub targets: Tensor,
    pub samples: Vec<TransformSample>,
}

/// Draws one transformation per index, warps the raw pixels, then normalizes
/// both image sets with the dataset statistics.
pub fn make_aet_batch<R: Rng>(
    ds: &Dataset,
    indices: &[usize],
    sampler: &XformConfig,
    rng: &mut R,
) -> Result<AetBatch, DataError> {
    let mut originals = Vec::with_capacity(indices.len());
    let mut warped = Vec::with_capacity(indices.len());
    let mut samples = Vec::with_capacity(indices.len());
    let mut target_data = Vec::with_capacity(indices.len() * 8);
    for &idx in indices {
        let img = ds.images.get(idx).ok_or(DataError::IndexOutOfRange {
            index: idx,
            len: ds.len(),
        })?;
        let sample = sampler.sample(rng)?;
        warped.push(warp_image(img, &sample.homography)?);
        target_data.extend_from_slice(&sample.target);
        originals.push(img);
        samples.push(sample);
    }
    let originals = images_to_tensor(&originals, &ds.stats)?;
    let warped_refs: Vec<&Image> = warped.iter().collect();
    let transformed = images_to_tensor(&warped_refs, &ds.stats)?;
    let targets = Tensor::from_vec(&[indices.len(), 8], target_data)?;
    Ok(AetBatch {
        originals,
        transformed,
        targets,
        samples,
    })
}

/// A deterministic shuffled index order for one epoch.
pub fn epoch_permutation<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    // Fisher-Yates, fixed draw order.
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    perm
}
