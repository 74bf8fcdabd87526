//! The run-config file: a flat `section.key=value` text format with `#`
//! comments. Values override the built-in desk-scale defaults; command-line
//! flags override file values.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};

use aet_core::data::{ShapeKind, SyntheticConfig};
use aet_core::model::ProbeSpec;
use aet_core::traineval::{desk_run_config, DatasetSpec, RunConfig};
use aet_core::xform::{AffineFactor, Family, Range};

/// The built-in defaults every configuration starts from.
pub fn default_config(out_dir: &Path) -> RunConfig {
    desk_run_config(7, out_dir)
}

/// Loads a config file over the defaults; `path = None` gives the defaults.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = default_config(Path::new("aet-out"));
    if let Some(path) = path {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        apply_config_text(&mut cfg, &text)
            .with_context(|| format!("in config file {}", path.display()))?;
    }
    Ok(cfg)
}

pub fn apply_config_text(cfg: &mut RunConfig, text: &str) -> Result<()> {
    // Dataset keys may arrive in any order; collect them and rebuild the
    // spec once at the end.
    let mut dataset = DatasetSettings::from_spec(&cfg.dataset);
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected key=value, got {line:?}", lineno + 1))?;
        apply_pair(cfg, &mut dataset, key.trim(), value.trim())
            .with_context(|| format!("line {}: {line:?}", lineno + 1))?;
    }
    cfg.dataset = dataset.into_spec()?;
    Ok(())
}

struct DatasetSettings {
    kind: String,
    dir: PathBuf,
    image_size: usize,
    channels: usize,
    train_per_class: usize,
    test_per_class: usize,
    seed: u64,
    noise: f64,
    shapes: Vec<ShapeKind>,
}

impl DatasetSettings {
    fn from_spec(spec: &DatasetSpec) -> Self {
        match spec {
            DatasetSpec::Synthetic {
                train,
                test_per_class,
                ..
            } => Self {
                kind: "synthetic".into(),
                dir: PathBuf::from("."),
                image_size: train.image_size,
                channels: train.channels,
                train_per_class: train.n_per_class,
                test_per_class: *test_per_class,
                seed: train.seed,
                noise: train.noise,
                shapes: train.shapes.clone(),
            },
            DatasetSpec::Cifar10 { dir } => Self {
                kind: "cifar10".into(),
                dir: dir.clone(),
                image_size: 32,
                channels: 3,
                train_per_class: 0,
                test_per_class: 0,
                seed: 0,
                noise: 0.0,
                shapes: vec![],
            },
        }
    }

    fn into_spec(self) -> Result<DatasetSpec> {
        match self.kind.as_str() {
            "synthetic" => Ok(DatasetSpec::synthetic(
                SyntheticConfig {
                    shapes: self.shapes,
                    image_size: self.image_size,
                    channels: self.channels,
                    n_per_class: self.train_per_class,
                    seed: self.seed,
                    noise: self.noise,
                },
                self.test_per_class,
            )),
            "cifar10" => Ok(DatasetSpec::Cifar10 { dir: self.dir }),
            other => bail!("unknown dataset.kind {other:?} (synthetic or cifar10)"),
        }
    }
}

fn parse_list<T: std::str::FromStr>(value: &str, what: &str) -> Result<Vec<T>> {
    if value.is_empty() {
        return Ok(vec![]);
    }
    value
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<T>()
                .map_err(|_| anyhow!("bad {what} entry {v:?}"))
        })
        .collect()
}

fn parse_shape(s: &str) -> Result<ShapeKind> {
    Ok(match s {
        "square" => ShapeKind::Square,
        "disk" => ShapeKind::Disk,
        "triangle" => ShapeKind::Triangle,
        "cross" => ShapeKind::Cross,
        "half_disk" => ShapeKind::HalfDisk,
        "ell" => ShapeKind::Ell,
        "tee" => ShapeKind::Tee,
        other => bail!("unknown shape {other:?}"),
    })
}

fn parse_factor(s: &str) -> Result<AffineFactor> {
    Ok(match s {
        "translate" => AffineFactor::Translate,
        "rotate" => AffineFactor::Rotate,
        "shear" => AffineFactor::Shear,
        "scale" => AffineFactor::Scale,
        other => bail!("unknown affine factor {other:?}"),
    })
}

fn set_range(range: &mut Range, lo: Option<f64>, hi: Option<f64>) -> Result<()> {
    let lo = lo.unwrap_or(range.lo);
    let hi = hi.unwrap_or(range.hi);
    if lo > hi {
        bail!("range low {lo} exceeds high {hi}");
    }
    *range = Range { lo, hi };
    Ok(())
}

fn apply_pair(
    cfg: &mut RunConfig,
    dataset: &mut DatasetSettings,
    key: &str,
    value: &str,
) -> Result<()> {
    let num = |v: &str| -> Result<f64> { v.parse().map_err(|_| anyhow!("bad number {v:?}")) };
    let int = |v: &str| -> Result<usize> { v.parse().map_err(|_| anyhow!("bad integer {v:?}")) };
    match key {
        "dataset.kind" => dataset.kind = value.to_string(),
        "dataset.dir" => dataset.dir = PathBuf::from(value),
        "dataset.image_size" => dataset.image_size = int(value)?,
        "dataset.channels" => dataset.channels = int(value)?,
        "dataset.train_per_class" => dataset.train_per_class = int(value)?,
        "dataset.test_per_class" => dataset.test_per_class = int(value)?,
        "dataset.seed" => dataset.seed = value.parse()?,
        "dataset.noise" => dataset.noise = num(value)?,
        "dataset.shapes" => {
            dataset.shapes = value
                .split(',')
                .map(|s| parse_shape(s.trim()))
                .collect::<Result<_>>()?
        }

        "xform.family" => {
            cfg.xform.family = match value {
                "affine" => Family::Affine,
                "projective" => Family::Projective,
                other => bail!("unknown xform.family {other:?}"),
            }
        }
        "xform.rotation_lo" => set_range(&mut cfg.xform.affine.rotation_deg, Some(num(value)?), None)?,
        "xform.rotation_hi" => set_range(&mut cfg.xform.affine.rotation_deg, None, Some(num(value)?))?,
        "xform.translate_lo" => set_range(&mut cfg.xform.affine.translate, Some(num(value)?), None)?,
        "xform.translate_hi" => set_range(&mut cfg.xform.affine.translate, None, Some(num(value)?))?,
        "xform.scale_lo" => set_range(&mut cfg.xform.affine.scale, Some(num(value)?), None)?,
        "xform.scale_hi" => set_range(&mut cfg.xform.affine.scale, None, Some(num(value)?))?,
        "xform.shear_lo" => set_range(&mut cfg.xform.affine.shear_deg, Some(num(value)?), None)?,
        "xform.shear_hi" => set_range(&mut cfg.xform.affine.shear_deg, None, Some(num(value)?))?,
        "xform.pre_scale_lo" => set_range(&mut cfg.xform.projective.pre_scale, Some(num(value)?), None)?,
        "xform.pre_scale_hi" => set_range(&mut cfg.xform.projective.pre_scale, None, Some(num(value)?))?,
        "xform.corner_shift_lo" => {
            set_range(&mut cfg.xform.projective.corner_shift, Some(num(value)?), None)?
        }
        "xform.corner_shift_hi" => {
            set_range(&mut cfg.xform.projective.corner_shift, None, Some(num(value)?))?
        }
        "xform.pre_rotations" => {
            let degs: Vec<usize> = parse_list(value, "pre-rotation")?;
            let mut quarters = [false; 4];
            for d in degs {
                match d {
                    0 => quarters[0] = true,
                    90 => quarters[1] = true,
                    180 => quarters[2] = true,
                    270 => quarters[3] = true,
                    other => bail!("pre-rotation must be 0/90/180/270, got {other}"),
                }
            }
            if quarters.iter().all(|q| !q) {
                bail!("xform.pre_rotations must enable at least one angle");
            }
            cfg.xform.projective.pre_rotation_quarters = quarters;
        }
        "xform.affine_order" => {
            let factors = value
                .split(',')
                .map(|s| parse_factor(s.trim()))
                .collect::<Result<Vec<_>>>()?;
            let order: [AffineFactor; 4] = factors
                .try_into()
                .map_err(|_| anyhow!("affine order must list exactly 4 factors"))?;
            cfg.xform.affine_order = order;
        }

        "nin.blocks" => cfg.nin.num_blocks = int(value)?,
        "nin.convs_per_block" => cfg.nin.convs_per_block = int(value)?,
        "nin.widths" => cfg.nin.widths = parse_list(value, "width")?,
        "nin.kernels" => cfg.nin.lead_kernels = parse_list(value, "kernel")?,
        "nin.downsample_after" => cfg.nin.downsample_after = parse_list(value, "block index")?,
        "nin.in_channels" => cfg.nin.in_channels = int(value)?,
        "nin.input_size" => cfg.nin.input_size = int(value)?,

        "sgd.lr" => cfg.sgd.base_lr = num(value)?,
        "sgd.momentum" => cfg.sgd.momentum = num(value)?,
        "sgd.weight_decay" => cfg.sgd.weight_decay = num(value)?,
        "sgd.drop_factor" => cfg.sgd.drop_factor = num(value)?,
        "sgd.drop_epochs" => cfg.sgd.drop_epochs = parse_list(value, "epoch")?,

        "train.epochs" => cfg.epochs = int(value)?,
        "train.batch_size" => cfg.batch_size = int(value)?,
        "train.eval_every" => cfg.eval_every = int(value)?,
        "train.eval_probe" => {
            cfg.eval_probe = match value {
                "none" => None,
                spec => Some(spec.parse::<ProbeSpec>().map_err(|e| anyhow!(e))?),
            }
        }
        "train.eval_knn_k" => {
            cfg.eval_knn_k = match value {
                "none" | "0" => None,
                k => Some(int(k)?),
            }
        }
        "train.bn_decay" => cfg.bn_decay = value.parse()?,
        "train.seed" => cfg.seed = value.parse()?,
        "train.out_dir" => cfg.out_dir = PathBuf::from(value),

        "probe.epochs" => cfg.probe_train.epochs = int(value)?,
        "probe.batch_size" => cfg.probe_train.batch_size = int(value)?,
        "probe.lr" => cfg.probe_train.sgd.base_lr = num(value)?,
        "probe.momentum" => cfg.probe_train.sgd.momentum = num(value)?,
        "probe.weight_decay" => cfg.probe_train.sgd.weight_decay = num(value)?,
        "probe.drop_factor" => cfg.probe_train.sgd.drop_factor = num(value)?,
        "probe.drop_epochs" => cfg.probe_train.sgd.drop_epochs = parse_list(value, "epoch")?,

        other => bail!("unknown config key {other:?}"),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_load_without_a_file() {
        let cfg = load_config(None).unwrap();
        assert_eq!(cfg.epochs, 40);
        cfg.validate().unwrap();
    }

    #[test]
    fn keys_override_defaults() {
        let mut cfg = default_config(Path::new("o"));
        apply_config_text(
            &mut cfg,
            "# comment\n\
             train.epochs=3\n\
             nin.widths=4,6\n\
             nin.blocks=2\n\
             nin.kernels=3,3\n\
             nin.downsample_after=1\n\
             xform.family=affine\n\
             dataset.train_per_class=5\n",
        )
        .unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.nin.widths, vec![4, 6]);
        assert_eq!(cfg.xform.family, Family::Affine);
        match &cfg.dataset {
            DatasetSpec::Synthetic { train, .. } => assert_eq!(train.n_per_class, 5),
            other => panic!("unexpected dataset {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = default_config(Path::new("o"));
        let err = apply_config_text(&mut cfg, "train.epoch=3\n").unwrap_err();
        assert!(format!("{err:#}").contains("unknown config key"));
    }

    #[test]
    fn malformed_lines_name_the_line() {
        let mut cfg = default_config(Path::new("o"));
        let err = apply_config_text(&mut cfg, "train.epochs=1\nnonsense\n").unwrap_err();
        assert!(format!("{err:#}").contains("line 2"));
    }
}
