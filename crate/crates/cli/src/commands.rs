//! Subcommand implementations. Diagnostics go to standard error; results go
//! to files or standard output.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rand::{Rng, SeedableRng};

use aet_core::data::make_aet_batch;
use aet_core::model::ProbeSpec;
use aet_core::traineval::{
    import_metrics, knn_sweep, resume_aet, train_aet, train_probe, Checkpoint, DatasetSpec,
    RunConfig, METRICS_HEADER,
};

use crate::cli_args::{
    ExportPlotsArgs, InspectArgs, KnnArgs, ProbeArgs, SweepArgs, TrainArgs, WarpDemoArgs,
};
use crate::config::load_config;
use crate::imgout::write_image;

/// Resolution order for the output directory: flag, then config file, then
/// `AET_OUT_DIR`, then `./aet-out`.
fn resolve_out_dir(flag: Option<&Path>, cfg_dir: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = cfg_dir {
        return p.to_path_buf();
    }
    if let Ok(root) = std::env::var("AET_OUT_DIR") {
        if !root.is_empty() {
            return PathBuf::from(root);
        }
    }
    PathBuf::from("aet-out")
}

fn load_run_config(config: Option<&Path>, seed: Option<u64>, out: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = load_config(config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let cfg_dir = cfg.out_dir.clone();
    cfg.out_dir = resolve_out_dir(out, config.map(|_| cfg_dir.as_path()));
    Ok(cfg)
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = load_run_config(args.config.as_deref(), args.seed, args.out.as_deref())?;
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
    }
    eprintln!(
        "training: {} epochs, batch {}, seed {}, out {}",
        cfg.epochs,
        cfg.batch_size,
        cfg.seed,
        cfg.out_dir.display()
    );
    let (ckpt, log) = match &args.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)
                .with_context(|| format!("loading resume checkpoint {}", path.display()))?;
            eprintln!(
                "resuming from {} ({} epochs completed)",
                path.display(),
                ckpt.manifest.epochs_completed
            );
            resume_aet(&cfg, &ckpt)?
        }
        None => train_aet(&cfg)?,
    };
    let last = log.rows.last().expect("training logged at least one row");
    eprintln!(
        "done: epoch {} aet_loss {:.6}{}{}",
        last.epoch,
        last.aet_loss,
        last.probe_error
            .map(|e| format!(" probe_error {e:.4}"))
            .unwrap_or_default(),
        last.knn_error
            .map(|e| format!(" knn_error {e:.4}"))
            .unwrap_or_default(),
    );
    println!("checkpoint={}", cfg.out_dir.join("final.ckpt").display());
    println!("metrics={}", cfg.out_dir.join("metrics.csv").display());
    let _ = ckpt;
    Ok(())
}

/// Datasets for evaluation come from the config file when given, otherwise
/// from the checkpoint's own dataset descriptor.
fn eval_datasets(
    ckpt: &Checkpoint,
    config: Option<&Path>,
) -> Result<(aet_core::data::Dataset, aet_core::data::Dataset)> {
    let spec: DatasetSpec = match config {
        Some(path) => load_config(Some(path))?.dataset,
        None => ckpt.manifest.dataset.clone(),
    };
    Ok(spec.load()?)
}

pub fn cmd_probe(args: &ProbeArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let (train_ds, test_ds) = eval_datasets(&ckpt, args.config.as_deref())?;
    let probe_cfg = match args.config.as_deref() {
        Some(path) => load_config(Some(path))?.probe_train,
        None => Default::default(),
    };
    let mut spec: ProbeSpec = args
        .spec
        .parse()
        .map_err(|e: String| anyhow!(e))?;
    spec.classes = train_ds.class_count;
    eprintln!(
        "training {} probe on {} train / {} test images",
        spec.kind_name(),
        train_ds.len(),
        test_ds.len()
    );
    let (_, error) = train_probe(&ckpt, spec, &train_ds, &test_ds, &probe_cfg, args.seed)?;
    println!("probe_error={error}");
    Ok(())
}

pub fn cmd_knn(args: &KnnArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let (train_ds, test_ds) = eval_datasets(&ckpt, args.config.as_deref())?;
    let results = knn_sweep(&ckpt, &train_ds, &test_ds, &[args.k])?;
    println!("knn_error={}", results[0].1);
    Ok(())
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let (train_ds, test_ds) = eval_datasets(&ckpt, args.config.as_deref())?;
    let ks: Vec<usize> = args
        .ks
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| anyhow!("bad K value {s:?}"))
        })
        .collect::<Result<_>>()?;
    let results = knn_sweep(&ckpt, &train_ds, &test_ds, &ks)?;
    for (k, err) in &results {
        println!("k={k} knn_error={err}");
    }
    if let Some(out) = &args.out {
        if let Some(parent) = out.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut text = String::from("k,knn_error\n");
        for (k, err) in &results {
            text.push_str(&format!("{k},{err}\n"));
        }
        std::fs::write(out, text)?;
        eprintln!("wrote {}", out.display());
    }
    Ok(())
}

pub fn cmd_warp_demo(args: &WarpDemoArgs) -> Result<()> {
    let cfg = load_run_config(args.config.as_deref(), args.seed, args.out.as_deref())?;
    let (train_ds, _) = cfg.dataset.load()?;
    if train_ds.is_empty() {
        bail!("dataset is empty");
    }
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let indices: Vec<usize> = (0..args.n)
        .map(|_| rng.gen_range(0..train_ds.len()))
        .collect();
    let batch = make_aet_batch(&train_ds, &indices, &cfg.xform, &mut rng)?;
    let mut sidecar = String::new();
    for (row, &idx) in indices.iter().enumerate() {
        let orig = &train_ds.images[idx];
        let warped = aet_core::warp::warp_image(orig, &batch.samples[row].homography)?;
        let ext = args.format.extension();
        let orig_path = cfg.out_dir.join(format!("pair_{row:03}_orig.{ext}"));
        let warped_path = cfg.out_dir.join(format!("pair_{row:03}_warped.{ext}"));
        write_image(orig, &orig_path, args.format)?;
        write_image(&warped, &warped_path, args.format)?;
        let target = &batch.targets.data()[row * 8..(row + 1) * 8];
        sidecar.push_str(&format!(
            "pair_{row:03} {}\n",
            target
                .iter()
                .map(f64::to_string)
                .collect::<Vec<_>>()
                .join(" ")
        ));
    }
    let sidecar_path = cfg.out_dir.join("transforms.txt");
    std::fs::write(&sidecar_path, sidecar)?;
    eprintln!(
        "wrote {} image pairs and {}",
        args.n,
        sidecar_path.display()
    );
    Ok(())
}

pub fn cmd_export_plots(args: &ExportPlotsArgs) -> Result<()> {
    // Validate numerically first; the series files then copy the CSV fields
    // verbatim.
    import_metrics(&args.metrics)?;
    let text = std::fs::read_to_string(&args.metrics)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != METRICS_HEADER {
        bail!("unexpected metrics header {header:?}");
    }
    std::fs::create_dir_all(&args.out)?;
    let mut loss_series = String::new();
    let mut probe_series = String::new();
    let mut knn_series = String::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        loss_series.push_str(&format!("{} {}\n", f[0], f[1]));
        if !f[3].is_empty() {
            probe_series.push_str(&format!("{} {}\n", f[0], f[3]));
        }
        if !f[4].is_empty() {
            knn_series.push_str(&format!("{} {}\n", f[0], f[4]));
        }
    }
    let mut written = vec![];
    for (name, series) in [
        ("epoch_vs_aet_loss.txt", loss_series),
        ("epoch_vs_probe_error.txt", probe_series),
        ("epoch_vs_knn_error.txt", knn_series),
    ] {
        if !series.is_empty() {
            let path = args.out.join(name);
            std::fs::write(&path, series)?;
            written.push(path);
        }
    }
    if let Some(sweep) = &args.sweep {
        let text = std::fs::read_to_string(sweep)?;
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "k,knn_error")) => {}
            _ => bail!("sweep file must start with the header k,knn_error"),
        }
        let mut series = String::new();
        for (idx, line) in lines {
            if line.is_empty() {
                continue;
            }
            let (k, err) = line
                .split_once(',')
                .ok_or_else(|| anyhow!("sweep line {}: expected k,error", idx + 1))?;
            series.push_str(&format!("{k} {err}\n"));
        }
        let path = args.out.join("k_vs_knn_error.txt");
        std::fs::write(&path, series)?;
        written.push(path);
    }
    for path in written {
        println!("series={}", path.display());
    }
    Ok(())
}

pub fn cmd_inspect(args: &InspectArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    println!("{}", serde_json::to_string_pretty(&ckpt.manifest)?);
    Ok(())
}
