//! Rough per-component timing of one training step at the desk-scale
//! configuration. Run with `cargo run --example bench_step`.

use std::time::Instant;

use aet_core::data::{gen_synthetic, make_aet_batch, SyntheticConfig};
use aet_core::model::{AetModel, NinConfig};
use aet_core::nn::{sgd_step, Graph, Mode, SgdConfig};
use aet_core::xform::XformConfig;

fn main() {
    let ds = gen_synthetic(&SyntheticConfig::new(32, 40, 1));
    let nin = NinConfig::tiny(3, 32, [16, 24]);
    let mut model = AetModel::new(&nin, 0, true).unwrap();
    let xform = XformConfig::projective_default();
    let sgd = SgdConfig {
        drop_epochs: vec![],
        ..SgdConfig::default()
    };
    let mut rng = rand::SeedableRng::seed_from_u64(0);
    let rng: &mut rand_chacha::ChaCha8Rng = &mut rng;
    let indices: Vec<usize> = (0..32).collect();

    let reps = 10;
    let t0 = Instant::now();
    let mut batches = vec![];
    for _ in 0..reps {
        batches.push(make_aet_batch(&ds, &indices, &xform, rng).unwrap());
    }
    let t_batch = t0.elapsed().as_secs_f64() / reps as f64;

    let t0 = Instant::now();
    let mut graphs = vec![];
    for b in &batches {
        let mut g = Graph::new();
        let pred = model
            .forward(&mut g, &b.originals, &b.transformed, Mode::Train)
            .unwrap();
        let target = g.leaf(b.targets.clone()).unwrap();
        let loss = g.regression_loss(pred, target).unwrap();
        graphs.push((g, loss));
    }
    let t_fwd = t0.elapsed().as_secs_f64() / reps as f64;

    let t0 = Instant::now();
    for (g, loss) in &mut graphs {
        g.backward(*loss).unwrap();
    }
    let t_bwd = t0.elapsed().as_secs_f64() / reps as f64;

    let t0 = Instant::now();
    for (g, _) in &graphs {
        g.collect_grads(&mut model.params).unwrap();
        sgd_step(&mut model.params, &sgd, 0.01).unwrap();
    }
    let t_opt = t0.elapsed().as_secs_f64() / reps as f64;

    println!("batch prep: {:.1} ms", t_batch * 1e3);
    println!("forward:    {:.1} ms", t_fwd * 1e3);
    println!("backward:   {:.1} ms", t_bwd * 1e3);
    println!("optimizer:  {:.1} ms", t_opt * 1e3);
    let per_step = t_batch + t_fwd + t_bwd + t_opt;
    println!(
        "step total: {:.1} ms -> {:.1} s per 50-batch epoch",
        per_step * 1e3,
        per_step * 50.0
    );
}
