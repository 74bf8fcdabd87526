// Temporary: per-op timing inside a forward pass shape set.
use std::time::Instant;
use aet_core::nn::{Graph, Mode, ParamSet, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 64; // pair batch
    // block1 lead conv shapes
    let x1 = Tensor::uniform(&[n, 3, 32, 32], 1.0, &mut rng);
    let w1 = Tensor::uniform(&[16, 3, 3, 3], 0.3, &mut rng);
    let b1 = Tensor::zeros(&[16]);
    // block1 1x1
    let x2 = Tensor::uniform(&[n, 16, 32, 32], 1.0, &mut rng);
    let w2 = Tensor::uniform(&[16, 16, 1, 1], 0.3, &mut rng);
    // block2 lead
    let x3 = Tensor::uniform(&[n, 16, 16, 16], 1.0, &mut rng);
    let w3 = Tensor::uniform(&[24, 16, 3, 3], 0.3, &mut rng);
    let b3 = Tensor::zeros(&[24]);

    let reps = 20;
    let time_conv = |x: &Tensor, w: &Tensor, b: &Tensor, label: &str| {
        let t0 = Instant::now();
        for _ in 0..reps {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone()).unwrap();
            let wv = g.leaf(w.clone()).unwrap();
            let bv = g.leaf(b.clone()).unwrap();
            let _ = g.conv2d(xv, wv, bv, 1, w.shape()[2] / 2).unwrap();
        }
        let ms = t0.elapsed().as_secs_f64() * 1e3 / reps as f64;
        let macs = (n * w.shape()[0] * w.shape()[1] * w.shape()[2] * w.shape()[3]
            * x.shape()[2] * x.shape()[3]) as f64;
        println!("{label}: {:.2} ms  ({:.2} GFLOP/s)", ms, 2.0 * macs / ms * 1e-6 / 1e3);
    };
    time_conv(&x1, &w1, &b1, "conv 3x3  3->16 @32");
    time_conv(&x2, &w2, &Tensor::zeros(&[16]), "conv 1x1 16->16 @32");
    time_conv(&x3, &w3, &b3, "conv 3x3 16->24 @16");

    // batch norm timing
    let gamma = Tensor::filled(&[16], 1.0);
    let beta = Tensor::zeros(&[16]);
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new();
        let xv = g.leaf(x2.clone()).unwrap();
        let gv = g.leaf(gamma.clone()).unwrap();
        let bv = g.leaf(beta.clone()).unwrap();
        let mut rm = Tensor::zeros(&[16]);
        let mut rvr = Tensor::filled(&[16], 1.0);
        let _ = g.batch_norm(xv, gv, bv, &mut rm, &mut rvr, Mode::Train).unwrap();
    }
    println!("bn 16ch @32: {:.2} ms", t0.elapsed().as_secs_f64() * 1e3 / reps as f64);

    // relu
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new();
        let xv = g.leaf(x2.clone()).unwrap();
        let _ = g.relu(xv).unwrap();
    }
    println!("relu @32: {:.2} ms", t0.elapsed().as_secs_f64() * 1e3 / reps as f64);

    // plain leaf: measures clone + finite scan + graph push
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new();
        let _ = g.leaf(x2.clone()).unwrap();
    }
    println!("leaf @32 (clone+scan): {:.2} ms", t0.elapsed().as_secs_f64() * 1e3 / reps as f64);
    let _ = ParamSet::new();
}
