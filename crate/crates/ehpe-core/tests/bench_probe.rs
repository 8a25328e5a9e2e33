//! Throughput probe for sizing the default (desk) model configuration.
//! Run explicitly: cargo test -p ehpe-core --test bench_probe -- --ignored --nocapture

use std::time::Instant;

use ehpe_core::autodiff::Tape;
use ehpe_core::tensor::Tensor;

fn randish(n: usize, seed: u64) -> Vec<f64> {
    let mut s = seed;
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect()
}

#[test]
#[ignore]
fn conv_fwd_bwd_throughput() {
    // representative sizes: (cin, h, w, cout, k, stride, pad)
    let cases = [
        (3usize, 64usize, 64usize, 8usize, 3usize, 2usize, 1usize),
        (8, 32, 32, 16, 3, 2, 1),
        (16, 16, 16, 16, 3, 1, 1),
        (16, 16, 16, 32, 3, 2, 1),
        (14, 16, 16, 16, 3, 1, 1),
        (32, 8, 8, 64, 3, 2, 1),
    ];
    for (cin, h, w, cout, k, stride, pad) in cases {
        let x = Tensor::new(vec![cin, h, w], randish(cin * h * w, 1)).unwrap();
        let kt = Tensor::new(vec![cout, cin, k, k], randish(cout * cin * k * k, 2)).unwrap();
        let oh = (h + 2 * pad - k) / stride + 1;
        let macs = (oh * oh * cout * cin * k * k) as f64;
        let reps = (2e8 / macs).max(3.0) as usize;
        let t0 = Instant::now();
        for _ in 0..reps {
            let mut tape = Tape::new();
            let xv = tape.leaf(&x);
            let kv = tape.leaf(&kt);
            let y = tape.conv2d(xv, kv, stride, pad).unwrap();
            let sq = tape.square(y);
            let l = tape.sum_all(sq);
            tape.backward(l).unwrap();
        }
        let dt = t0.elapsed().as_secs_f64();
        // forward + backward is roughly 3x the forward MAC count
        let gmacs = macs * reps as f64 * 3.0 / dt / 1e9;
        println!("conv {cin}x{h}x{w} -> {cout} k{k} s{stride}: {reps} reps in {dt:.3}s = {gmacs:.2} GMAC/s (fwd+bwd)");
    }
}

#[test]
#[ignore]
fn matmul_throughput() {
    for (m, kk, n) in [(64usize, 64usize, 64usize), (256, 126, 16), (21, 64, 64)] {
        let a = Tensor::new(vec![m, kk], randish(m * kk, 3)).unwrap();
        let b = Tensor::new(vec![kk, n], randish(kk * n, 4)).unwrap();
        let macs = (m * kk * n) as f64;
        let reps = (2e8 / macs).max(3.0) as usize;
        let t0 = Instant::now();
        for _ in 0..reps {
            let mut tape = Tape::new();
            let av = tape.leaf(&a);
            let bv = tape.leaf(&b);
            let y = tape.matmul(av, bv).unwrap();
            let sq = tape.square(y);
            let l = tape.sum_all(sq);
            tape.backward(l).unwrap();
        }
        let dt = t0.elapsed().as_secs_f64();
        let gmacs = macs * reps as f64 * 3.0 / dt / 1e9;
        println!("matmul {m}x{kk}x{n}: {reps} reps in {dt:.3}s = {gmacs:.2} GMAC/s (fwd+bwd)");
    }
}
