use puppetflow::kernels::{conv2d, conv2d_backward};
use puppetflow::tensor::Tensor;

#[test]
#[ignore]
fn conv_throughput() {
    // dec2d.c4-like layer: 16ch -> 8ch at 64x64, k3
    let x = Tensor::<f32>::from_fn(&[16, 64, 64], |i| (i[2] as f32 * 0.01).sin());
    let w = Tensor::<f32>::from_fn(&[8, 16, 3, 3], |i| (i[3] as f32 - 1.0) * 0.1);
    let b = Tensor::<f32>::zeros(&[8]);
    let macs = 64.0 * 64.0 * 8.0 * 16.0 * 9.0;
    let t0 = std::time::Instant::now();
    let reps = 200;
    let mut sink = 0.0f32;
    for _ in 0..reps {
        let y = conv2d(&x, &w, &b, [1, 1], [1, 1]).unwrap();
        sink += y.data()[0];
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    eprintln!("fwd: {:.3} ms, {:.2} GFLOP/s (sink {sink})", dt * 1e3, 2.0 * macs / dt / 1e9);

    let g = Tensor::<f32>::from_fn(&[8, 64, 64], |i| (i[1] as f32 * 0.02).cos());
    let t0 = std::time::Instant::now();
    let mut sink2 = 0.0f32;
    for _ in 0..reps {
        let (gx, gw, _) = conv2d_backward(&x, &w, &g, [1, 1], [1, 1]).unwrap();
        sink2 += gx.data()[0] + gw.data()[0];
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    eprintln!("bwd: {:.3} ms, {:.2} GFLOP/s (sink {sink2})", dt * 1e3, 2.0 * 2.0 * macs / dt / 1e9);
}
