use fusionunet::ops::*;
use fusionunet::Tensor;
use std::time::Instant;

fn timeit(name: &str, mut f: impl FnMut()) {
    let t = Instant::now();
    for _ in 0..10 { f(); }
    println!("{name}: {:.4}s", t.elapsed().as_secs_f64() / 10.0);
}

fn main() {
    // Representative big layers at desk scale, batch 4.
    let x = Tensor::param((0..4*16*64*64).map(|i| ((i*37)%1000) as f32 * 0.002 - 1.0).collect(), &[4,16,64,64]).unwrap();
    let w = Tensor::param((0..16*16*9).map(|i| (i as f32 * 0.37).sin() * 0.1).collect(), &[16,16,3,3]).unwrap();
    let b = Tensor::param(vec![0.0f32; 16], &[16]).unwrap();

    timeit("conv fwd 16->16@64^2 b4", || {
        let p = ConvParams::new(w.clone(), Some(b.clone()), 1, 1, 1).unwrap();
        let _ = conv2d(&x, &p).unwrap();
    });
    timeit("conv fwd+bwd", || {
        let p = ConvParams::new(w.clone(), Some(b.clone()), 1, 1, 1).unwrap();
        let y = conv2d(&x, &p).unwrap();
        let s = sum_all(&y).unwrap();
        s.backward().unwrap();
        x.clear_grad(); w.clear_grad(); b.clear_grad();
    });

    let gamma = Tensor::param(vec![1.0f32; 16], &[16]).unwrap();
    let beta = Tensor::param(vec![0.0f32; 16], &[16]).unwrap();
    let rm = Tensor::from_vec(vec![0.0f32; 16], &[16]).unwrap();
    let rv = Tensor::from_vec(vec![1.0f32; 16], &[16]).unwrap();
    timeit("bn fwd train", || {
        let _ = batchnorm2d(&x, &gamma, &beta, &rm, &rv, 0.1, 1e-5, NormMode::Train).unwrap();
    });
    timeit("bn fwd+bwd train", || {
        let y = batchnorm2d(&x, &gamma, &beta, &rm, &rv, 0.1, 1e-5, NormMode::Train).unwrap();
        let s = sum_all(&y).unwrap();
        s.backward().unwrap();
        x.clear_grad(); gamma.clear_grad(); beta.clear_grad();
    });
    timeit("relu fwd+bwd", || {
        let y = relu(&x).unwrap();
        let s = sum_all(&y).unwrap();
        s.backward().unwrap();
        x.clear_grad();
    });
    timeit("maxpool fwd+bwd", || {
        let y = maxpool2d(&x).unwrap();
        let s = sum_all(&y).unwrap();
        s.backward().unwrap();
        x.clear_grad();
    });
    timeit("upsample fwd+bwd", || {
        let y = bilinear_upsample2x(&x).unwrap();
        let s = sum_all(&y).unwrap();
        s.backward().unwrap();
        x.clear_grad();
    });
}
