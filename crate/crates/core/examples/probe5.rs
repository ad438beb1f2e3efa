use fusionunet::data::{batch, generate_dataset, SynthSpec};
use fusionunet::model::{build, FusionConfig, FusionUNet};
use fusionunet::ops::NormMode;
use fusionunet::losses::combined_loss;
use fusionunet::optim::{Optimizer, OptimizerCfg};
use std::time::Instant;

fn main() {
    let mcfg = FusionConfig::desk();
    let model: FusionUNet<f32> = build(&mcfg, 1).unwrap();
    let spec = SynthSpec { seed: 42, ..Default::default() };
    let samples = generate_dataset::<f32>(&spec, 4).unwrap();
    let refs: Vec<_> = samples.iter().collect();
    let (x, mask) = batch(&refs).unwrap();
    let params = model.parameters();
    println!("n param tensors: {}, total {}", params.len(), model.count_params());
    let mut opt = Optimizer::new(OptimizerCfg::default(), &params).unwrap();
    for _ in 0..2 {
        let logits = model.forward(&x, NormMode::Train).unwrap();
        let loss = combined_loss(&logits, &mask).unwrap();
        loss.backward().unwrap();
        opt.step(&params, 1e-3).unwrap();
    }
    let (mut tf, mut tl, mut tb, mut to) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..10 {
        let t = Instant::now();
        let logits = model.forward(&x, NormMode::Train).unwrap();
        tf += t.elapsed().as_secs_f64();
        let t = Instant::now();
        let loss = combined_loss(&logits, &mask).unwrap();
        tl += t.elapsed().as_secs_f64();
        let t = Instant::now();
        loss.backward().unwrap();
        tb += t.elapsed().as_secs_f64();
        let t = Instant::now();
        opt.step(&params, 1e-3).unwrap();
        to += t.elapsed().as_secs_f64();
    }
    println!("fwd {:.3} loss {:.3} bwd {:.3} opt {:.3}", tf/10.0, tl/10.0, tb/10.0, to/10.0);
    // encoder/fuse/decode breakdown in train mode
    let t = Instant::now();
    for _ in 0..5 { let _ = model.encode(&x, NormMode::Train).unwrap(); }
    println!("encode train: {:.3}", t.elapsed().as_secs_f64()/5.0);
    let p = model.encode(&x, NormMode::Train).unwrap();
    let t = Instant::now();
    for _ in 0..5 { let _ = model.fuse(&p, NormMode::Train).unwrap(); }
    println!("fuse train: {:.3}", t.elapsed().as_secs_f64()/5.0);
    let f = model.fuse(&p, NormMode::Train).unwrap();
    let t = Instant::now();
    for _ in 0..5 { let _ = model.decode(&f, NormMode::Train).unwrap(); }
    println!("decode train: {:.3}", t.elapsed().as_secs_f64()/5.0);
}
