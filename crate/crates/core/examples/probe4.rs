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
    let mut opt = Optimizer::new(OptimizerCfg::default(), &params).unwrap();

    // Warm up
    for _ in 0..2 {
        let logits = model.forward(&x, NormMode::Train).unwrap();
        let loss = combined_loss(&logits, &mask).unwrap();
        loss.backward().unwrap();
        opt.step(&params, 1e-3).unwrap();
    }
    let t = Instant::now();
    let steps = 10;
    for _ in 0..steps {
        let logits = model.forward(&x, NormMode::Train).unwrap();
        let loss = combined_loss(&logits, &mask).unwrap();
        loss.backward().unwrap();
        opt.step(&params, 1e-3).unwrap();
    }
    let dt = t.elapsed().as_secs_f64() / steps as f64;
    println!("train step (batch 4): {:.3}s -> epoch(200 samples) ~{:.1}s -> 30 epochs ~{:.1} min", dt, dt * 50.0, dt * 50.0 * 30.0 / 60.0);
}
