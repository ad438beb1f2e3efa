use fusionunet::data::{batch, generate_dataset, SynthSpec};
use fusionunet::model::{build, FusionConfig, FusionUNet};
use fusionunet::ops::NormMode;
use fusionunet::losses::combined_loss;
use std::time::Instant;

fn main() {
    let mcfg = FusionConfig::desk();
    let model: FusionUNet<f32> = build(&mcfg, 1).unwrap();
    let spec = SynthSpec { seed: 42, ..Default::default() };
    let samples = generate_dataset::<f32>(&spec, 4).unwrap();
    let refs: Vec<_> = samples.iter().collect();
    let (x, mask) = batch(&refs).unwrap();

    let t = Instant::now();
    let logits = model.forward(&x, NormMode::Train).unwrap();
    println!("forward (batch 4): {:.3}s", t.elapsed().as_secs_f64());

    let t = Instant::now();
    let loss = combined_loss(&logits, &mask).unwrap();
    loss.backward().unwrap();
    println!("loss+backward: {:.3}s", t.elapsed().as_secs_f64());

    let t = Instant::now();
    let logits2 = model.forward(&x, NormMode::Eval).unwrap();
    println!("forward eval: {:.3}s  ({:?})", t.elapsed().as_secs_f64(), logits2.shape());
}
