use fusionunet::data::{batch, generate_dataset, SynthSpec};
use fusionunet::model::{build, FusionConfig, FusionUNet};
use fusionunet::ops::NormMode;
use std::time::Instant;

fn main() {
    let mcfg = FusionConfig::desk();
    let model: FusionUNet<f32> = build(&mcfg, 1).unwrap();
    let spec = SynthSpec { seed: 42, ..Default::default() };
    let samples = generate_dataset::<f32>(&spec, 4).unwrap();
    let refs: Vec<_> = samples.iter().collect();
    let (x, _) = batch(&refs).unwrap();

    // warm
    model.forward(&x, NormMode::Eval).unwrap();

    let t = Instant::now();
    let p = model.encode(&x, NormMode::Eval).unwrap();
    println!("encode: {:.3}s", t.elapsed().as_secs_f64());
    let t = Instant::now();
    let f = model.fuse(&p, NormMode::Eval).unwrap();
    println!("fuse:   {:.3}s", t.elapsed().as_secs_f64());
    let t = Instant::now();
    let _y = model.decode(&f, NormMode::Eval).unwrap();
    println!("decode: {:.3}s", t.elapsed().as_secs_f64());
}
