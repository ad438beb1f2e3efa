use fusionunet::data::{batch, generate_dataset, SynthSpec};
use fusionunet::model::{build, FusionConfig, FusionUNet};
use fusionunet::ops::{sum_all, NormMode};
use std::time::Instant;

fn main() {
    let mcfg = FusionConfig::desk();
    let model: FusionUNet<f32> = build(&mcfg, 1).unwrap();
    let spec = SynthSpec { seed: 42, ..Default::default() };
    let samples = generate_dataset::<f32>(&spec, 4).unwrap();
    let refs: Vec<_> = samples.iter().collect();
    let (x, _) = batch(&refs).unwrap();
    let xp = fusionunet::Tensor::param(x.to_vec(), x.shape()).unwrap();

    for _ in 0..2 { // warm
        let p = model.encode(&xp, NormMode::Train).unwrap();
        let s = sum_all(&p.bottleneck).unwrap();
        s.backward().unwrap();
        for t in model.parameters() { t.clear_grad(); }
        xp.clear_grad();
    }
    // encode fwd+bwd
    let t = Instant::now();
    for _ in 0..5 {
        let p = model.encode(&xp, NormMode::Train).unwrap();
        let s = sum_all(&p.bottleneck).unwrap();
        s.backward().unwrap();
        for t in model.parameters() { t.clear_grad(); }
        xp.clear_grad();
    }
    println!("encode fwd+bwd: {:.3}", t.elapsed().as_secs_f64()/5.0);

    // full fwd+bwd via logits sum
    let t = Instant::now();
    for _ in 0..5 {
        let y = model.forward(&xp, NormMode::Train).unwrap();
        let s = sum_all(&y).unwrap();
        s.backward().unwrap();
        for t in model.parameters() { t.clear_grad(); }
        xp.clear_grad();
    }
    println!("full fwd+bwd: {:.3}", t.elapsed().as_secs_f64()/5.0);

    // encode+fuse fwd+bwd
    let t = Instant::now();
    for _ in 0..5 {
        let p = model.encode(&xp, NormMode::Train).unwrap();
        let f = model.fuse(&p, NormMode::Train).unwrap();
        let s = sum_all(&f.levels[0]).unwrap();
        s.backward().unwrap();
        for t in model.parameters() { t.clear_grad(); }
        xp.clear_grad();
    }
    println!("encode+fuse fwd+bwd: {:.3}", t.elapsed().as_secs_f64()/5.0);
}
