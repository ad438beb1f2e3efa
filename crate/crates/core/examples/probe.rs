use fusionunet::data::{generate_dataset, SynthSpec};
use fusionunet::model::{build, FusionConfig, FusionUNet};
use fusionunet::train::{train, TrainConfig};
use std::time::Instant;

fn main() {
    let mcfg = FusionConfig::desk(); // C=16, S=64, f32
    let model: FusionUNet<f32> = build(&mcfg, 1).unwrap();
    let spec = SynthSpec { seed: 42, ..Default::default() };
    let train_set = generate_dataset::<f32>(&spec, 200).unwrap();
    let val_spec = SynthSpec { seed: 43, ..Default::default() };
    let val_set = generate_dataset::<f32>(&val_spec, 50).unwrap();
    let tcfg = TrainConfig { epochs: 2, seed: 5, ..Default::default() };
    let t = Instant::now();
    let report = train(&model, &train_set, &val_set, &tcfg).unwrap();
    let dt = t.elapsed().as_secs_f64();
    println!("2 epochs in {:.1}s ({:.1}s/epoch)", dt, dt / 2.0);
    for r in &report.epochs {
        println!("epoch {} loss {:.4} dice {:.4} iou {:.4} lr {:.6}", r.epoch, r.train_loss, r.val_dice, r.val_iou, r.lr);
    }
}
