//! Training and evaluation loops, run reports, and the ablation runner.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::NormMode;
use crate::data::{augment, batch, Mask, SegSample, SynthSpec};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::metrics::{dice_metric, iou_metric};
use crate::model::{build, count_flops, save_checkpoint, FusionConfig, FusionUNet};
use crate::optim::{cosine_warm_restart_lr, Optimizer, OptimizerCfg, SchedulerCfg};
use crate::real::Real;
use crate::tensor::Tensor;

/// Training-run hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerCfg,
    /// Cosine warm-restart schedule, stepped per epoch; absent means a
    /// constant learning rate.
    #[serde(default = "default_scheduler")]
    pub scheduler: Option<SchedulerCfg>,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_augment")]
    pub augment: bool,
    #[serde(default)]
    pub checkpoint_path: Option<PathBuf>,
    #[serde(default)]
    pub metrics_path: Option<PathBuf>,
}

fn default_epochs() -> usize {
    30
}
fn default_batch_size() -> usize {
    4
}
fn default_scheduler() -> Option<SchedulerCfg> {
    Some(SchedulerCfg::default())
}
fn default_loss() -> LossKind {
    LossKind::CeDice
}
fn default_augment() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            optimizer: OptimizerCfg::default(),
            scheduler: default_scheduler(),
            loss: default_loss(),
            seed: 0,
            augment: true,
            checkpoint_path: None,
            metrics_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch_size must be positive".into()));
        }
        self.optimizer.validate()?;
        if let Some(s) = &self.scheduler {
            s.validate()?;
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        let base = self.optimizer.base_lr();
        match &self.scheduler {
            Some(s) => cosine_warm_restart_lr(epoch, s.t_0, s.t_mult, base, s.eta_min),
            None => base,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dice: f64,
    pub val_iou: f64,
    pub lr: f64,
}

/// Everything a run produced, serialized as the report JSON. The metric CSV
/// holds the same per-epoch rows; wall-clock lives only here so the CSV and
/// checkpoint stay byte-identical across repeated runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub model_config: FusionConfig,
    pub train_config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    /// Validation metrics of the retained (best-validation) model.
    pub final_dice: f64,
    pub final_iou: f64,
    pub params: usize,
    pub flops: u64,
    pub wall_clock_secs: f64,
}

/// Argmax over the channel dimension of N×K×H×W logits.
pub fn predict_mask<T: Real>(logits: &Tensor<T>) -> Result<Mask> {
    let shape = logits.shape();
    let (n, k, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let data = logits.data();
    let plane = h * w;
    let mut out = vec![0u32; n * plane];
    for bn in 0..n {
        for p in 0..plane {
            let base = bn * k * plane + p;
            let mut best = data[base];
            let mut best_c = 0u32;
            for c in 1..k {
                let v = data[base + c * plane];
                if v > best {
                    best = v;
                    best_c = c as u32;
                }
            }
            out[bn * plane + p] = best_c;
        }
    }
    drop(data);
    Mask::new(out, &[n, h, w])
}

/// Mean per-sample Dice and IoU of argmax predictions, in eval mode.
pub fn evaluate<T: Real>(model: &FusionUNet<T>, samples: &[SegSample<T>]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluate", "empty dataset"));
    }
    let n_classes = model.config.n_classes;
    let mut dice_sum = 0.0;
    let mut iou_sum = 0.0;
    for chunk in samples.chunks(8) {
        let refs: Vec<&SegSample<T>> = chunk.iter().collect();
        let (x, _) = batch(&refs)?;
        let logits = model.forward(&x, NormMode::Eval)?;
        let pred = predict_mask(&logits)?;
        let shape = pred.shape().to_vec();
        let plane = shape[1] * shape[2];
        for (i, sample) in chunk.iter().enumerate() {
            let single =
                Mask::new(pred.data()[i * plane..(i + 1) * plane].to_vec(), &[shape[1], shape[2]])?;
            dice_sum += dice_metric(&single, &sample.mask, n_classes)?;
            iou_sum += iou_metric(&single, &sample.mask, n_classes)?;
        }
    }
    Ok((dice_sum / samples.len() as f64, iou_sum / samples.len() as f64))
}

/// Trains in place. Keeps the epoch with the best validation Dice: those
/// weights are restored into the model, written to `checkpoint_path` when
/// set, and scored as the report's final metrics. Per-epoch rows stream to
/// `metrics_path` as CSV. A non-finite loss aborts with a diagnostic.
pub fn train<T: Real>(
    model: &FusionUNet<T>,
    train_set: &[SegSample<T>],
    val_set: &[SegSample<T>],
    cfg: &TrainConfig,
) -> Result<RunReport> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("train", "empty training or validation set"));
    }
    let started = Instant::now();
    let params = model.parameters();
    let mut optimizer = Optimizer::new(cfg.optimizer, &params)?;

    let mut csv = match &cfg.metrics_path {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path)?);
            writeln!(w, "epoch,train_loss,val_dice,val_iou,lr")?;
            Some(w)
        }
        None => None,
    };

    // Independent derived streams so shuffling and augmentation cannot
    // influence each other.
    let mut rng_shuffle = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e3779b97f4a7c15) ^ 1);
    let mut rng_augment = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e3779b97f4a7c15) ^ 2);

    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best_dice = f64::NEG_INFINITY;
    let mut best_state: Vec<Vec<T>> = Vec::new();

    let mut indices: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        indices.shuffle(&mut rng_shuffle);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in indices.chunks(cfg.batch_size) {
            let samples: Vec<SegSample<T>> = chunk
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        augment(&train_set[i], &mut rng_augment)
                    } else {
                        Ok(train_set[i].clone())
                    }
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&SegSample<T>> = samples.iter().collect();
            let (x, mask) = batch(&refs)?;
            let logits = model.forward(&x, NormMode::Train)?;
            let loss = cfg.loss.compute(&logits, &mask)?;
            let loss_value = loss.item().to_f64();
            if !loss_value.is_finite() {
                return Err(Error::Diverged(format!(
                    "loss became {loss_value} at epoch {epoch} batch {batches}"
                )));
            }
            loss.backward()?;
            optimizer.step(&params, lr)?;
            loss_sum += loss_value;
            batches += 1;
        }
        let train_loss = loss_sum / batches as f64;
        let (val_dice, val_iou) = evaluate(model, val_set)?;
        let record = EpochRecord { epoch, train_loss, val_dice, val_iou, lr };
        if let Some(w) = csv.as_mut() {
            writeln!(w, "{},{},{},{},{}", epoch, train_loss, val_dice, val_iou, lr)?;
            w.flush()?;
        }
        records.push(record);
        if val_dice > best_dice {
            best_dice = val_dice;
            best_state = model.state().iter().map(|(_, t)| t.to_vec()).collect();
        }
    }

    // Restore the best-validation weights before checkpointing and scoring.
    for ((_, tensor), values) in model.state().iter().zip(&best_state) {
        tensor.set_data(values);
    }
    if let Some(path) = &cfg.checkpoint_path {
        save_checkpoint(model, path)?;
    }
    let (final_dice, final_iou) = evaluate(model, val_set)?;

    Ok(RunReport {
        model_config: model.config.clone(),
        train_config: cfg.clone(),
        epochs: records,
        final_dice,
        final_iou,
        params: model.count_params(),
        flops: count_flops(&model.config, 1),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

// ── Ablation ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub seeds: Vec<u64>,
    pub dice: Vec<f64>,
    pub iou: Vec<f64>,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub iou_mean: f64,
    pub iou_std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    /// Fusion-schedule comparison: no fusion, one round each way, both.
    pub fusion_rows: Vec<AblationRow>,
    /// Resampling comparison at fusion_mode = both.
    pub resample_rows: Vec<AblationRow>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// SplitMix64 finalizer; documented seed derivation for ablation arms.
fn mix_seed(master: u64, arm: u64, rep: u64) -> u64 {
    let mut z = master ^ arm.wrapping_mul(0xa076_1d64_78bd_642f) ^ rep.wrapping_mul(0xe703_7ed1_a0b4_28db);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

use crate::fusion::{FusionMode, ResampleMode};

/// Trains every ablation arm over the given seed replicates on one shared
/// synthetic task and reports per-row mean ± std. Row names match the
/// fusion-schedule and resampling comparisons; the `DownFuse + UpFuse` and
/// `Reorganize+Group-Conv` rows are the same configuration, trained once.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation<T: Real>(
    model_cfg: &FusionConfig,
    train_cfg: &TrainConfig,
    data_spec: &SynthSpec,
    n_train: usize,
    n_val: usize,
    n_seeds: usize,
    mut progress: impl FnMut(&str, u64, &RunReport),
) -> Result<AblationTable> {
    let train_set: Vec<SegSample<T>> = crate::data::generate_dataset(data_spec, n_train)?;
    let val_spec = SynthSpec { seed: data_spec.seed.wrapping_add(0x5eed), ..data_spec.clone() };
    let val_set: Vec<SegSample<T>> = crate::data::generate_dataset(&val_spec, n_val)?;

    let fusion_arms: [(&str, FusionMode, ResampleMode); 4] = [
        ("No Fusion", FusionMode::None, ResampleMode::ReorganizeGroupConv),
        ("Only Downward", FusionMode::DownOnly, ResampleMode::ReorganizeGroupConv),
        ("Only Upward Fuse", FusionMode::UpOnly, ResampleMode::ReorganizeGroupConv),
        ("DownFuse + UpFuse", FusionMode::Both, ResampleMode::ReorganizeGroupConv),
    ];
    let resample_arms: [(&str, FusionMode, ResampleMode); 2] = [
        ("Pooling+Conv", FusionMode::Both, ResampleMode::PoolConv),
        ("Reorganize+Group-Conv", FusionMode::Both, ResampleMode::ReorganizeGroupConv),
    ];

    let mut run_arm = |name: &str,
                       arm_idx: u64,
                       fusion_mode: FusionMode,
                       resample_mode: ResampleMode|
     -> Result<AblationRow> {
        let mut dice = Vec::with_capacity(n_seeds);
        let mut iou = Vec::with_capacity(n_seeds);
        let mut seeds = Vec::with_capacity(n_seeds);
        for rep in 0..n_seeds {
            let seed = mix_seed(train_cfg.seed, arm_idx, rep as u64);
            let cfg = FusionConfig { fusion_mode, resample_mode, ..model_cfg.clone() };
            let model: FusionUNet<T> = build(&cfg, seed)?;
            let arm_train = TrainConfig {
                seed,
                checkpoint_path: None,
                metrics_path: None,
                ..train_cfg.clone()
            };
            let report = train(&model, &train_set, &val_set, &arm_train)?;
            progress(name, seed, &report);
            dice.push(report.final_dice);
            iou.push(report.final_iou);
            seeds.push(seed);
        }
        let (dice_mean, dice_std) = mean_std(&dice);
        let (iou_mean, iou_std) = mean_std(&iou);
        Ok(AblationRow { name: name.into(), seeds, dice, iou, dice_mean, dice_std, iou_mean, iou_std })
    };

    let mut fusion_rows = Vec::new();
    for (idx, (name, fm, rm)) in fusion_arms.iter().enumerate() {
        fusion_rows.push(run_arm(name, idx as u64, *fm, *rm)?);
    }
    let mut resample_rows = Vec::new();
    for (name, fm, rm) in &resample_arms {
        if *rm == ResampleMode::ReorganizeGroupConv {
            // Identical configuration to the "DownFuse + UpFuse" arm; the
            // runs are deterministic, so reuse them under this row's name.
            let mut row = fusion_rows[3].clone();
            row.name = (*name).into();
            resample_rows.push(row);
        } else {
            resample_rows.push(run_arm(name, 4, *fm, *rm)?);
        }
    }

    Ok(AblationTable { fusion_rows, resample_rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_dataset;
    use crate::real::Dtype;

    fn tiny_model_cfg() -> FusionConfig {
        FusionConfig {
            base_width: 8,
            input_side: 32,
            precision: Dtype::F64,
            ..Default::default()
        }
    }

    fn tiny_train_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 4,
            seed: 3,
            scheduler: None,
            ..Default::default()
        }
    }

    fn tiny_data(n: usize, seed: u64) -> Vec<SegSample<f64>> {
        let spec = SynthSpec { side: 32, seed, ..Default::default() };
        generate_dataset(&spec, n).unwrap()
    }

    #[test]
    fn predict_mask_argmax() {
        let logits = Tensor::from_vec(
            vec![1.0f64, -1.0, 0.0, 5.0, 0.0, 2.0, 1.0, -3.0],
            &[1, 2, 2, 2],
        )
        .unwrap();
        let m = predict_mask(&logits).unwrap();
        assert_eq!(m.data(), &[0, 1, 1, 0]);
    }

    #[test]
    fn evaluate_perfect_oracle_scores_one() {
        // Degenerate check through the metric path only: identical masks.
        let data = tiny_data(3, 1);
        let n_classes = 2;
        for s in &data {
            let d = dice_metric(&s.mask, &s.mask, n_classes).unwrap();
            assert_eq!(d, 1.0);
        }
    }

    #[test]
    fn evaluate_matches_manual_mean() {
        let model: FusionUNet<f64> = build(&tiny_model_cfg(), 5).unwrap();
        let data = tiny_data(5, 2);
        let (dice, iou) = evaluate(&model, &data).unwrap();
        let mut dice_manual = 0.0;
        let mut iou_manual = 0.0;
        for s in &data {
            let refs = [s];
            let (x, _) = batch(&refs).unwrap();
            let logits = model.forward(&x, NormMode::Eval).unwrap();
            let pred = predict_mask(&logits).unwrap();
            let single = Mask::new(pred.data().to_vec(), &[32, 32]).unwrap();
            dice_manual += dice_metric(&single, &s.mask, 2).unwrap();
            iou_manual += iou_metric(&single, &s.mask, 2).unwrap();
        }
        assert!((dice - dice_manual / 5.0).abs() < 1e-12);
        assert!((iou - iou_manual / 5.0).abs() < 1e-12);
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let run = || {
            let model: FusionUNet<f64> = build(&tiny_model_cfg(), 11).unwrap();
            let train_set = tiny_data(16, 4);
            let val_set = tiny_data(4, 9);
            train(&model, &train_set, &val_set, &tiny_train_cfg(3)).unwrap()
        };
        let a = run();
        let b = run();
        assert!(a.epochs.last().unwrap().train_loss < a.epochs[0].train_loss);
        for (ra, rb) in a.epochs.iter().zip(&b.epochs) {
            assert_eq!(ra.train_loss, rb.train_loss);
            assert_eq!(ra.val_dice, rb.val_dice);
        }
        assert_eq!(a.final_dice, b.final_dice);
    }

    #[test]
    fn seed_mixing_separates_arms() {
        let a = mix_seed(1, 0, 0);
        let b = mix_seed(1, 1, 0);
        let c = mix_seed(1, 0, 1);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_ne!(b, c);
    }
}
