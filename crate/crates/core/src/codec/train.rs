//! Rate-distortion training: from scratch, then encoder-only fine-tuning.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{ArchConfig, CodecModel, Quantization, RdReport, PAD_MULTIPLE};
use crate::datamodel::RgbImage;
use crate::error::{Error, Result};
use crate::nn::{Adam, Tensor};

/// Step size used by encoder fine-tuning.
pub const FINETUNE_LR: f32 = 2e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecTrainConfig {
    pub arch: ArchConfig,
    pub lambda: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub finetune_lr: f32,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            arch: ArchConfig::default(),
            lambda: 16384.0,
            epochs: 50,
            batch_size: 16,
            lr: 1e-3,
            finetune_lr: FINETUNE_LR,
            seed: 0,
        }
    }
}

/// Epoch-mean training losses.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
    /// Number of times the step size was halved after a non-finite loss.
    pub lr_halvings: usize,
}

/// Pads every image to the codec multiple and checks they share a size.
fn prepare(images: &[&RgbImage]) -> Result<Vec<RgbImage>> {
    let first = images.first().ok_or_else(|| Error::EmptyInput("codec training set".into()))?;
    let (h, w) = (first.height.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE, first.width.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE);
    images
        .iter()
        .map(|img| {
            if (img.height, img.width) != (first.height, first.width) {
                return Err(Error::DimMismatch("codec training images must share one size".into()));
            }
            Ok(if (img.height, img.width) == (h, w) { (*img).clone() } else { img.reflect_pad(h, w) })
        })
        .collect()
}

fn batch(images: &[RgbImage], idx: &[usize]) -> Tensor {
    let refs: Vec<&RgbImage> = idx.iter().map(|&i| &images[i]).collect();
    RgbImage::batch_to_tensor(&refs).expect("prepared images share a size")
}

/// Runs `epochs` of noisy-quantisation training with Adam, restoring the
/// best state and halving the step once if the loss turns non-finite.
fn run_epochs(
    model: &mut CodecModel,
    images: &[RgbImage],
    epochs: usize,
    batch_size: usize,
    lr: f32,
    cosine: bool,
    seed: u64,
) -> Result<TrainLog> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut base_lr = lr;
    let mut opt = Adam::new(lr);
    let mut log = TrainLog::default();
    // The starting state counts as stable until an epoch finishes.
    let mut best = (f64::INFINITY, model.clone());
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut epoch = 0;
    while epoch < epochs {
        if cosine {
            // Cosine decay to 5% of the base step.
            let t = epoch as f32 / epochs as f32;
            opt.lr = base_lr * (0.05 + 0.475 * (1.0 + (std::f32::consts::PI * t).cos()));
        }
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut diverged = false;
        for chunk in order.chunks(batch_size.max(1)) {
            let x = batch(images, chunk);
            model.zero_grad();
            let r = model.rd_pass(&x, Quantization::Noise, &mut rng, true);
            if !r.loss.is_finite() {
                diverged = true;
                break;
            }
            opt.step(model.trainable_params_mut());
            model.project();
            total += r.loss * chunk.len() as f64;
        }
        let mean = total / images.len() as f64;
        if diverged || !mean.is_finite() {
            let stable = best.1.clone();
            if log.lr_halvings > 0 {
                return Err(Error::TrainingDivergence {
                    reason: format!("non-finite loss again in epoch {}", epoch + 1),
                    checkpoint: Box::new(stable),
                });
            }
            log::warn!("codec loss diverged in epoch {}; restoring best state at half step size", epoch + 1);
            *model = stable;
            for p in model.trainable_params_mut() {
                p.reset_slots();
            }
            base_lr *= 0.5;
            opt = Adam::new(opt.lr * 0.5);
            log.lr_halvings += 1;
            continue;
        }
        log::debug!("codec epoch {}/{epochs}: loss {mean:.4}", epoch + 1);
        log.epoch_losses.push(mean);
        if mean <= best.0 {
            best = (mean, model.clone());
        }
        epoch += 1;
    }
    Ok(log)
}

/// Trains a fresh codec on `images` by minimising `bpp + lambda * mse`.
pub fn train_initial(images: &[&RgbImage], config: &CodecTrainConfig) -> Result<(CodecModel, TrainLog)> {
    if config.lambda <= 0.0 || !config.lambda.is_finite() {
        return Err(Error::Config(format!("lambda must be positive, got {}", config.lambda)));
    }
    let prepared = prepare(images)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = CodecModel::new(&mut rng, config.arch, config.lambda);
    let log = run_epochs(&mut model, &prepared, config.epochs, config.batch_size, config.lr, true, config.seed ^ 0x9E37)?;
    Ok((model, log))
}

/// Updates only the analysis and hyper-analysis transforms; the frozen set
/// stays byte-identical.
pub fn finetune_encoder(
    model: &mut CodecModel,
    images: &[&RgbImage],
    epochs: usize,
    config: &CodecTrainConfig,
) -> Result<TrainLog> {
    if !model.is_frozen() {
        return Err(Error::Contract("encoder fine-tuning requires a frozen decoder side".into()));
    }
    if epochs == 0 {
        return Ok(TrainLog::default());
    }
    let prepared = prepare(images)?;
    let seed = config.seed ^ 0xF1_7E ^ (images.len() as u64) << 20;
    let digest = model.frozen_digest();
    let log = run_epochs(model, &prepared, epochs, config.batch_size, config.finetune_lr, false, seed)?;
    debug_assert_eq!(super::checkpoint::frozen_digest(model), digest);
    Ok(log)
}

/// Mean rate-distortion figures with hard rounding (the inference path).
pub fn evaluate_rd(model: &CodecModel, images: &[&RgbImage]) -> Result<RdReport> {
    let prepared = prepare(images)?;
    let mut probe = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut acc = RdReport::default();
    let n = prepared.len() as f64;
    let idx: Vec<usize> = (0..prepared.len()).collect();
    for chunk in idx.chunks(32) {
        let r = probe.rd_pass(&batch(&prepared, chunk), Quantization::Round, &mut rng, false);
        let w = chunk.len() as f64 / n;
        acc.rate_bits += r.rate_bits * w;
        acc.bpp += r.bpp * w;
        acc.distortion += r.distortion * w;
        acc.loss += r.loss * w;
    }
    Ok(acc)
}
