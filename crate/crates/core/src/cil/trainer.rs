//! Incremental classifier training with replayed exemplars.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::classifier::{BackboneConfig, ClassifierModel};
use crate::buffer::{build_record, exemplar_cost_bits, herding_select, l2_normalize, ExemplarStore, MemoryBudget};
use crate::cam::{localize, CompressionMode, DEFAULT_THRESHOLD};
use crate::codec::{self, CodecModel, CodecTrainConfig};
use crate::datamodel::{BudgetMode, LabeledImage, ProtocolConfig, RgbImage, TaskSequence};
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, distillation, Module, Sgd, Tensor};

pub const DISTILL_TEMPERATURE: f32 = 2.0;
const CROP_PAD: usize = 4;
const EVAL_BATCH: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub initial_epochs: usize,
    pub incremental_epochs: usize,
    pub base_lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Epochs (0-based) at whose start the step size is multiplied by `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f32,
    pub batch_size: usize,
    /// `None` weighs distillation by old / total classes.
    pub distill_weight: Option<f32>,
    pub augment: bool,
    pub backbone: BackboneConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Desk-scale settings.
    fn default() -> Self {
        Self {
            initial_epochs: 30,
            incremental_epochs: 20,
            base_lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay_epochs: vec![15, 25],
            lr_decay_factor: 0.1,
            batch_size: 64,
            distill_weight: None,
            augment: true,
            backbone: BackboneConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.initial_epochs == 0 || self.incremental_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return Err(Error::Config(format!("lr_decay_factor must lie in (0, 1), got {}", self.lr_decay_factor)));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if self.distill_weight.is_some_and(|w| !(w >= 0.0)) {
            return Err(Error::Config("distill_weight must be non-negative".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f32 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.base_lr * self.lr_decay_factor.powi(decays as i32)
    }
}

/// Codec settings for an incremental run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecRunConfig {
    pub train: CodecTrainConfig,
    pub finetune_epochs: usize,
    pub cam_threshold: f32,
}

impl Default for CodecRunConfig {
    fn default() -> Self {
        Self { train: CodecTrainConfig::default(), finetune_epochs: 2, cam_threshold: DEFAULT_THRESHOLD }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseResult {
    pub phase: usize,
    pub classes_seen: usize,
    pub top1: f64,
    pub exemplar_count: usize,
    pub mean_record_bpp: f64,
    pub buffer_bits: u64,
    pub budget_bits: u64,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Wall-clock time of the phase, excluding codec preparation.
    pub wall_seconds: f64,
}

/// Outcome of [`run_incremental`].
#[derive(Clone, Debug)]
pub struct IncrementalRun {
    pub results: Vec<PhaseResult>,
    pub store: ExemplarStore,
    pub model: ClassifierModel,
}

/// Pads by [`CROP_PAD`] with zeros, crops back at a random offset and
/// optionally mirrors.
fn augment(img: &RgbImage, rng: &mut ChaCha8Rng, out: &mut Vec<f32>) {
    let (h, w) = (img.height, img.width);
    let dy = rng.gen_range(0..=2 * CROP_PAD) as isize - CROP_PAD as isize;
    let dx = rng.gen_range(0..=2 * CROP_PAD) as isize - CROP_PAD as isize;
    let flip = rng.gen_bool(0.5);
    for y in 0..h {
        for x in 0..w {
            let sy = y as isize + dy;
            let sx = if flip { (w - 1 - x) as isize } else { x as isize } + dx;
            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                out.extend_from_slice(&[0.0; 3]);
            } else {
                out.extend(img.get(sy as usize, sx as usize).map(|v| v as f32 / 255.0));
            }
        }
    }
}

/// Trains on new data plus replay. Labels are head indices; `current` lists
/// the head indices of this phase's classes. Returns per-epoch mean losses.
pub fn train_phase(
    model: &mut ClassifierModel,
    old: Option<&ClassifierModel>,
    new_data: &[(&RgbImage, usize)],
    replay: &[(&RgbImage, usize)],
    current: &[usize],
    epochs: usize,
    config: &TrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    config.validate()?;
    if let Some(&(_, l)) = replay.iter().find(|(_, l)| current.contains(l)) {
        return Err(Error::Contract(format!("replay holds head class {l} of the current phase")));
    }
    let classes = model.num_classes();
    let data: Vec<(&RgbImage, usize)> = new_data.iter().chain(replay).copied().collect();
    if data.is_empty() {
        return Err(Error::EmptyInput("phase training set".into()));
    }
    if let Some(&(_, l)) = data.iter().find(|(_, l)| *l >= classes) {
        return Err(Error::Contract(format!("label {l} outside a head of {classes} classes")));
    }
    let (h, w) = (data[0].0.height, data[0].0.width);
    if data.iter().any(|(img, _)| (img.height, img.width) != (h, w)) {
        return Err(Error::DimMismatch("phase images must share one size".into()));
    }
    let old_classes = old.map_or(0, |o| o.num_classes());
    let kd_weight = match old {
        Some(_) => config.distill_weight.unwrap_or(old_classes as f32 / classes as f32),
        None => 0.0,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Sgd::new(config.base_lr, config.momentum, config.weight_decay);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        opt.lr = config.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for chunk in order.chunks(config.batch_size) {
            let mut buf = Vec::with_capacity(chunk.len() * h * w * 3);
            for &i in chunk {
                if config.augment {
                    augment(data[i].0, &mut rng, &mut buf);
                } else {
                    buf.extend(data[i].0.data.iter().map(|&v| v as f32 / 255.0));
                }
            }
            let x = Tensor::from_vec(chunk.len(), h, w, 3, buf);
            let labels: Vec<usize> = chunk.iter().map(|&i| data[i].1).collect();
            model.zero_grad();
            let (logits, tape) = model.forward_train(&x);
            let (mut loss, mut grad) = cross_entropy(&logits, &labels);
            if kd_weight > 0.0 {
                let old_logits = old.expect("weight implies an old model").infer(&x).logits;
                let (kd, kd_grad) = distillation(&logits, &old_logits, DISTILL_TEMPERATURE);
                loss += kd_weight * kd;
                grad.data.iter_mut().zip(&kd_grad.data).for_each(|(g, k)| *g += kd_weight * k);
            }
            if !loss.is_finite() {
                return Err(Error::Contract(format!("classifier loss became non-finite in epoch {}", epoch + 1)));
            }
            model.backward(tape, &grad);
            opt.step(model.params_mut());
            total += loss as f64 * chunk.len() as f64;
        }
        let mean = total / data.len() as f64;
        log::debug!("classifier epoch {}/{epochs}: loss {mean:.4}", epoch + 1);
        losses.push(mean);
    }
    Ok(losses)
}

fn batched(images: &[&RgbImage], mut f: impl FnMut(&Tensor)) -> Result<()> {
    for chunk in images.chunks(EVAL_BATCH) {
        f(&RgbImage::batch_to_tensor(chunk)?);
    }
    Ok(())
}

/// Top-1 accuracy over samples whose label is a head index below the head size.
pub fn evaluate(model: &ClassifierModel, samples: &[(&RgbImage, usize)]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("evaluation pool has no seen-class samples".into()));
    }
    let images: Vec<&RgbImage> = samples.iter().map(|s| s.0).collect();
    let mut preds = Vec::with_capacity(samples.len());
    batched(&images, |x| {
        let logits = model.infer(x).logits;
        for row in logits.data.chunks_exact(logits.c) {
            // First maximum wins.
            let best = row.iter().enumerate().fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            preds.push(best);
        }
    })?;
    let correct = preds.iter().zip(samples).filter(|(p, s)| **p == s.1).count();
    Ok(correct as f64 / samples.len() as f64)
}

/// Pooled penultimate features, one row per image.
pub fn features(model: &ClassifierModel, images: &[&RgbImage]) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(images.len());
    batched(images, |x| {
        let f = model.infer(x).features;
        out.extend(f.data.chunks_exact(f.c).map(<[f32]>::to_vec));
    })?;
    Ok(out)
}

/// `(avg, last)` of per-phase top-1 accuracies, rounded to 12 decimals so
/// that summation noise does not leak into reports.
pub fn summarize_top1(top1: &[f64]) -> Result<(f64, f64)> {
    let last = *top1.last().ok_or_else(|| Error::EmptyInput("no phase results to summarise".into()))?;
    let round = |v: f64| (v * 1e12).round() / 1e12;
    Ok((round(top1.iter().sum::<f64>() / top1.len() as f64), last))
}

pub fn summarize(results: &[PhaseResult]) -> Result<(f64, f64)> {
    summarize_top1(&results.iter().map(|r| r.top1).collect::<Vec<_>>())
}

/// One codec per phase: trained and frozen on phase 0's images, then
/// encoder-fine-tuned on each later phase's images. Codec training never
/// looks at the classifier, so the snapshots can be prepared up front and
/// shared between runs over the same sequence.
pub fn prepare_codecs(sequence: &TaskSequence, config: &CodecRunConfig) -> Result<Vec<CodecModel>> {
    let mut out: Vec<CodecModel> = Vec::with_capacity(sequence.len());
    for (phase, task) in sequence.tasks.iter().enumerate() {
        let images: Vec<&RgbImage> = task.samples.iter().map(|s| &s.image).collect();
        let model = if phase == 0 {
            let (mut m, _) = codec::train_initial(&images, &config.train).map_err(|e| e.in_phase(0))?;
            m.freeze_decoder_side();
            m
        } else {
            let mut m = out[phase - 1].clone();
            let cfg = CodecTrainConfig { seed: config.train.seed.wrapping_add(phase as u64), ..config.train.clone() };
            codec::finetune_encoder(&mut m, &images, config.finetune_epochs, &cfg).map_err(|e| e.in_phase(phase))?;
            m
        };
        out.push(model);
    }
    Ok(out)
}

fn phase_budget(protocol: &ProtocolConfig, classes_seen: usize) -> MemoryBudget {
    let raw = protocol.raw_reference_bits();
    match protocol.budget_mode {
        BudgetMode::FixedTotal => MemoryBudget::fixed(protocol.budget_images, raw),
        BudgetMode::PerClassGrowing => MemoryBudget::growing(protocol.budget_images, classes_seen, raw),
    }
}

/// Runs every phase, training codecs as needed.
pub fn run_incremental(
    sequence: &TaskSequence,
    protocol: &ProtocolConfig,
    train_config: &TrainConfig,
    codec_config: &CodecRunConfig,
    mode: CompressionMode,
) -> Result<IncrementalRun> {
    let codecs = if mode.uses_codec() { Some(prepare_codecs(sequence, codec_config)?) } else { None };
    run_incremental_with_codecs(sequence, protocol, train_config, codec_config, mode, codecs.as_deref())
}

/// [`run_incremental`] with per-phase codec snapshots from [`prepare_codecs`].
pub fn run_incremental_with_codecs(
    sequence: &TaskSequence,
    protocol: &ProtocolConfig,
    train_config: &TrainConfig,
    codec_config: &CodecRunConfig,
    mode: CompressionMode,
    codecs: Option<&[CodecModel]>,
) -> Result<IncrementalRun> {
    protocol.validate()?;
    train_config.validate()?;
    if sequence.is_empty() {
        return Err(Error::EmptyInput("task sequence".into()));
    }
    if let Some(c) = codecs {
        if c.len() != sequence.len() {
            return Err(Error::Config(format!("{} codec snapshots for {} phases", c.len(), sequence.len())));
        }
    } else if mode.uses_codec() {
        return Err(Error::Config(format!("mode {mode} needs codec snapshots")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);
    let mut model: Option<ClassifierModel> = None;
    let mut store = ExemplarStore::new(phase_budget(protocol, 0));
    let mut results = Vec::with_capacity(sequence.len());
    let mut head: BTreeMap<usize, usize> = BTreeMap::new();

    for (phase, task) in sequence.tasks.iter().enumerate() {
        let started = std::time::Instant::now();
        let codec = codecs.map(|c| &c[phase]);
        let in_phase = |e: Error| e.in_phase(phase);
        for &c in &task.classes {
            let next = head.len();
            head.insert(c, next);
        }
        let mut m = match model.take() {
            None => ClassifierModel::new(&mut rng, train_config.backbone.clone(), task.classes.len()),
            Some(mut m) => {
                let old = m.clone();
                m.expand_head(&mut rng, task.classes.len());
                model = Some(old);
                m
            }
        };
        let old = model.take();

        let replay_images = store.materialize(codec).map_err(in_phase)?;
        let replay: Vec<(&RgbImage, usize)> = replay_images.iter().map(|(img, l)| (img, head[l])).collect();
        let new_data: Vec<(&RgbImage, usize)> = task.samples.iter().map(|s| (&s.image, head[&s.label])).collect();
        let current: Vec<usize> = task.classes.iter().map(|c| head[c]).collect();
        let epochs = if phase == 0 { train_config.initial_epochs } else { train_config.incremental_epochs };
        let seed = train_config.seed.wrapping_mul(1000).wrapping_add(phase as u64);
        let epoch_losses =
            train_phase(&mut m, old.as_ref(), &new_data, &replay, &current, epochs, train_config, seed).map_err(in_phase)?;
        drop(old);

        // Exemplars are chosen by the classifier just trained.
        let seen = head.len();
        let budget = phase_budget(protocol, seen);
        if protocol.budget_mode == BudgetMode::FixedTotal {
            let old_classes = seen - task.classes.len();
            let share = (budget.total_bits as u128 * old_classes as u128 / seen as u128) as u64;
            store.rebalance(budget.with_total(share));
        }
        store.budget = budget;
        select_and_admit(&mut store, &m, task.classes.as_slice(), &task.samples, &head, mode, codec, codec_config, phase)
            .map_err(in_phase)?;

        let seen_pool: Vec<(&RgbImage, usize)> =
            sequence.test_pool.iter().filter_map(|s| head.get(&s.label).map(|&h| (&s.image, h))).collect();
        let top1 = evaluate(&m, &seen_pool).map_err(in_phase)?;
        let buffer_bits = store.used_bits();
        let pixels: u64 = store.records.values().flatten().map(|r| (r.dims().0 * r.dims().1) as u64).sum();
        let mean_record_bpp = if pixels == 0 {
            0.0
        } else {
            let per: f64 = store.records.values().flatten().map(|r| exemplar_cost_bits(r) as f64 / (r.dims().0 * r.dims().1) as f64).sum();
            per / store.len() as f64
        };
        log::info!("phase {phase}: {seen} classes, top1 {top1:.4}, {} exemplars, {buffer_bits} bits", store.len());
        results.push(PhaseResult {
            phase,
            classes_seen: seen,
            top1,
            exemplar_count: store.len(),
            mean_record_bpp,
            buffer_bits,
            budget_bits: store.budget.total_bits,
            epoch_losses,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        model = Some(m);
    }
    Ok(IncrementalRun { results, store, model: model.expect("at least one phase ran") })
}

/// Herding-orders each new class and admits records round-robin, building
/// each record only when it is its turn.
#[allow(clippy::too_many_arguments)]
fn select_and_admit(
    store: &mut ExemplarStore,
    model: &ClassifierModel,
    classes: &[usize],
    samples: &[LabeledImage],
    head: &BTreeMap<usize, usize>,
    mode: CompressionMode,
    codec: Option<&CodecModel>,
    codec_config: &CodecRunConfig,
    phase: usize,
) -> Result<()> {
    let mut ranked: BTreeMap<usize, Vec<&LabeledImage>> = BTreeMap::new();
    for &c in classes {
        let members: Vec<&LabeledImage> = samples.iter().filter(|s| s.label == c).collect();
        if members.is_empty() {
            continue;
        }
        let imgs: Vec<&RgbImage> = members.iter().map(|s| &s.image).collect();
        let mut feats = features(model, &imgs)?;
        feats.iter_mut().for_each(|f| l2_normalize(f));
        let order = herding_select(&feats, feats.len())?;
        ranked.insert(c, order.into_iter().map(|i| members[i]).collect());
    }
    let counts = ranked.iter().map(|(&c, v)| (c, v.len())).collect();
    store.admit_with(counts, |class, rank| {
        let s = ranked[&class][rank];
        let bbox = match mode {
            CompressionMode::CamComposite | CompressionMode::BlankBackground | CompressionMode::BackgroundRemoval => {
                localize(model, &s.image, head[&class], codec_config.cam_threshold)?
            }
            _ => None,
        };
        build_record(mode, codec, &s.image, bbox, class, s.id, phase)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summarize_examples() {
        assert_eq!(summarize_top1(&[0.8, 0.7, 0.6]).unwrap(), (0.70, 0.60));
        assert_eq!(summarize_top1(&[0.42]).unwrap(), (0.42, 0.42));
        assert!(summarize_top1(&[]).is_err());
    }

    #[test]
    fn lr_schedule_steps_down() {
        let c = TrainConfig { base_lr: 0.1, lr_decay_epochs: vec![2, 4], lr_decay_factor: 0.5, ..Default::default() };
        assert_eq!([0, 1, 2, 3, 4, 9].map(|e| c.lr_at(e)), [0.1, 0.1, 0.05, 0.05, 0.025, 0.025]);
        assert!(TrainConfig { lr_decay_factor: 1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn augmentation_keeps_shape_and_range() {
        let img = RgbImage::new(8, 8, (0..192).map(|i| i as u8).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut out = Vec::new();
        augment(&img, &mut rng, &mut out);
        assert_eq!(out.len(), 192);
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn replay_of_current_classes_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = ClassifierModel::new(&mut rng, BackboneConfig::default(), 2);
        let img = RgbImage::filled(16, 16, [9; 3]);
        let err = train_phase(&mut m, None, &[(&img, 1)], &[(&img, 1)], &[1], 1, &TrainConfig::default(), 0);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn evaluation_needs_samples_and_is_repeatable() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = ClassifierModel::new(&mut rng, BackboneConfig::default(), 3);
        assert!(evaluate(&m, &[]).is_err());
        let imgs: Vec<RgbImage> = (0..6).map(|i| RgbImage::filled(16, 16, [i * 40; 3])).collect();
        let pool: Vec<(&RgbImage, usize)> = imgs.iter().enumerate().map(|(i, im)| (im, i % 3)).collect();
        let a = evaluate(&m, &pool).unwrap();
        assert_eq!(a, evaluate(&m, &pool).unwrap());
        assert!((0.0..=1.0).contains(&a));
    }
}
