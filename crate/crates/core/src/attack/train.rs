use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{adversarial_loss, apply_perturbation, regularizer_loss, scale_perturbation, total_loss, AttackSpec, StealthyLabels};
use crate::error::{Error, Result};
use crate::eval::{count_image, RateCounts};
use crate::labels::LabelMap;
use crate::nets::{Model, ModelConfig, ModelKind};
use crate::scenes::SampleSet;
use crate::tensor::{stack, Graph, Optimizer, Tensor};
use crate::util::derive_seed;

/// Generator training settings; serialized with these exact field names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackTrainConfig {
    pub lr: f32,
    pub batch: usize,
    pub lambda0: f32,
    pub xi: f32,
    pub epochs: usize,
    pub seed: u64,
    pub target_weight: f32,
    pub preserve_weight: f32,
    pub regularizer_enabled: bool,
}

impl Default for AttackTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch: 8,
            lambda0: 1e-2,
            xi: 10.0,
            epochs: 10,
            seed: 0,
            target_weight: 1.0,
            preserve_weight: 1.0,
            regularizer_enabled: true,
        }
    }
}

impl AttackTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            return Err(Error::config(format!("xi must be positive, got {}", self.xi)));
        }
        if !(self.lambda0 >= 0.0) {
            return Err(Error::config("lambda0 must be non-negative"));
        }
        if !(self.target_weight >= 0.0 && self.preserve_weight >= 0.0) {
            return Err(Error::config("target_weight and preserve_weight must be non-negative"));
        }
        if !(self.lr > 0.0) || self.batch == 0 {
            return Err(Error::config("lr must be positive and batch at least 1"));
        }
        Ok(())
    }
}

/// Supervised target training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub lr: f32,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            batch: 8,
            epochs: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub model: Model,
    pub test_pixel_acc: f32,
    /// Mean per-pixel training loss of each epoch.
    pub epoch_losses: Vec<f32>,
}

/// Per-epoch means; losses are per pixel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub adv_loss: f32,
    pub reg_loss: Option<f32>,
    pub total_loss: f32,
    pub manipulated_rate: Option<f32>,
    pub preserved_rate: Option<f32>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackHistory {
    pub epochs: Vec<EpochRecord>,
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as u64)));
    order
}

fn gather(data: &SampleSet, idx: &[usize]) -> Result<(Tensor, Vec<LabelMap>)> {
    let imgs: Vec<&Tensor> = idx.iter().map(|&i| &data.images[i]).collect();
    Ok((stack(&imgs)?, idx.iter().map(|&i| data.labels[i].clone()).collect()))
}

fn check_labels(data: &SampleSet, num_classes: usize) -> Result<()> {
    for (i, l) in data.labels.iter().enumerate() {
        if let Some(pixel) = l.data().iter().position(|&v| v as usize >= num_classes) {
            return Err(Error::config(format!(
                "sample {i} has label {} at pixel {pixel}, model has {num_classes} classes",
                l.data()[pixel]
            )));
        }
    }
    Ok(())
}

/// Target argmax predictions for a whole set, computed in batches.
pub fn predict_labels(model: &Model, data: &SampleSet, batch: usize) -> Result<Vec<LabelMap>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in (0..data.len()).collect::<Vec<_>>().chunks(batch.max(1)) {
        let (x, _) = gather(data, chunk)?;
        out.extend(LabelMap::argmax_batch(&model.predict_logits(&x)?)?);
    }
    Ok(out)
}

/// Fraction of pixels where the prediction equals ground truth.
pub fn pixel_accuracy(model: &Model, data: &SampleSet, batch: usize) -> Result<f32> {
    let preds = predict_labels(model, data, batch)?;
    let (mut hit, mut total) = (0u64, 0u64);
    for (p, t) in preds.iter().zip(&data.labels) {
        hit += p.data().iter().zip(t.data()).filter(|(a, b)| a == b).count() as u64;
        total += t.len() as u64;
    }
    Ok(if total == 0 { 0.0 } else { (hit as f64 / total as f64) as f32 })
}

/// Supervised training of a fresh target with Adam and summed pixelwise
/// cross-entropy against ground truth.
pub fn pretrain_target(model_cfg: &ModelConfig, train: &SampleSet, test: &SampleSet, cfg: &PretrainConfig) -> Result<PretrainReport> {
    if model_cfg.kind != ModelKind::TargetFCN {
        return Err(Error::config("pretraining needs a TargetFCN model config"));
    }
    if cfg.batch == 0 || !(cfg.lr > 0.0) {
        return Err(Error::config("lr must be positive and batch at least 1"));
    }
    let mut model = Model::build(model_cfg.clone())?;
    check_labels(train, model.num_classes())?;
    check_labels(test, model.num_classes())?;
    let mut opt = Optimizer::adam(cfg.lr);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (mut sum, mut pixels) = (0.0f64, 0usize);
        for idx in epoch_order(train.len(), cfg.seed, epoch).chunks(cfg.batch) {
            let (x, y) = gather(train, idx)?;
            let mut g = Graph::<f32>::new();
            let p = model.bind(&mut g, true);
            let xv = g.constant(x);
            let logits = model.forward_target(&mut g, &p, xv)?;
            let n: usize = y.iter().map(LabelMap::len).sum();
            let loss = g.cross_entropy_pixelwise(logits, &y, &vec![1.0; n])?;
            sum += g.value(loss).item() as f64;
            pixels += n;
            g.backward(loss)?;
            model.accumulate_grads(&g, &p)?;
            opt.step(model.trainable_params(|_| true)?)?;
        }
        epoch_losses.push((sum / pixels.max(1) as f64) as f32);
    }
    model.freeze();
    let test_pixel_acc = pixel_accuracy(&model, test, cfg.batch)?;
    Ok(PretrainReport {
        model,
        test_pixel_acc,
        epoch_losses,
    })
}

/// Trains `generator` to attack the frozen `target` on `data`.
pub fn train_attack(
    generator: Model,
    target: &Model,
    data: &SampleSet,
    spec: &AttackSpec,
    cfg: &AttackTrainConfig,
) -> Result<(Model, AttackHistory)> {
    train_attack_with(generator, target, data, spec, cfg, |_, _| Ok(()))
}

/// [`train_attack`] with a hook called after every epoch, e.g. to write a
/// checkpoint.
///
/// The target's clean predictions never change during training, so the
/// stealthy labels are computed once up front rather than per batch.
pub fn train_attack_with(
    mut generator: Model,
    target: &Model,
    data: &SampleSet,
    spec: &AttackSpec,
    cfg: &AttackTrainConfig,
    mut on_epoch: impl FnMut(&Model, &EpochRecord) -> Result<()>,
) -> Result<(Model, AttackHistory)> {
    cfg.validate()?;
    if !target.is_frozen() {
        return Err(Error::Contract("attack target must be frozen".into()));
    }
    if target.kind() != ModelKind::TargetFCN || generator.kind() != ModelKind::GeneratorUNet {
        return Err(Error::config("train_attack needs a GeneratorUNet and a TargetFCN"));
    }
    let c = target.num_classes();
    if generator.num_classes() != c {
        return Err(Error::config(format!(
            "generator has {} classes, target has {c}",
            generator.num_classes()
        )));
    }
    if cfg.regularizer_enabled && !generator.config().regularizer_head {
        return Err(Error::config("regularizer enabled but the generator has no regularizer head"));
    }
    check_labels(data, c)?;
    let Some(first) = data.labels.first() else {
        return Ok((generator, AttackHistory::default()));
    };
    let mapper = spec.prepare(c, first.height(), first.width())?;
    let mode = spec.effective_mode();

    let mut clean = Vec::with_capacity(data.len());
    let mut stealthy: Vec<StealthyLabels> = Vec::with_capacity(data.len());
    for chunk in (0..data.len()).collect::<Vec<_>>().chunks(cfg.batch) {
        let (x, _) = gather(data, chunk)?;
        let logits = target.predict_logits(&x)?;
        clean.extend(LabelMap::argmax_batch(&logits)?);
        stealthy.extend(mapper.map(&logits)?);
    }

    let use_reg = cfg.regularizer_enabled;
    let trainable = move |name: &str| use_reg || !name.starts_with("reg_head.");
    let mut opt = Optimizer::adam(cfg.lr);
    let mut history = AttackHistory::default();
    for epoch in 0..cfg.epochs {
        let (mut adv_sum, mut reg_sum, mut tot_sum, mut pixels) = (0.0f64, 0.0f64, 0.0f64, 0usize);
        let mut counts = RateCounts::default();
        for idx in epoch_order(data.len(), cfg.seed, epoch).chunks(cfg.batch) {
            let (x, truth) = gather(data, idx)?;
            let batch_stealthy: Vec<StealthyLabels> = idx.iter().map(|&i| stealthy[i].clone()).collect();

            let mut g = Graph::<f32>::new();
            let gp = generator.bind(&mut g, true);
            let tp = target.bind(&mut g, false);
            let xv = g.constant(x);
            let out = generator.forward_generator(&mut g, &gp, xv)?;
            let p = scale_perturbation(&mut g, out.raw_perturbation, cfg.xi)?;
            let x_adv = apply_perturbation(&mut g, xv, p)?;
            let adv_logits = target.forward_target(&mut g, &tp, x_adv)?;
            let adv = adversarial_loss(&mut g, adv_logits, &batch_stealthy, cfg.target_weight, cfg.preserve_weight)?;
            let reg = match (use_reg, out.regularizer_logits) {
                (true, Some(r)) => Some(regularizer_loss(&mut g, r, &truth)?),
                _ => None,
            };
            let total = total_loss(&mut g, adv, reg, cfg.lambda0)?;

            let adv_pred = LabelMap::argmax_batch(g.value(adv_logits))?;
            for (k, &i) in idx.iter().enumerate() {
                counts.add(count_image(&clean[i], &adv_pred[k], &stealthy[i], spec, mode));
            }
            adv_sum += g.value(adv).item() as f64;
            if let Some(r) = reg {
                reg_sum += g.value(r).item() as f64;
            }
            tot_sum += g.value(total).item() as f64;
            pixels += truth.iter().map(LabelMap::len).sum::<usize>();

            g.backward(total)?;
            generator.accumulate_grads(&g, &gp)?;
            opt.step(generator.trainable_params(trainable)?)?;
        }
        let px = pixels.max(1) as f64;
        let record = EpochRecord {
            epoch,
            adv_loss: (adv_sum / px) as f32,
            reg_loss: use_reg.then_some((reg_sum / px) as f32),
            total_loss: (tot_sum / px) as f32,
            manipulated_rate: counts.manipulated(),
            preserved_rate: counts.preserved(),
        };
        on_epoch(&generator, &record)?;
        history.epochs.push(record);
    }
    generator.zero_grads();
    Ok((generator, history))
}
