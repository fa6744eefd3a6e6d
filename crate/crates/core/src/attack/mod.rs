//! Stealthy label mappers, attack losses, perturbation bounding, and the
//! generator training loop.
//!
//! Three attack types are supported:
//!
//! - `Vanish`: pixels predicted as a target class are relabelled to their
//!   most likely non-target class.
//! - `Embed`: an external mask is painted with a fake class.
//! - `Displace`: both at once; the embed mask wins where they overlap.
//!
//! Every pixel outside the target mask keeps its clean prediction.

pub mod gradcheck;
mod train;

use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{ClassId, LabelMap};
use crate::scenes::{self, pnm};
use crate::tensor::{Graph, Real, Tensor, Var};

pub use train::{
    pixel_accuracy, predict_labels, pretrain_target, train_attack, train_attack_with, AttackHistory, AttackTrainConfig,
    EpochRecord, PretrainConfig, PretrainReport,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttackType {
    Vanish,
    Embed,
    Displace,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SuccessMode {
    Strict,
    VanishMode,
    EmbedMode,
}

impl SuccessMode {
    pub fn name(self) -> &'static str {
        match self {
            SuccessMode::Strict => "Strict",
            SuccessMode::VanishMode => "VanishMode",
            SuccessMode::EmbedMode => "EmbedMode",
        }
    }
}

/// Where an embed mask comes from. Procedural shapes use coordinates as
/// fractions of image width (`x`) and height (`y`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskSource {
    /// Upright person silhouette with its feet at `(cx, feet)`.
    Silhouette { cx: f32, feet: f32, height: f32 },
    Rect { x0: f32, y0: f32, x1: f32, y1: f32 },
    Union { parts: Vec<MaskSource> },
    /// P5 PGM; nonzero pixels are in the mask.
    File { path: PathBuf },
}

impl MaskSource {
    pub fn materialize(&self, height: usize, width: usize) -> Result<TargetMask> {
        let mut mask = TargetMask::empty(height, width);
        self.paint(&mut mask)?;
        Ok(mask)
    }

    fn paint(&self, mask: &mut TargetMask) -> Result<()> {
        let (h, w) = (mask.height, mask.width);
        match self {
            MaskSource::Silhouette { cx, feet, height } => {
                let mut lm = LabelMap::filled(h, w, 0);
                let px = (cx * w as f32).round() as isize;
                let py = (feet * h as f32).round() as isize;
                let ph = ((height * h as f32).round() as usize).max(4);
                scenes::draw_figure(&mut lm, px, py, ph, 1);
                for (b, &l) in mask.bits.iter_mut().zip(lm.data()) {
                    *b |= l == 1;
                }
            }
            MaskSource::Rect { x0, y0, x1, y1 } => {
                let (xa, xb) = ((x0 * w as f32).round() as usize, (x1 * w as f32).round() as usize);
                let (ya, yb) = ((y0 * h as f32).round() as usize, (y1 * h as f32).round() as usize);
                for y in ya.min(h)..yb.min(h) {
                    for x in xa.min(w)..xb.min(w) {
                        mask.bits[y * w + x] = true;
                    }
                }
            }
            MaskSource::Union { parts } => {
                for p in parts {
                    p.paint(mask)?;
                }
            }
            MaskSource::File { path } => {
                let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
                let r = pnm::decode(&bytes, path)?;
                if r.channels != 1 || (r.height, r.width) != (h, w) {
                    return Err(Error::Image {
                        path: path.clone(),
                        detail: format!("mask must be a {w}x{h} P5 image"),
                    });
                }
                for (b, &v) in mask.bits.iter_mut().zip(&r.data) {
                    *b |= v != 0;
                }
            }
        }
        Ok(())
    }
}

/// Attack definition; serialized with these exact field names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub attack_type: AttackType,
    #[serde(default)]
    pub target_classes: BTreeSet<ClassId>,
    #[serde(default)]
    pub fake_class: Option<ClassId>,
    #[serde(default)]
    pub mask_source: Option<MaskSource>,
    /// Defaults by type: Vanish uses `VanishMode`, Embed `EmbedMode`,
    /// Displace `Strict`.
    #[serde(default)]
    pub success_mode: Option<SuccessMode>,
}

impl AttackSpec {
    pub fn vanish(targets: impl IntoIterator<Item = ClassId>) -> Self {
        Self {
            attack_type: AttackType::Vanish,
            target_classes: targets.into_iter().collect(),
            fake_class: None,
            mask_source: None,
            success_mode: None,
        }
    }

    pub fn embed(fake_class: ClassId, mask: MaskSource) -> Self {
        Self {
            attack_type: AttackType::Embed,
            target_classes: BTreeSet::new(),
            fake_class: Some(fake_class),
            mask_source: Some(mask),
            success_mode: None,
        }
    }

    pub fn displace(targets: impl IntoIterator<Item = ClassId>, fake_class: ClassId, mask: MaskSource) -> Self {
        Self {
            attack_type: AttackType::Displace,
            target_classes: targets.into_iter().collect(),
            fake_class: Some(fake_class),
            mask_source: Some(mask),
            success_mode: None,
        }
    }

    pub fn with_success_mode(mut self, mode: SuccessMode) -> Self {
        self.success_mode = Some(mode);
        self
    }

    pub fn effective_mode(&self) -> SuccessMode {
        self.success_mode.unwrap_or(match self.attack_type {
            AttackType::Vanish => SuccessMode::VanishMode,
            AttackType::Embed => SuccessMode::EmbedMode,
            AttackType::Displace => SuccessMode::Strict,
        })
    }

    /// Checks the spec against a class count.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let needs_targets = matches!(self.attack_type, AttackType::Vanish | AttackType::Displace);
        let needs_embed = matches!(self.attack_type, AttackType::Embed | AttackType::Displace);
        if needs_targets {
            check_targets(&self.target_classes, num_classes)?;
        }
        if needs_embed {
            let fake = self
                .fake_class
                .ok_or_else(|| Error::config(format!("{:?} attack needs fake_class", self.attack_type)))?;
            if fake as usize >= num_classes {
                return Err(Error::config(format!(
                    "fake_class {fake} out of range for {num_classes} classes"
                )));
            }
            if self.mask_source.is_none() {
                return Err(Error::config(format!("{:?} attack needs mask_source", self.attack_type)));
            }
        }
        if self.attack_type == AttackType::Displace && self.target_classes.contains(&self.fake_class.unwrap_or(0)) {
            return Err(Error::config("Displace fake_class must not be a target class"));
        }
        Ok(())
    }

    /// Validates and resolves the embed mask for `h x w` images.
    pub fn prepare(&self, num_classes: usize, height: usize, width: usize) -> Result<Mapper> {
        self.validate(num_classes)?;
        let embed_mask = match (&self.mask_source, self.attack_type) {
            (Some(src), AttackType::Embed | AttackType::Displace) => Some(src.materialize(height, width)?),
            _ => None,
        };
        Ok(Mapper {
            spec: self.clone(),
            embed_mask,
        })
    }
}

fn check_targets(targets: &BTreeSet<ClassId>, num_classes: usize) -> Result<()> {
    if targets.is_empty() {
        return Err(Error::config("target_classes must not be empty"));
    }
    if let Some(&t) = targets.iter().find(|&&t| t as usize >= num_classes) {
        return Err(Error::config(format!(
            "target class {t} out of range for {num_classes} classes"
        )));
    }
    if targets.len() >= num_classes {
        return Err(Error::config("target_classes cover every class; nothing to vanish into"));
    }
    Ok(())
}

/// Per-pixel indicator of the pixels an attack should change.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TargetMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl TargetMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

/// Manipulated label map and the mask of pixels it changes by design.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct StealthyLabels {
    pub labels: LabelMap,
    pub mask: TargetMask,
}

fn logits_shape<T: Real>(l: &Tensor<T>) -> Result<[usize; 4]> {
    match *l.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::InvalidShape {
            op: "label mapper",
            detail: format!("expected NCHW logits, got {:?}", l.shape()),
        }),
    }
}

/// Vanish mapping for a batch of logits. Target-class pixels move to the
/// most likely class outside `targets` (lowest id on ties).
pub fn map_vanish<T: Real>(logits: &Tensor<T>, targets: &BTreeSet<ClassId>) -> Result<Vec<StealthyLabels>> {
    let [_, c, h, w] = logits_shape(logits)?;
    check_targets(targets, c)?;
    let m = h * w;
    let is_target: Vec<bool> = (0..c).map(|j| targets.contains(&(j as ClassId))).collect();
    let clean = LabelMap::argmax_batch(logits)?;
    let data = logits.data();
    Ok(clean
        .into_iter()
        .enumerate()
        .map(|(i, mut labels)| {
            let base = i * c * m;
            let mut mask = TargetMask::empty(h, w);
            for k in 0..m {
                if !is_target[labels.data()[k] as usize] {
                    continue;
                }
                let mut best: Option<usize> = None;
                for j in (0..c).filter(|&j| !is_target[j]) {
                    if best.is_none_or(|b| data[base + j * m + k] > data[base + b * m + k]) {
                        best = Some(j);
                    }
                }
                labels.data_mut()[k] = best.expect("a non-target class exists") as ClassId;
                mask.bits[k] = true;
            }
            StealthyLabels { labels, mask }
        })
        .collect())
}

/// Embed mapping: pixels in `mask` become `fake_class`.
pub fn map_embed<T: Real>(logits: &Tensor<T>, mask: &TargetMask, fake_class: ClassId) -> Result<Vec<StealthyLabels>> {
    let [_, c, h, w] = logits_shape(logits)?;
    if (mask.height, mask.width) != (h, w) {
        return Err(Error::ShapeMismatch {
            op: "map_embed",
            lhs: vec![h, w],
            rhs: vec![mask.height, mask.width],
        });
    }
    if fake_class as usize >= c {
        return Err(Error::config(format!("fake_class {fake_class} out of range for {c} classes")));
    }
    Ok(LabelMap::argmax_batch(logits)?
        .into_iter()
        .map(|mut labels| {
            for (l, &b) in labels.data_mut().iter_mut().zip(&mask.bits) {
                if b {
                    *l = fake_class;
                }
            }
            StealthyLabels {
                labels,
                mask: mask.clone(),
            }
        })
        .collect())
}

/// Vanish, then embed over the result. The target mask is the union.
pub fn map_displace<T: Real>(
    logits: &Tensor<T>,
    targets: &BTreeSet<ClassId>,
    mask: &TargetMask,
    fake_class: ClassId,
) -> Result<Vec<StealthyLabels>> {
    if targets.contains(&fake_class) {
        return Err(Error::config("Displace fake_class must not be a target class"));
    }
    let vanished = map_vanish(logits, targets)?;
    let [_, _, h, w] = logits_shape(logits)?;
    if (mask.height, mask.width) != (h, w) {
        return Err(Error::ShapeMismatch {
            op: "map_displace",
            lhs: vec![h, w],
            rhs: vec![mask.height, mask.width],
        });
    }
    if fake_class as usize >= logits.shape()[1] {
        return Err(Error::config(format!("fake_class {fake_class} out of range")));
    }
    Ok(vanished
        .into_iter()
        .map(|mut s| {
            for k in 0..mask.bits.len() {
                if mask.bits[k] {
                    s.labels.data_mut()[k] = fake_class;
                    s.mask.bits[k] = true;
                }
            }
            s
        })
        .collect())
}

/// A validated spec with its embed mask resolved for one image size.
#[derive(Clone, Debug)]
pub struct Mapper {
    spec: AttackSpec,
    embed_mask: Option<TargetMask>,
}

impl Mapper {
    pub fn spec(&self) -> &AttackSpec {
        &self.spec
    }

    pub fn embed_mask(&self) -> Option<&TargetMask> {
        self.embed_mask.as_ref()
    }

    pub fn map<T: Real>(&self, logits: &Tensor<T>) -> Result<Vec<StealthyLabels>> {
        let s = &self.spec;
        match s.attack_type {
            AttackType::Vanish => map_vanish(logits, &s.target_classes),
            AttackType::Embed => map_embed(
                logits,
                self.embed_mask.as_ref().expect("prepared"),
                s.fake_class.expect("validated"),
            ),
            AttackType::Displace => map_displace(
                logits,
                &s.target_classes,
                self.embed_mask.as_ref().expect("prepared"),
                s.fake_class.expect("validated"),
            ),
        }
    }
}

/// `xi * tanh(raw)`, so every element lies in `[-xi, xi]`.
pub fn scale_perturbation<T: Real>(g: &mut Graph<T>, raw: Var, xi: f32) -> Result<Var> {
    if !(xi > 0.0 && xi.is_finite()) {
        return Err(Error::config(format!("xi must be positive, got {xi}")));
    }
    let t = g.tanh(raw);
    Ok(g.scale(t, T::from_f64(xi as f64)))
}

/// `clamp(image + p, 0, 255)`.
pub fn apply_perturbation<T: Real>(g: &mut Graph<T>, image: Var, p: Var) -> Result<Var> {
    let x = g.add(image, p)?;
    Ok(g.clamp(x, T::zero(), T::from_f64(255.0)))
}

/// Per-pixel weights: `w_t` on the target mask, `w_nt` elsewhere.
pub fn pixel_weights<T: Real>(stealthy: &[StealthyLabels], w_t: f32, w_nt: f32) -> Vec<T> {
    let (wt, wn) = (T::from_f64(w_t as f64), T::from_f64(w_nt as f64));
    stealthy
        .iter()
        .flat_map(|s| s.mask.bits.iter().map(move |&b| if b { wt } else { wn }))
        .collect()
}

/// Weighted cross-entropy of the adversarial logits against the stealthy
/// labels, summed over all pixels.
pub fn adversarial_loss<T: Real>(
    g: &mut Graph<T>,
    adv_logits: Var,
    stealthy: &[StealthyLabels],
    w_t: f32,
    w_nt: f32,
) -> Result<Var> {
    if !(w_t >= 0.0 && w_nt >= 0.0) {
        return Err(Error::config("attack loss weights must be non-negative"));
    }
    let labels: Vec<LabelMap> = stealthy.iter().map(|s| s.labels.clone()).collect();
    let weights = pixel_weights::<T>(stealthy, w_t, w_nt);
    g.cross_entropy_pixelwise(adv_logits, &labels, &weights)
}

/// Plain cross-entropy of the regularizer logits against ground truth.
pub fn regularizer_loss<T: Real>(g: &mut Graph<T>, reg_logits: Var, truth: &[LabelMap]) -> Result<Var> {
    let n: usize = truth.iter().map(LabelMap::len).sum();
    g.cross_entropy_pixelwise(reg_logits, truth, &vec![T::one(); n])
}

/// `adv + lambda0 * reg`; with `reg` absent the adversarial loss is returned.
pub fn total_loss<T: Real>(g: &mut Graph<T>, adv: Var, reg: Option<Var>, lambda0: f32) -> Result<Var> {
    if !(lambda0 >= 0.0) {
        return Err(Error::config("lambda0 must be non-negative"));
    }
    match reg {
        Some(r) => {
            let r = g.scale(r, T::from_f64(lambda0 as f64));
            g.add(adv, r)
        }
        None => Ok(adv),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::{CAR, PERSON, RIDER, ROAD};

    fn one_pixel(values: &[f32]) -> Tensor {
        Tensor::new(&[1, values.len(), 1, 1], values.to_vec()).unwrap()
    }

    fn logits8(pairs: &[(ClassId, f32)]) -> Tensor {
        let mut v = vec![0.0; 8];
        for &(c, x) in pairs {
            v[c as usize] = x;
        }
        one_pixel(&v)
    }

    #[test]
    fn vanish_examples() {
        let person = BTreeSet::from([PERSON]);
        let s = map_vanish(&logits8(&[(ROAD, 0.1), (PERSON, 0.7), (CAR, 0.2)]), &person).unwrap();
        assert_eq!(s[0].labels.data(), &[CAR]);
        assert!(s[0].mask.bits[0]);

        let s = map_vanish(&logits8(&[(ROAD, 0.9), (PERSON, 0.1)]), &person).unwrap();
        assert_eq!(s[0].labels.data(), &[ROAD]);
        assert!(!s[0].mask.bits[0]);

        let both = BTreeSet::from([PERSON, RIDER]);
        let s = map_vanish(&logits8(&[(PERSON, 0.5), (RIDER, 0.4), (ROAD, 0.1)]), &both).unwrap();
        assert_eq!(s[0].labels.data(), &[ROAD]);

        let all: BTreeSet<ClassId> = (0..8).collect();
        assert!(map_vanish(&logits8(&[]), &all).is_err());
    }

    #[test]
    fn embed_empty_and_full() {
        let l = Tensor::new(&[1, 3, 2, 2], (0..12).map(|v| (v % 5) as f32).collect()).unwrap();
        let clean = LabelMap::argmax_batch(&l).unwrap();
        let s = map_embed(&l, &TargetMask::empty(2, 2), 1).unwrap();
        assert_eq!(s[0].labels, clean[0]);
        let s = map_embed(&l, &TargetMask::full(2, 2), 1).unwrap();
        assert!(s[0].labels.data().iter().all(|&v| v == 1));
        assert!(map_embed(&l, &TargetMask::empty(3, 2), 1).is_err());
    }

    #[test]
    fn displace_overlap_keeps_fake() {
        // argmax person, mask true, fake = person is rejected; use car as fake
        let l = logits8(&[(PERSON, 3.0), (ROAD, 1.0)]);
        let s = map_displace(&l, &BTreeSet::from([PERSON]), &TargetMask::full(1, 1), CAR).unwrap();
        assert_eq!(s[0].labels.data(), &[CAR]);
        assert!(s[0].mask.bits[0]);
        assert!(map_displace(&l, &BTreeSet::from([PERSON]), &TargetMask::full(1, 1), PERSON).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(AttackSpec::vanish([]).validate(8).is_err());
        assert!(AttackSpec::vanish([9]).validate(8).is_err());
        assert!(AttackSpec::vanish([PERSON]).validate(8).is_ok());
        let rect = MaskSource::Rect {
            x0: 0.0,
            y0: 0.0,
            x1: 0.5,
            y1: 0.5,
        };
        assert!(AttackSpec::displace([PERSON], PERSON, rect.clone()).validate(8).is_err());
        assert!(AttackSpec::displace([PERSON], CAR, rect.clone()).validate(8).is_ok());
        let mut e = AttackSpec::embed(PERSON, rect);
        e.mask_source = None;
        assert!(e.validate(8).is_err());
    }

    #[test]
    fn spec_json_field_names() {
        let spec = AttackSpec::embed(
            PERSON,
            MaskSource::Silhouette {
                cx: 0.5,
                feet: 0.9,
                height: 0.3,
            },
        );
        let v: serde_json::Value = serde_json::to_value(&spec).unwrap();
        for key in ["attack_type", "target_classes", "fake_class", "mask_source", "success_mode"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        let back: AttackSpec = serde_json::from_value(v).unwrap();
        assert_eq!(back, spec);
        assert!(serde_json::from_str::<AttackSpec>(r#"{"attack_type":"Vanish","bogus":1}"#).is_err());
    }

    #[test]
    fn masks_materialize() {
        let r = MaskSource::Rect {
            x0: 0.25,
            y0: 0.5,
            x1: 0.5,
            y1: 1.0,
        }
        .materialize(8, 8)
        .unwrap();
        assert_eq!(r.count(), 2 * 4);
        let s = MaskSource::Silhouette {
            cx: 0.5,
            feet: 0.9,
            height: 0.4,
        }
        .materialize(64, 64)
        .unwrap();
        assert!(s.count() > 30 && s.count() < 400, "{}", s.count());
    }

    #[test]
    fn bounds_and_clamp() {
        let mut g = Graph::<f32>::new();
        let raw = g.constant(Tensor::new(&[4], vec![0.0, 1.0, 1e6, -1e6]).unwrap());
        let p = scale_perturbation(&mut g, raw, 10.0).unwrap();
        let v = g.value(p).data().to_vec();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 7.6159).abs() < 1e-4);
        assert!(v.iter().all(|x| x.abs() <= 10.0));
        let img = g.constant(Tensor::new(&[3], vec![250.0, 100.0, 5.0]).unwrap());
        let pert = g.constant(Tensor::new(&[3], vec![10.0, -7.5, 0.0]).unwrap());
        let x = apply_perturbation(&mut g, img, pert).unwrap();
        assert_eq!(g.value(x).data(), &[255.0, 92.5, 5.0]);
        assert!(scale_perturbation(&mut g, raw, 0.0).is_err());
    }

    #[test]
    fn weighted_loss_hand_value() {
        // 1 target + 1 non-target pixel, uniform logits over 4 classes
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::zeros(&[1, 4, 1, 2]));
        let stealthy = [StealthyLabels {
            labels: LabelMap::new(1, 2, vec![0, 3]).unwrap(),
            mask: TargetMask {
                height: 1,
                width: 2,
                bits: vec![true, false],
            },
        }];
        let loss = adversarial_loss(&mut g, l, &stealthy, 2.0, 1.0).unwrap();
        assert!((g.value(loss).item() - 3.0 * 4f64.ln()).abs() < 1e-12);
        assert!(adversarial_loss(&mut g, l, &stealthy, -1.0, 1.0).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::scalar(1.0));
        let r = g.constant(Tensor::scalar(2.0));
        let t = total_loss(&mut g, a, Some(r), 1e-2).unwrap();
        assert!((g.value(t).item() - 1.02).abs() < 1e-6);
        let t0 = total_loss(&mut g, a, Some(r), 0.0).unwrap();
        assert_eq!(g.value(t0).item(), 1.0);
        assert!(total_loss(&mut g, a, Some(r), -1.0).is_err());
    }
}
