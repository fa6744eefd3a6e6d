//! Success-rate metrics, experiment harnesses, reports, and rendering.
//!
//! Rates are pixel micro-averages over a split. The preserved rate compares
//! adversarial predictions to the clean prediction rather than ground truth.

mod grid;
mod render;
mod report;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{apply_perturbation, scale_perturbation, AttackSpec, AttackType, Mapper, StealthyLabels, SuccessMode, TargetMask};
use crate::error::{Error, Result};
use crate::labels::{ClassId, LabelMap};
use crate::nets::{Model, ModelKind};
use crate::scenes::SampleSet;
use crate::tensor::{stack, Graph, Tensor};

pub use grid::{cross_evaluate, sweep_xi, ExperimentGrid, GridCell, SweepRow};
pub use render::{image_to_ppm, perturbation_to_ppm, render_labelmap, Palette};
pub use report::{report_csv_bytes, write_report_csv, ReportRow, REPORT_COLUMNS};

/// Success and preservation tallies, summable across images.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RateCounts {
    pub target_hits: u64,
    pub n_target: u64,
    pub preserved_hits: u64,
    pub n_nontarget: u64,
}

impl RateCounts {
    pub fn add(&mut self, o: RateCounts) {
        self.target_hits += o.target_hits;
        self.n_target += o.n_target;
        self.preserved_hits += o.preserved_hits;
        self.n_nontarget += o.n_nontarget;
    }

    pub fn manipulated(&self) -> Option<f32> {
        (self.n_target > 0).then(|| (self.target_hits as f64 / self.n_target as f64) as f32)
    }

    pub fn preserved(&self) -> Option<f32> {
        (self.n_nontarget > 0).then(|| (self.preserved_hits as f64 / self.n_nontarget as f64) as f32)
    }

    /// Successes over all pixels: manipulated hits on the mask plus
    /// preserved hits off it.
    pub fn combined(&self) -> Option<f32> {
        let total = self.n_target + self.n_nontarget;
        (total > 0).then(|| ((self.target_hits + self.preserved_hits) as f64 / total as f64) as f32)
    }
}

fn is_success(mode: SuccessMode, adv: ClassId, wanted: ClassId, spec: &AttackSpec) -> bool {
    match mode {
        SuccessMode::Strict => adv == wanted,
        SuccessMode::VanishMode => !spec.target_classes.contains(&adv),
        SuccessMode::EmbedMode => Some(adv) == spec.fake_class,
    }
}

/// Tallies one image. Pixels on the mask count toward the manipulated rate,
/// all others toward the preserved rate.
pub fn count_image(clean: &LabelMap, adv: &LabelMap, stealthy: &StealthyLabels, spec: &AttackSpec, mode: SuccessMode) -> RateCounts {
    let mut c = RateCounts::default();
    let wanted = stealthy.labels.data();
    for (k, (&a, &b)) in adv.data().iter().zip(&stealthy.mask.bits).enumerate() {
        if b {
            c.n_target += 1;
            c.target_hits += is_success(mode, a, wanted[k], spec) as u64;
        } else {
            c.n_nontarget += 1;
            c.preserved_hits += (a == clean.data()[k]) as u64;
        }
    }
    c
}

fn check_same_size(op: &'static str, a: &LabelMap, b: &LabelMap) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::ShapeMismatch {
            op,
            lhs: vec![a.height(), a.width()],
            rhs: vec![b.height(), b.width()],
        });
    }
    Ok(())
}

/// Fraction of mask pixels where the attack succeeded under the spec's
/// success mode; `None` for an empty mask.
pub fn manipulated_rate(clean: &LabelMap, adv: &LabelMap, stealthy: &StealthyLabels, spec: &AttackSpec) -> Result<Option<f32>> {
    check_same_size("manipulated_rate", clean, adv)?;
    check_same_size("manipulated_rate", clean, &stealthy.labels)?;
    Ok(count_image(clean, adv, stealthy, spec, spec.effective_mode()).manipulated())
}

/// Fraction of off-mask pixels whose prediction is unchanged.
pub fn preserved_rate(clean: &LabelMap, adv: &LabelMap, mask: &TargetMask) -> Result<f32> {
    check_same_size("preserved_rate", clean, adv)?;
    if mask.bits.len() != clean.len() {
        return Err(Error::ShapeMismatch {
            op: "preserved_rate",
            lhs: vec![clean.height(), clean.width()],
            rhs: vec![mask.height, mask.width],
        });
    }
    let (mut hit, mut total) = (0u64, 0u64);
    for ((&a, &c), &b) in adv.data().iter().zip(clean.data()).zip(&mask.bits) {
        if !b {
            total += 1;
            hit += (a == c) as u64;
        }
    }
    if total == 0 {
        return Err(Error::Contract("preserved rate is undefined for an all-true mask".into()));
    }
    Ok((hit as f64 / total as f64) as f32)
}

/// Everything one attack pass produces for a batch.
#[derive(Clone, Debug)]
pub struct AttackRun {
    /// Scaled perturbation `p`, `n x 3 x h x w`.
    pub perturbation: Tensor,
    pub adversarial: Tensor,
    pub clean_logits: Tensor,
    pub adv_logits: Tensor,
}

/// Runs generator and target on a batch without recording gradients.
pub fn run_attack(generator: &Model, target: &Model, images: &Tensor, xi: f32) -> Result<AttackRun> {
    let mut g = Graph::<f32>::new();
    let gp = generator.bind(&mut g, false);
    let tp = target.bind(&mut g, false);
    let x = g.constant(images.clone());
    let out = generator.forward_generator(&mut g, &gp, x)?;
    let p = scale_perturbation(&mut g, out.raw_perturbation, xi)?;
    let xa = apply_perturbation(&mut g, x, p)?;
    let adv = target.forward_target(&mut g, &tp, xa)?;
    let clean = target.forward_target(&mut g, &tp, x)?;
    Ok(AttackRun {
        perturbation: g.value(p).clone(),
        adversarial: g.value(xa).clone(),
        clean_logits: g.value(clean).clone(),
        adv_logits: g.value(adv).clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub manipulated_rate: Option<f32>,
    pub preserved_rate: f32,
    /// Pixel-weighted combination of the two rates over all pixels.
    pub combined_rate: Option<f32>,
    pub n_target_pixels: u64,
    pub n_nontarget_pixels: u64,
    /// Row = clean prediction, column = adversarial prediction.
    pub per_class_confusion: Vec<Vec<u64>>,
    pub success_mode: SuccessMode,
    /// Displace only: strict rates on the vanish region and the embed mask.
    pub vanish_region_rate: Option<f32>,
    pub embed_region_rate: Option<f32>,
    pub efficiency_ratio: Option<f32>,
    /// Largest `|p|` seen over the split.
    pub max_perturbation: f32,
    pub fingerprint: String,
}

pub const EVAL_BATCH: usize = 8;

/// Full attack pipeline over a split with no parameter updates.
pub fn evaluate_attack(generator: &Model, target: &Model, data: &SampleSet, spec: &AttackSpec, xi: f32) -> Result<MetricsReport> {
    if generator.kind() != ModelKind::GeneratorUNet || target.kind() != ModelKind::TargetFCN {
        return Err(Error::config("evaluate_attack needs a GeneratorUNet and a TargetFCN"));
    }
    let c = target.num_classes();
    if generator.num_classes() != c {
        return Err(Error::config(format!(
            "class-count mismatch: generator {} vs target {c}",
            generator.num_classes()
        )));
    }
    let first = data.labels.first().ok_or_else(|| Error::config("evaluation split is empty"))?;
    let mapper: Mapper = spec.prepare(c, first.height(), first.width())?;
    let mode = spec.effective_mode();

    let mut hasher = Sha256::new();
    hasher.update(generator.checksum().to_le_bytes());
    hasher.update(target.checksum().to_le_bytes());
    hasher.update(serde_json::to_vec(spec).expect("spec serializes"));
    hasher.update(xi.to_le_bytes());

    let mut counts = RateCounts::default();
    let (mut vanish, mut embed) = (RateCounts::default(), RateCounts::default());
    let mut confusion = vec![vec![0u64; c]; c];
    let mut max_p = 0.0f32;
    for start in (0..data.len()).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(data.len());
        let imgs: Vec<&Tensor> = data.images[start..end].iter().collect();
        let batch = stack(&imgs)?;
        for (img, lab) in imgs.iter().zip(&data.labels[start..end]) {
            if lab.data().iter().any(|&l| l as usize >= c) {
                return Err(Error::config(format!("dataset labels exceed the target's {c} classes")));
            }
            for v in img.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        let run = run_attack(generator, target, &batch, xi)?;
        max_p = max_p.max(run.perturbation.max_abs());
        let clean = LabelMap::argmax_batch(&run.clean_logits)?;
        let adv = LabelMap::argmax_batch(&run.adv_logits)?;
        let stealthy = mapper.map(&run.clean_logits)?;
        for ((cl, ad), st) in clean.iter().zip(&adv).zip(&stealthy) {
            counts.add(count_image(cl, ad, st, spec, mode));
            for (&a, &b) in cl.data().iter().zip(ad.data()) {
                confusion[a as usize][b as usize] += 1;
            }
            if spec.attack_type == AttackType::Displace {
                let em = mapper.embed_mask().expect("displace has a mask");
                for (k, &on) in st.mask.bits.iter().enumerate() {
                    if !on {
                        continue;
                    }
                    let region = if em.bits[k] { &mut embed } else { &mut vanish };
                    region.n_target += 1;
                    region.target_hits += (ad.data()[k] == st.labels.data()[k]) as u64;
                }
            }
        }
    }
    let preserved = counts
        .preserved()
        .ok_or_else(|| Error::Contract("preserved rate is undefined: every pixel is targeted".into()))?;
    let displace = spec.attack_type == AttackType::Displace;
    Ok(MetricsReport {
        manipulated_rate: counts.manipulated(),
        preserved_rate: preserved,
        combined_rate: counts.combined(),
        n_target_pixels: counts.n_target,
        n_nontarget_pixels: counts.n_nontarget,
        per_class_confusion: confusion,
        success_mode: mode,
        vanish_region_rate: if displace { vanish.manipulated() } else { None },
        embed_region_rate: if displace { embed.manipulated() } else { None },
        efficiency_ratio: Some(efficiency_ratio(generator, target)),
        max_perturbation: max_p,
        fingerprint: hasher.finalize().iter().map(|b| format!("{b:02x}")).collect(),
    })
}

/// Parameter count of the attack model over that of the target.
pub fn efficiency_ratio(generator: &Model, target: &Model) -> f32 {
    ratio_of_counts(generator.count_params() as u64, target.count_params() as u64) as f32
}

pub fn ratio_of_counts(attack_params: u64, target_params: u64) -> f64 {
    attack_params as f64 / target_params as f64
}

/// Three-decimal display used in reports.
pub fn format_ratio(r: f64) -> String {
    format!("{r:.3}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn lm(v: &[u8]) -> LabelMap {
        LabelMap::new(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn vanish_mode_counts() {
        // 10 target pixels (person=5), 7 of them moved away from the targets
        let spec = AttackSpec::vanish([5]);
        let clean = lm(&[5; 10]);
        let adv = lm(&[0, 1, 2, 0, 1, 2, 0, 5, 5, 5]);
        let st = StealthyLabels {
            labels: lm(&[0; 10]),
            mask: TargetMask {
                height: 1,
                width: 10,
                bits: vec![true; 10],
            },
        };
        assert_eq!(manipulated_rate(&clean, &adv, &st, &spec).unwrap(), Some(0.7));
        assert_eq!(manipulated_rate(&clean, &clean, &st, &spec).unwrap(), Some(0.0));
        let strict = spec.clone().with_success_mode(SuccessMode::Strict);
        assert_eq!(manipulated_rate(&clean, &adv, &st, &strict).unwrap(), Some(0.3));
    }

    #[test]
    fn preserved_counts() {
        let mut bits = vec![false; 100];
        bits[0] = true;
        let mask = TargetMask {
            height: 1,
            width: 100,
            bits,
        };
        let mut clean = vec![0u8; 100];
        clean[0] = 5;
        let mut adv = clean.clone();
        for v in adv.iter_mut().skip(1).take(9) {
            *v = 3;
        }
        let (clean, adv) = (lm(&clean), lm(&adv));
        assert!((preserved_rate(&clean, &adv, &mask).unwrap() - 90.0 / 99.0).abs() < 1e-6);
        assert_eq!(preserved_rate(&clean, &clean, &mask).unwrap(), 1.0);
        assert!(preserved_rate(&clean, &adv, &TargetMask::full(1, 100)).is_err());
    }

    #[test]
    fn empty_mask_gives_no_rate() {
        let spec = AttackSpec::vanish(BTreeSet::from([5]));
        let l = lm(&[0, 1]);
        let st = StealthyLabels {
            labels: l.clone(),
            mask: TargetMask::empty(1, 2),
        };
        assert_eq!(manipulated_rate(&l, &l, &st, &spec).unwrap(), None);
    }

    #[test]
    fn ratio_format() {
        assert_eq!(format_ratio(ratio_of_counts(531_000_000, 269_000_000)), "1.974");
        assert_eq!(format_ratio(ratio_of_counts(7, 7)), "1.000");
    }
}
