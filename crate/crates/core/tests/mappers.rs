//! Stealthy-label mappers against a brute-force per-pixel oracle.

use std::collections::BTreeSet;

use proptest::prelude::*;
use ssat_core::attack::{map_displace, map_embed, map_vanish, StealthyLabels, TargetMask};
use ssat_core::labels::ClassId;
use ssat_core::tensor::Tensor;

const H: usize = 8;
const W: usize = 8;

#[derive(Debug, Clone)]
struct Case {
    n: usize,
    c: usize,
    logits: Vec<f32>,
    targets: BTreeSet<ClassId>,
    fake: ClassId,
    mask: Vec<bool>,
}

fn case() -> impl Strategy<Value = Case> {
    (1usize..=2, 3usize..=8).prop_flat_map(|(n, c)| {
        // Small integer logits make ties common, exercising tie-breaking.
        let logits = prop::collection::vec((-3i8..=3).prop_map(f32::from), n * c * H * W);
        let targets = prop::collection::btree_set(0..c as ClassId, 1..c);
        let mask = prop::collection::vec(any::<bool>(), H * W);
        (logits, targets, mask, any::<prop::sample::Index>()).prop_map(move |(logits, targets, mask, pick)| {
            let others: Vec<ClassId> = (0..c as ClassId).filter(|k| !targets.contains(k)).collect();
            let fake = others[pick.index(others.len())];
            Case { n, c, logits, targets, fake, mask }
        })
    })
}

/// First index of the maximum among `allowed` classes at one pixel.
fn argmax(case: &Case, img: usize, px: usize, allowed: impl Fn(ClassId) -> bool) -> ClassId {
    let mut best: Option<(ClassId, f32)> = None;
    for k in 0..case.c {
        let k8 = k as ClassId;
        if !allowed(k8) {
            continue;
        }
        let v = case.logits[(img * case.c + k) * H * W + px];
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((k8, v));
        }
    }
    best.expect("at least one allowed class").0
}

fn tensor(case: &Case) -> Tensor {
    Tensor::new(&[case.n, case.c, H, W], case.logits.clone()).unwrap()
}

fn mask(case: &Case) -> TargetMask {
    TargetMask {
        height: H,
        width: W,
        bits: case.mask.clone(),
    }
}

fn oracle_vanish(case: &Case, img: usize) -> (Vec<ClassId>, Vec<bool>) {
    (0..H * W)
        .map(|px| {
            let clean = argmax(case, img, px, |_| true);
            if case.targets.contains(&clean) {
                (argmax(case, img, px, |k| !case.targets.contains(&k)), true)
            } else {
                (clean, false)
            }
        })
        .unzip()
}

fn oracle_embed(case: &Case, img: usize) -> Vec<ClassId> {
    (0..H * W)
        .map(|px| if case.mask[px] { case.fake } else { argmax(case, img, px, |_| true) })
        .collect()
}

fn assert_labels(s: &StealthyLabels, labels: &[ClassId], bits: &[bool]) {
    assert_eq!(s.labels.data(), labels);
    assert_eq!(s.mask.bits, bits);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn vanish_matches_oracle(case in case()) {
        let out = map_vanish(&tensor(&case), &case.targets).unwrap();
        for (img, s) in out.iter().enumerate() {
            let (labels, bits) = oracle_vanish(&case, img);
            assert_labels(s, &labels, &bits);
            prop_assert!(s.labels.data().iter().all(|l| !case.targets.contains(l)));
            for px in 0..H * W {
                if !bits[px] {
                    prop_assert_eq!(s.labels.data()[px], argmax(&case, img, px, |_| true));
                }
            }
        }
    }

    #[test]
    fn embed_matches_oracle(case in case()) {
        let out = map_embed(&tensor(&case), &mask(&case), case.fake).unwrap();
        for (img, s) in out.iter().enumerate() {
            assert_labels(s, &oracle_embed(&case, img), &case.mask);
        }
    }

    #[test]
    fn displace_matches_oracle(case in case()) {
        let out = map_displace(&tensor(&case), &case.targets, &mask(&case), case.fake).unwrap();
        for (img, s) in out.iter().enumerate() {
            let (mut labels, mut bits) = oracle_vanish(&case, img);
            for px in 0..H * W {
                if case.mask[px] {
                    labels[px] = case.fake;
                    bits[px] = true;
                }
            }
            assert_labels(s, &labels, &bits);
            for px in 0..H * W {
                if !bits[px] {
                    prop_assert_eq!(labels[px], argmax(&case, img, px, |_| true));
                }
            }
        }
    }

    /// With the embed mask kept off the vanish support, displacing equals
    /// embedding into the vanished labels.
    #[test]
    fn displace_is_composition_on_disjoint_support(case in case()) {
        let logits = tensor(&case);
        let vanished = map_vanish(&logits, &case.targets).unwrap();
        for (img, v) in vanished.iter().enumerate() {
            let disjoint: Vec<bool> = case.mask.iter().zip(&v.mask.bits).map(|(&m, &t)| m && !t).collect();
            let m = TargetMask { height: H, width: W, bits: disjoint.clone() };
            let single = Case {
                n: 1,
                logits: case.logits[img * case.c * H * W..(img + 1) * case.c * H * W].to_vec(),
                ..case.clone()
            };
            let d = map_displace(&tensor(&single), &case.targets, &m, case.fake).unwrap();
            let mut composed = v.labels.data().to_vec();
            for px in 0..H * W {
                if disjoint[px] {
                    composed[px] = case.fake;
                }
            }
            prop_assert_eq!(d[0].labels.data(), &composed[..]);
        }
    }
}
