//! Finite-difference check of the whole attack objective with respect to
//! the generator's parameters, through the frozen target.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{adversarial_loss, apply_perturbation, map_vanish, regularizer_loss, scale_perturbation, total_loss};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::nets::{Model, ModelConfig};
use crate::tensor::{GradCheckCase, Graph, Tensor, Var};

/// Entries sampled from each checked tensor.
const ENTRIES_PER_TENSOR: usize = 6;

struct Setup {
    generator: Model,
    target: Model,
    images: Tensor<f64>,
    truth: Vec<LabelMap>,
}

fn loss(g: &mut Graph<f64>, s: &Setup, param: &str, value: Var) -> Result<Var> {
    let gp = s.generator.bind_with(g, param, value);
    let tp = s.target.bind(g, false);
    let x = g.constant(s.images.clone());
    let out = s.generator.forward_generator(g, &gp, x)?;
    let p = scale_perturbation(g, out.raw_perturbation, 10.0)?;
    let xa = apply_perturbation(g, x, p)?;
    let adv = s.target.forward_target(g, &tp, xa)?;
    let clean = s.target.forward_target(g, &tp, x)?;
    let stealthy = map_vanish(g.value(clean), &[5].into_iter().collect())?;
    let adv_loss = adversarial_loss(g, adv, &stealthy, 1.0, 1.0)?;
    let reg_logits = out
        .regularizer_logits
        .ok_or_else(|| Error::Contract("generator has no regularizer head".into()))?;
    let reg = regularizer_loss(g, reg_logits, &s.truth)?;
    total_loss(g, adv_loss, Some(reg), 1e-2)
}

/// Differentiates `total_loss(adversarial + lambda0 * regularizer)` with
/// respect to the first, a middle, and the last generator tensors, and
/// compares sampled entries against central differences.
///
/// Small networks (base width 4) on one 16x16 image keep this fast. Image
/// values stay in [40, 215] so the [0, 255] clamp never engages under
/// xi = 10.
pub fn composite_suite(seed: u64) -> Result<Vec<GradCheckCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(300));
    let mut target = Model::build(ModelConfig::target(8, seed).with_base_width(4))?;
    target.freeze();
    let generator = Model::build(ModelConfig::generator(8, seed.wrapping_add(50)).with_base_width(4))?;
    let images = Tensor::new(&[1, 3, 16, 16], (0..768).map(|_| rng.random_range(40.0..215.0)).collect())?;
    let truth = vec![LabelMap::new(16, 16, (0..256).map(|_| rng.random_range(0..8u8)).collect())?];
    let s = Setup {
        generator,
        target,
        images,
        truth,
    };

    let names: Vec<String> = s.generator.params().keys().cloned().collect();
    let picks = [0, 1, names.len() / 2, names.len() - 1];
    let mut cases = Vec::new();
    for &k in &picks {
        let name = &names[k];
        let base = s.generator.param(name)?.cast::<f64>();
        let mut g = Graph::<f64>::new();
        let v = g.param(base.clone());
        let l = loss(&mut g, &s, name, v)?;
        g.backward(l)?;
        let analytic = g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; base.numel()]);
        let eval = |i: usize, delta: f64| -> Result<f64> {
            let mut t = base.clone();
            t.data_mut()[i] += delta;
            let mut g = Graph::<f64>::new();
            let v = g.constant(t);
            let l = loss(&mut g, &s, name, v)?;
            Ok(g.value(l).item())
        };
        let stride = (base.numel() / ENTRIES_PER_TENSOR).max(1);
        let mut worst = 0.0f64;
        for i in (0..base.numel()).step_by(stride) {
            let eps = 1e-5;
            let numeric = (eval(i, eps)? - eval(i, -eps)?) / (2.0 * eps);
            let a = analytic[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8));
        }
        cases.push(GradCheckCase {
            name: format!("generator->target->loss d/d {name}"),
            shape: base.shape().to_vec(),
            seed,
            rel_error: worst,
        });
    }
    Ok(cases)
}
