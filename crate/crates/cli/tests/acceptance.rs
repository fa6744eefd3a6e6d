//! Acceptance suite. Prints one PASS/FAIL line per criterion. Failures
//! only change the exit status with `SSAT_ACCEPTANCE_STRICT=1`, so a red
//! criterion does not stop `cargo test` from running the other targets.
//!
//! Set `SSAT_ACCEPTANCE=1,4,11` to run a subset. Criteria 5, 7, 8, 9 and 10
//! reuse the desk benchmark's dataset and target, so selecting any of them
//! also runs criterion 6.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssat_cli::{cmd_attack, cmd_eval, run_recipe, EvalNames, RunConfig, GENERATOR_CKPT, TARGET_CKPT};
use ssat_core::attack::gradcheck::composite_suite;
use ssat_core::attack::{
    adversarial_loss, apply_perturbation, map_displace, map_embed, map_vanish, pretrain_target, scale_perturbation,
    train_attack, AttackSpec, AttackTrainConfig, PretrainConfig, StealthyLabels, TargetMask,
};
use ssat_core::eval::{efficiency_ratio, evaluate_attack, format_ratio, ratio_of_counts};
use ssat_core::labels::{ClassId, LabelMap};
use ssat_core::nets::{load_checkpoint, Model, ModelConfig};
use ssat_core::scenes::{Dataset, SampleSet, SceneConfig, Split, Style, PERSON, RIDER};
use ssat_core::tensor::{primitive_suite, Graph, Tensor};

type Outcome = Result<String, String>;

/// Short training recipe shared by criteria 7 to 10: the first
/// `QUICK_TRAIN` desk training images, `QUICK_TEST` test images.
const QUICK_TRAIN: usize = 300;
const QUICK_TEST: usize = 100;
const QUICK_EPOCHS: usize = 6;
const QUICK_LR: f32 = 1e-4;

// Desk benchmark regression bounds, frozen from the calibration run
// (accuracy 0.988, Type #1 0.743 / 0.998, Type #2 0.865).
const MIN_ACC: f32 = 0.97;
const MIN_TYPE1: f32 = 0.70;
const MIN_PRESERVED: f32 = 0.95;
const MIN_TYPE2: f32 = 0.80;
const BUDGET: Duration = Duration::from_secs(30 * 60);

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- 1

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    let mut n = 0;
    for seed in 1..=5 {
        for c in primitive_suite(seed).map_err(err)?.into_iter().chain(composite_suite(seed).map_err(err)?) {
            n += 1;
            if c.rel_error > worst.0 {
                worst = (c.rel_error, format!("{} {:?} seed {}", c.name, c.shape, c.seed));
            }
        }
    }
    let t = start.elapsed();
    let detail = format!("{n} checks over 5 seeds, worst rel err {:.2e} ({}), {:.1}s", worst.0, worst.1, t.as_secs_f64());
    ensure(worst.0 < 1e-3 && t < Duration::from_secs(60), detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 2

fn loss_oracle() -> Outcome {
    const W_T: f64 = 2.5;
    const W_NT: f64 = 0.75;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst, mut largest) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let (n, c, h, w) = (rng.random_range(1..=3), rng.random_range(2..=8), rng.random_range(1..=8), rng.random_range(1..=8));
        let m = h * w;
        let logits: Vec<f64> = (0..n * c * m).map(|_| rng.random_range(-8.0..8.0)).collect();
        let mut stealthy = Vec::new();
        for _ in 0..n {
            let labels = LabelMap::new(h, w, (0..m).map(|_| rng.random_range(0..c as u8)).collect()).map_err(err)?;
            let bits = (0..m).map(|_| rng.random_bool(0.4)).collect();
            stealthy.push(StealthyLabels {
                labels,
                mask: TargetMask { height: h, width: w, bits },
            });
        }
        let mut want = 0.0;
        for (i, s) in stealthy.iter().enumerate() {
            for p in 0..m {
                let z = |k: usize| logits[(i * c + k) * m + p];
                let max = (0..c).map(z).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..c).map(|k| (z(k) - max).exp()).sum::<f64>().ln();
                let w = if s.mask.bits[p] { W_T } else { W_NT };
                want += w * (lse - z(s.labels.data()[p] as usize));
            }
        }
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[n, c, h, w], logits).map_err(err)?);
        let l = adversarial_loss(&mut g, x, &stealthy, W_T as f32, W_NT as f32).map_err(err)?;
        worst = worst.max((g.value(l).item() - want).abs());
        largest = largest.max(want);
    }
    ensure(worst < 1e-6, format!("max abs difference {worst:.2e}"))?;
    Ok(format!("100 instances (losses up to {largest:.1}), max abs difference {worst:.2e}"))
}

// ---------------------------------------------------------------- 3

fn xi_bound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut outputs = 0;
    let mut worst_ratio = 0.0f32;
    for (k, &xi) in [4.0f32, 6.0, 8.0, 10.0].iter().enumerate() {
        for gseed in 0..5u64 {
            let mut gen = Model::build(ModelConfig::generator(8, 10 * k as u64 + gseed).with_base_width(4)).map_err(err)?;
            // Head gains from 1 to 10^4 cover linear through fully saturated tanh.
            let gain = 10f32.powi(gseed as i32 - 1).max(1.0);
            for v in gen.param_mut("pert_head.weight").map_err(err)?.data_mut() {
                *v *= gain;
            }
            for _ in 0..5 {
                // Ten 16x16 images per batch, with pixels pinned at 0 and 255.
                let data: Vec<f32> = (0..10 * 3 * 16 * 16)
                    .map(|_| match rng.random_range(0..4) {
                        0 => 0.0,
                        1 => 255.0,
                        _ => rng.random_range(0..=255) as f32,
                    })
                    .collect();
                let images = Tensor::new(&[10, 3, 16, 16], data).map_err(err)?;
                let mut g = Graph::<f32>::new();
                let gp = gen.bind(&mut g, false);
                let x = g.constant(images);
                let out = gen.forward_generator(&mut g, &gp, x).map_err(err)?;
                let p = scale_perturbation(&mut g, out.raw_perturbation, xi).map_err(err)?;
                let xa = apply_perturbation(&mut g, x, p).map_err(err)?;
                let pv = g.value(p);
                let per = pv.numel() / 10;
                for i in 0..10 {
                    let m = pv.data()[i * per..(i + 1) * per].iter().fold(0.0f32, |a, v| a.max(v.abs()));
                    ensure(m <= xi, format!("|p| = {m} exceeds xi = {xi}"))?;
                    worst_ratio = worst_ratio.max(m / xi);
                    outputs += 1;
                }
                ensure(g.value(xa).data().iter().all(|v| (0.0..=255.0).contains(v)), "adversarial pixel outside [0, 255]")?;
            }
        }
    }
    ensure(outputs >= 1000, format!("only {outputs} outputs"))?;
    Ok(format!("{outputs} generator outputs, max |p|/xi = {worst_ratio:.6}, all pixels in [0, 255]"))
}

// ---------------------------------------------------------------- 4

fn mapper_properties() -> Outcome {
    const H: usize = 8;
    const W: usize = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..1000 {
        let c = rng.random_range(3..=8usize);
        // Integer logits produce frequent ties.
        let logits: Vec<f32> = (0..c * H * W).map(|_| rng.random_range(-3..=3) as f32).collect();
        let t = Tensor::new(&[1, c, H, W], logits.clone()).map_err(err)?;
        let ntargets = rng.random_range(1..c);
        let mut classes: Vec<ClassId> = (0..c as ClassId).collect();
        let mut targets = BTreeSet::new();
        while targets.len() < ntargets {
            targets.insert(classes[rng.random_range(0..classes.len())]);
        }
        classes.retain(|k| !targets.contains(k));
        let fake = classes[rng.random_range(0..classes.len())];
        let bits: Vec<bool> = (0..H * W).map(|_| rng.random_bool(0.3)).collect();
        let mask = TargetMask { height: H, width: W, bits: bits.clone() };

        // Brute-force oracle: first maximum among allowed classes.
        let argmax = |px: usize, allow: &dyn Fn(ClassId) -> bool| -> ClassId {
            let mut best: Option<(ClassId, f32)> = None;
            for k in 0..c {
                let v = logits[k * H * W + px];
                if allow(k as ClassId) && best.map_or(true, |(_, b)| v > b) {
                    best = Some((k as ClassId, v));
                }
            }
            best.unwrap().0
        };
        let clean: Vec<ClassId> = (0..H * W).map(|px| argmax(px, &|_| true)).collect();
        let on_target: Vec<bool> = clean.iter().map(|k| targets.contains(k)).collect();
        let vanish: Vec<ClassId> = (0..H * W)
            .map(|px| if on_target[px] { argmax(px, &|k| !targets.contains(&k)) } else { clean[px] })
            .collect();
        let embed: Vec<ClassId> = (0..H * W).map(|px| if bits[px] { fake } else { clean[px] }).collect();
        let displace: Vec<ClassId> = (0..H * W).map(|px| if bits[px] { fake } else { vanish[px] }).collect();

        let v = &map_vanish(&t, &targets).map_err(err)?[0];
        let e = &map_embed(&t, &mask, fake).map_err(err)?[0];
        let d = &map_displace(&t, &targets, &mask, fake).map_err(err)?[0];
        let fail = |what: &str| format!("case {case}: {what}");
        ensure(v.labels.data() == vanish.as_slice() && v.mask.bits == on_target, fail("vanish differs from oracle"))?;
        ensure(v.labels.data().iter().all(|k| !targets.contains(k)), fail("vanish kept a target label"))?;
        ensure(e.labels.data() == embed.as_slice() && e.mask.bits == bits, fail("embed differs from oracle"))?;
        ensure(d.labels.data() == displace.as_slice(), fail("displace differs from oracle"))?;
        for (s, m) in [(v, &v.mask.bits), (e, &e.mask.bits), (d, &d.mask.bits)] {
            for px in 0..H * W {
                ensure(m[px] || s.labels.data()[px] == clean[px], fail("off-mask pixel changed"))?;
            }
        }
        // Composition on disjoint supports.
        let disjoint: Vec<bool> = bits.iter().zip(&on_target).map(|(&b, &o)| b && !o).collect();
        let dm = TargetMask { height: H, width: W, bits: disjoint.clone() };
        let dd = &map_displace(&t, &targets, &dm, fake).map_err(err)?[0];
        let composed = &map_embed(&Tensor::new(&[1, c, H, W], logits.clone()).map_err(err)?, &dm, fake).map_err(err)?[0];
        let expect: Vec<ClassId> = (0..H * W).map(|px| if disjoint[px] { composed.labels.data()[px] } else { vanish[px] }).collect();
        ensure(dd.labels.data() == expect.as_slice(), fail("displace is not embed-after-vanish on disjoint support"))?;
    }
    Ok("1000 random 8x8 cases agree with the brute-force oracle".into())
}

// ---------------------------------------------------------------- 6

struct Desk {
    _dir: tempfile::TempDir,
    target: Model,
    generator: Model,
    train: SampleSet,
    test: SampleSet,
}

fn desk_benchmark() -> Result<(Desk, String), String> {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(err)?;
    let root = dir.path().to_path_buf();
    let cfg = RunConfig {
        output_dir: root.clone(),
        ..RunConfig::desk_benchmark()
    };
    let out = run_recipe(&cfg).map_err(err)?;
    let data = root.join("data");
    let target_ckpt = root.join("target").join(TARGET_CKPT);

    let embed_cfg = RunConfig {
        attack_spec: AttackSpec::embed(PERSON, RunConfig::desk_embed_mask()),
        ..cfg.clone().resolved()
    };
    let edir = root.join("embed");
    cmd_attack(&embed_cfg, &data, &target_ckpt, &edir).map_err(err)?;
    let names = EvalNames {
        experiment_id: "desk-embed".into(),
        generator: "embed/generator.ckpt".into(),
        target: "target/target.ckpt".into(),
        dataset: "data".into(),
        seed: 42,
    };
    let embed = cmd_eval(
        &edir.join(GENERATOR_CKPT),
        &target_ckpt,
        &data,
        &embed_cfg.attack_spec,
        10.0,
        &embed_cfg.eval,
        &names,
        &edir,
    )
    .map_err(err)?;
    let elapsed = start.elapsed();

    let t1 = out.report.manipulated_rate.unwrap_or(0.0);
    let p1 = out.report.preserved_rate;
    let t2 = embed.manipulated_rate.unwrap_or(0.0);
    let detail = format!(
        "acc {:.4}; Type #1 manipulated {t1:.4} preserved {p1:.4}; Type #2 manipulated {t2:.4} preserved {:.4}; {:.1} min",
        out.test_pixel_acc,
        embed.preserved_rate,
        elapsed.as_secs_f64() / 60.0
    );
    let mut problems = String::new();
    for (ok, what) in [
        (out.test_pixel_acc >= 0.90, "accuracy < 0.90"),
        (t1 >= 0.50, "Type #1 manipulated < 0.50"),
        (p1 >= 0.80, "Type #1 preserved < 0.80"),
        (t2 >= t1, "Type #2 below Type #1"),
        (elapsed <= BUDGET, "over the 30 min budget"),
        (out.test_pixel_acc >= MIN_ACC, "accuracy regressed"),
        (t1 >= MIN_TYPE1, "Type #1 regressed"),
        (p1 >= MIN_PRESERVED, "preserved regressed"),
        (t2 >= MIN_TYPE2, "Type #2 regressed"),
    ] {
        if !ok {
            let _ = write!(problems, "; {what}");
        }
    }
    let ds = Dataset::open(&data).map_err(err)?;
    let mut target = load_checkpoint(&target_ckpt).map_err(err)?;
    target.freeze();
    let desk = Desk {
        target,
        generator: load_checkpoint(&root.join("attack").join(GENERATOR_CKPT)).map_err(err)?,
        train: ds.load_split(Split::Train).map_err(err)?,
        test: ds.load_split(Split::Test).map_err(err)?,
        _dir: dir,
    };
    if problems.is_empty() {
        Ok((desk, detail))
    } else {
        Err(format!("{detail}{problems}"))
    }
}

// ---------------------------------------------------------------- 5

fn zero_perturbation(desk: &Desk) -> Outcome {
    let mut gen = desk.generator.clone();
    for name in ["pert_head.weight", "pert_head.bias"] {
        gen.param_mut(name).map_err(err)?.data_mut().fill(0.0);
    }
    let spec = AttackSpec::vanish([PERSON, RIDER]);
    let mut lines = Vec::new();
    for (name, split) in [("train", &desk.train), ("test", &desk.test)] {
        let r = evaluate_attack(&gen, &desk.target, split, &spec, 10.0).map_err(err)?;
        ensure(
            r.preserved_rate == 1.0 && r.manipulated_rate == Some(0.0),
            format!("{name}: preserved {} manipulated {:?}", r.preserved_rate, r.manipulated_rate),
        )?;
        lines.push(format!("{name} preserved 1.0 manipulated 0.0 over {} target px", r.n_target_pixels));
    }
    Ok(lines.join("; "))
}

// ---------------------------------------------------------------- 7-10

fn head(set: &SampleSet, n: usize) -> SampleSet {
    SampleSet {
        images: set.images[..n].to_vec(),
        labels: set.labels[..n].to_vec(),
    }
}

fn quick_attack(target: &Model, train: &SampleSet, test: &SampleSet, seed: u64, lambda0: f32, xi: f32, width: f32) -> Result<(Model, f32), String> {
    let spec = AttackSpec::vanish([PERSON, RIDER]);
    let cfg = AttackTrainConfig {
        lr: QUICK_LR,
        epochs: QUICK_EPOCHS,
        lambda0,
        xi,
        seed,
        ..AttackTrainConfig::default()
    };
    let gen = Model::build(ModelConfig::generator(8, seed).with_width_multiplier(width)).map_err(err)?;
    let (gen, _) = train_attack(gen, target, train, &spec, &cfg).map_err(err)?;
    let r = evaluate_attack(&gen, target, test, &spec, xi).map_err(err)?;
    Ok((gen, r.manipulated_rate.unwrap_or(0.0)))
}

fn ablation(desk: &Desk) -> Outcome {
    let (train, test) = (head(&desk.train, QUICK_TRAIN), head(&desk.test, QUICK_TEST));
    let (mut with, mut without) = (Vec::new(), Vec::new());
    for seed in [1, 2, 3] {
        with.push(quick_attack(&desk.target, &train, &test, seed, 1e-2, 10.0, 1.0)?.1);
        without.push(quick_attack(&desk.target, &train, &test, seed, 0.0, 10.0, 1.0)?.1);
    }
    let mean = |v: &[f32]| v.iter().sum::<f32>() / v.len() as f32;
    let detail = format!("lambda0=1e-2 {with:.4?} mean {:.4}; lambda0=0 {without:.4?} mean {:.4}", mean(&with), mean(&without));
    ensure(mean(&with) > mean(&without), detail.clone())?;
    Ok(detail)
}

fn xi_sweep(desk: &Desk) -> Outcome {
    let (train, test) = (head(&desk.train, QUICK_TRAIN), head(&desk.test, QUICK_TEST));
    let mut rates = Vec::new();
    for xi in [4.0, 6.0, 8.0, 10.0] {
        rates.push(quick_attack(&desk.target, &train, &test, 1, 1e-2, xi, 1.0)?.1);
    }
    let detail = format!("xi 4/6/8/10 -> {rates:.4?}");
    ensure(rates.windows(2).all(|w| w[1] >= w[0] - 0.02), detail.clone())?;
    Ok(detail)
}

fn cross_style(desk: &Desk) -> Outcome {
    // One target and one dataset per style, all trained the same way.
    // Style A reuses the head of the desk data.
    let mut pairs: Vec<(Model, SampleSet, SampleSet)> = Vec::new();
    for style in Style::ALL {
        let (train, test) = if style == Style::A {
            (head(&desk.train, QUICK_TRAIN), head(&desk.test, QUICK_TEST))
        } else {
            let cfg = SceneConfig::default().with_style(style).with_seed(42);
            let n = QUICK_TRAIN as u64;
            (
                SampleSet::generate(&cfg, 0..n).map_err(err)?,
                SampleSet::generate(&cfg, n..n + QUICK_TEST as u64).map_err(err)?,
            )
        };
        let pre = PretrainConfig {
            epochs: 8,
            seed: 42,
            ..PretrainConfig::default()
        };
        let target = pretrain_target(&ModelConfig::target(8, 42), &train, &test, &pre).map_err(err)?.model;
        pairs.push((target, train, test));
    }
    let spec = AttackSpec::vanish([PERSON, RIDER]);
    let mut grid = [[0.0f32; 3]; 3];
    for seed in [1, 2, 3] {
        for (i, (target, train, test)) in pairs.iter().enumerate() {
            let (gen, _) = quick_attack(target, train, test, seed, 1e-2, 10.0, 1.0)?;
            for (j, (t2, _, test2)) in pairs.iter().enumerate() {
                let r = evaluate_attack(&gen, t2, test2, &spec, 10.0).map_err(err)?;
                grid[i][j] += r.manipulated_rate.unwrap_or(0.0) / 3.0;
            }
        }
    }
    let rows: Vec<String> = grid.iter().map(|r| format!("[{:.3} {:.3} {:.3}]", r[0], r[1], r[2])).collect();
    let detail = format!("mean over 3 seeds, rows = generator style A/B/C: {}", rows.join(" "));
    for (i, row) in grid.iter().enumerate() {
        let off = (row.iter().sum::<f32>() - row[i]) / 2.0;
        ensure(row[i] >= off, format!("{detail}; row {i} diagonal below off-diagonal mean"))?;
    }
    Ok(detail)
}

/// Closed-form parameter counts. `c[l]` is the width at encoder level l.
fn target_params(c: [usize; 4], cin: usize, k: usize) -> usize {
    let conv = |i: usize, o: usize, ks: usize| i * o * ks * ks + o;
    conv(cin, c[0], 3) + conv(c[0], c[1], 3) + conv(c[1], c[2], 3) + conv(c[2], c[3], 3)
        + conv(c[3], c[2], 1) + conv(c[2], c[1], 1) + conv(c[1], c[0], 1) + conv(c[0], k, 1)
}

fn generator_params(c: [usize; 4], cin: usize, k: usize, reg: bool) -> usize {
    let conv = |i: usize, o: usize, ks: usize| i * o * ks * ks + o;
    conv(cin, c[0], 3) + conv(c[0], c[1], 3) + conv(c[1], c[2], 3) + conv(c[2], c[2], 3)
        + conv(2 * c[2], c[2], 1) + conv(c[2] + c[1], c[1], 1) + conv(c[1] + c[0], c[0], 1) + conv(c[0], 3, 1)
        + if reg { conv(c[0], k, 1) } else { 0 }
}

fn efficiency(desk: &Desk) -> Outcome {
    for (base, mult, k) in [(16usize, 1.0f32, 8usize), (8, 0.5, 5), (16, 0.25, 19), (12, 1.5, 8)] {
        let w = |l: u32| (((base as f64) * f64::from(1u32 << l) * mult as f64).round() as usize).max(4);
        let c = [w(0), w(1), w(2), w(3)];
        let t = Model::build(ModelConfig::target(k, 0).with_base_width(base).with_width_multiplier(mult)).map_err(err)?;
        let g = Model::build(ModelConfig::generator(k, 0).with_base_width(base).with_width_multiplier(mult)).map_err(err)?;
        ensure(t.count_params() == target_params(c, 3, k), format!("target count {} for {c:?}", t.count_params()))?;
        ensure(g.count_params() == generator_params(c, 3, k, true), format!("generator count {} for {c:?}", g.count_params()))?;
    }
    let default_t = target_params([16, 32, 64, 128], 3, 8);
    let default_g = generator_params([16, 32, 64, 128], 3, 8, true);
    ensure((default_t, default_g) == (108_440, 72_843), "default counts changed")?;
    let formatted = format_ratio(ratio_of_counts(531_000_000, 269_000_000));
    ensure(formatted == "1.974", format!("ratio formats as {formatted}"))?;

    let (train, test) = (head(&desk.train, QUICK_TRAIN), head(&desk.test, QUICK_TEST));
    let mut rows = Vec::new();
    for width in [1.0, 0.5, 0.25] {
        let (gen, rate) = quick_attack(&desk.target, &train, &test, 1, 1e-2, 10.0, width)?;
        rows.push((width, efficiency_ratio(&gen, &desk.target), rate));
    }
    let detail = format!(
        "counts match formulas; 531M/269M -> {formatted}; width/ratio/manipulated {}",
        rows.iter().map(|(w, r, m)| format!("{w}:{r:.3}:{m:.4}")).collect::<Vec<_>>().join(" ")
    );
    ensure(rows.windows(2).all(|p| p[1].1 < p[0].1 && p[1].2 < p[0].2), detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 11

fn determinism() -> Outcome {
    let base = |dir: &Path| RunConfig {
        scene_config: SceneConfig {
            width: 32,
            height: 32,
            ..SceneConfig::default()
        },
        n_train: 16,
        n_test: 8,
        target_model: ModelConfig::target(8, 0).with_base_width(8),
        generator_model: ModelConfig::generator(8, 0).with_base_width(8),
        pretrain: PretrainConfig {
            epochs: 2,
            ..PretrainConfig::default()
        },
        attack_spec: AttackSpec::displace([PERSON], RIDER, RunConfig::desk_embed_mask()),
        train_config: AttackTrainConfig {
            epochs: 2,
            ..AttackTrainConfig::default()
        },
        eval: Default::default(),
        output_dir: dir.to_path_buf(),
        seed: Some(11),
    };
    let (a, b) = (tempfile::tempdir().map_err(err)?, tempfile::tempdir().map_err(err)?);
    let ra = run_recipe(&base(a.path())).map_err(err)?;
    let rb = run_recipe(&base(b.path())).map_err(err)?;
    let mut n = 0;
    for (pa, pb) in ra.artifacts().iter().zip(rb.artifacts()) {
        let (x, y) = (std::fs::read(pa).map_err(err)?, std::fs::read(&pb).map_err(err)?);
        ensure(x == y, format!("{} differs between runs", pa.strip_prefix(a.path()).unwrap_or(pa).display()))?;
        n += 1;
    }
    ensure(ra.report.fingerprint == rb.report.fingerprint, "metric fingerprints differ")?;
    Ok(format!("{n} artifacts (manifest, checkpoints, sidecars, CSVs) byte-identical across two runs"))
}

// ----------------------------------------------------------------

const NAMES: [&str; 11] = [
    "gradient suite",
    "loss oracle",
    "xi bound",
    "mapper properties",
    "zero-perturbation identity",
    "desk benchmark",
    "regularizer ablation",
    "xi sweep",
    "cross-style grid",
    "efficiency",
    "determinism",
];

fn main() {
    let selected: BTreeSet<usize> = match std::env::var("SSAT_ACCEPTANCE") {
        Ok(v) if !v.trim().is_empty() => v.split(',').filter_map(|s| s.trim().parse().ok()).collect(),
        _ => (1..=11).collect(),
    };
    let started = Instant::now();
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut report = |id: usize, o: Outcome| {
        let (tag, text) = match &o {
            Ok(d) => ("PASS", d.clone()),
            Err(e) => ("FAIL", e.clone()),
        };
        println!("criterion {id:>2} {tag}  {}: {text}", NAMES[id - 1]);
        results.push((id, o));
    };

    let quick: [(usize, fn() -> Outcome); 4] = [(1, gradient_suite), (2, loss_oracle), (3, xi_bound), (4, mapper_properties)];
    for (id, f) in quick {
        if selected.contains(&id) {
            report(id, f());
        }
    }
    let needs_desk = [5, 6, 7, 8, 9, 10].iter().any(|i| selected.contains(i));
    if needs_desk {
        match desk_benchmark() {
            Ok((desk, detail)) => {
                report(6, Ok(detail));
                let later: [(usize, fn(&Desk) -> Outcome); 5] =
                    [(5, zero_perturbation), (7, ablation), (8, xi_sweep), (9, cross_style), (10, efficiency)];
                for (id, f) in later {
                    if selected.contains(&id) {
                        report(id, f(&desk));
                    }
                }
            }
            Err(e) => {
                report(6, Err(e));
                for id in [5, 7, 8, 9, 10] {
                    if selected.contains(&id) {
                        report(id, Err("skipped: desk benchmark did not produce a target".into()));
                    }
                }
            }
        }
    }
    if selected.contains(&11) {
        report(11, determinism());
    }

    results.sort_by_key(|r| r.0);
    let failed: Vec<usize> = results.iter().filter(|r| r.1.is_err()).map(|r| r.0).collect();
    println!(
        "acceptance: {} passed, {} failed in {:.1} min",
        results.len() - failed.len(),
        failed.len(),
        started.elapsed().as_secs_f64() / 60.0
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        if std::env::var("SSAT_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}
