use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ssat_core::attack::apply_perturbation;
use ssat_core::nets::{Model, ModelConfig};
use ssat_core::scenes::{SampleSet, SceneConfig};
use ssat_core::tensor::{stack, Graph, Tensor};

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_fwd_bwd");
    for &ch in &[16usize, 32] {
        let x = Tensor::full(&[8, ch, 32, 32], 0.5f32);
        let w = Tensor::full(&[ch, ch, 3, 3], 0.01f32);
        let b = Tensor::zeros(&[ch]);
        group.bench_with_input(BenchmarkId::from_parameter(ch), &ch, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::<f32>::new();
                let xv = g.leaf(x.clone());
                let wv = g.param(w.clone());
                let bv = g.param(b.clone());
                let y = g.conv2d(xv, wv, bv, 1, 1).unwrap();
                let s = g.sum(y);
                g.backward(s).unwrap();
            })
        });
    }
    group.finish();
}

fn models(c: &mut Criterion) {
    let data = SampleSet::generate(&SceneConfig::default(), 0..8).unwrap();
    let imgs: Vec<&Tensor> = data.images.iter().collect();
    let batch = stack(&imgs).unwrap();
    let mut target = Model::build(ModelConfig::target(8, 0)).unwrap();
    target.freeze();
    let generator = Model::build(ModelConfig::generator(8, 0)).unwrap();

    c.bench_function("target_predict_batch8", |b| b.iter(|| target.predict_logits(&batch).unwrap()));
    c.bench_function("attack_step_batch8", |b| {
        b.iter(|| {
            let mut g = Graph::<f32>::new();
            let gp = generator.bind(&mut g, true);
            let tp = target.bind(&mut g, false);
            let x = g.constant(batch.clone());
            let out = generator.forward_generator(&mut g, &gp, x).unwrap();
            let p = g.tanh(out.raw_perturbation);
            let p = g.scale(p, 10.0);
            let xa = apply_perturbation(&mut g, x, p).unwrap();
            let logits = target.forward_target(&mut g, &tp, xa).unwrap();
            let s = g.sum(logits);
            g.backward(s).unwrap();
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv, models
}
criterion_main!(benches);
