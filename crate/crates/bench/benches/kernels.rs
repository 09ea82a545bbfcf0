use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use discovla_core::alignment::fine_grained_image_similarity;
use discovla_core::data::Batch;
use discovla_core::encoders::{AttentionScheme, BlockWeights, FrameTokens, FusionAdapter, LayerParams, Mode};
use discovla_core::train::{build_model, objective_graph, prepare_corpus, AdamW, RunConfig};
use discovla_core::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let d = 64;
    let layer = LayerParams {
        block: BlockWeights::random(d, 4, &mut rng),
        heads: 4,
        lora: None,
        adapter: Some(FusionAdapter::new(Tensor::randn([d, 8], 0.1, &mut rng), Tensor::randn([8, d], 0.1, &mut rng)).unwrap()),
    };
    let x = FrameTokens::new(Tensor::randn([12, 17, d], 1.0, &mut rng)).unwrap();
    let mut group = c.benchmark_group("attention_f12_n16");
    for (name, scheme) in [
        ("image_level", AttentionScheme::ImageLevel),
        ("video_level", AttentionScheme::VideoLevel),
        ("ivfusion", AttentionScheme::IvFusion),
    ] {
        group.bench_function(name, |b| b.iter(|| layer.apply(black_box(&x), scheme, None).unwrap()));
    }
    group.finish();
}

fn unit(rng: &mut ChaCha8Rng, shape: [usize; 3]) -> Tensor {
    let mut t = Tensor::randn(shape, 1.0, rng);
    let e = shape[2];
    for row in t.data_mut().chunks_mut(e) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= n);
    }
    t
}

fn similarity(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = unit(&mut rng, [32, 12, 64]);
    let v = unit(&mut rng, [32, 12, 64]);
    c.bench_function("fine_grained_b32_f12", |b| b.iter(|| fine_grained_image_similarity(black_box(&t), black_box(&v)).unwrap()));
}

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step_desk");
    group.sample_size(10);
    for preset in ["lora", "full"] {
        let cfg = RunConfig::preset(preset).unwrap();
        let (train, _) = prepare_corpus(&cfg).unwrap();
        let batch = Batch::assemble(&train, &(0..cfg.batch_size).collect::<Vec<_>>()).unwrap();
        let mut model = build_model(&cfg).unwrap();
        let mut opt = AdamW::new(&model.params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay);
        group.bench_function(preset, |b| {
            b.iter(|| {
                let mut g = Graph::new();
                let bound = model.params.bind(&mut g);
                let vars = objective_graph(&model, &mut g, Mode::With(&bound), &batch, &cfg).unwrap();
                let mut grads = g.backward(vars.total).unwrap();
                let grads = bound.collect(&mut grads);
                opt.step(&mut model.params, &grads, 1e-4).unwrap();
            })
        });
    }
    group.finish();
}

criterion_group!(benches, attention, similarity, train_step);
criterion_main!(benches);
