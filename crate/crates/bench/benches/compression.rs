use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use softpool::compressor::{mean_pool, RatioSet, Variant};
use softpool::distillation::{teacher_distributions, DistillState, TrainConfig, TrainingExample};
use softpool::model::{forward, AttentionMask, InputItem, ModelConfig, ModelWeights};
use softpool::Tensor;

fn desk_model() -> ModelConfig {
    ModelConfig { vocab_size: 128, d_model: 64, n_layers: 2, n_heads: 4, d_ff: 128, max_positions: 96 }
}

fn example(rng: &mut ChaCha8Rng, vocab: usize, context: usize) -> TrainingExample {
    let mut draw = |n: usize| (0..n).map(|_| rng.gen_range(0..vocab)).collect::<Vec<_>>();
    TrainingExample::new(draw(context), draw(6), draw(2)).unwrap()
}

fn pooling(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (len, d) = (512, 64);
    let h = Tensor::new(vec![len, d], (0..len * d).map(|_| rng.gen::<f32>()).collect()).unwrap();
    let mut group = c.benchmark_group("mean_pool_512x64");
    for r in [1, 4, 16, 128] {
        group.bench_with_input(BenchmarkId::from_parameter(r), &r, |b, &r| b.iter(|| mean_pool(black_box(&h), r).unwrap()));
    }
    group.finish();
}

fn forward_pass(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = desk_model();
    let weights = ModelWeights::<f32>::init(cfg, &mut rng).unwrap();
    let mut group = c.benchmark_group("forward_desk");
    for len in [16, 64] {
        let items: Vec<InputItem<f32>> = (0..len).map(|_| InputItem::Token(rng.gen_range(0..cfg.vocab_size))).collect();
        let mask = AttentionMask::causal(len).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(len), &items, |b, items| {
            b.iter(|| forward(&weights, None, black_box(items), &mask).unwrap())
        });
    }
    group.finish();
}

fn multi_ratio_step(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = desk_model();
    let teacher = ModelWeights::<f32>::init(cfg, &mut rng).unwrap();
    let batch: Vec<TrainingExample> = (0..4).map(|_| example(&mut rng, cfg.vocab_size, 48)).collect();
    let targets: Vec<_> = batch.iter().map(|ex| teacher_distributions(&teacher, ex).unwrap()).collect();
    let pairs: Vec<_> = batch.iter().zip(&targets).collect();
    let mut group = c.benchmark_group("distill_step_batch4");
    group.sample_size(10);
    for variant in Variant::ALL {
        let tc = TrainConfig { variant, ratios: RatioSet::new(vec![1, 4]).unwrap(), ..TrainConfig::desk() };
        let mut state = DistillState::new(&tc, &teacher).unwrap();
        group.bench_function(variant.name(), |b| b.iter(|| state.train_step(black_box(&pairs)).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, pooling, forward_pass, multi_ratio_step);
criterion_main!(benches);
