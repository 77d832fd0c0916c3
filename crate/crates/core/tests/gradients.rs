use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use softpool::compressor::{mean_pool_on_tape, RatioSet, Variant};
use softpool::distillation::{teacher_distributions, Student, StudentConfig, TrainingExample};
use softpool::gradcheck::{grad_check_with, Stencil};
use softpool::model::{AdapterConfig, ModelConfig, ModelWeights};
use softpool::{ParamSet, Tape, Tensor, Var};

const STEPS: [f64; 2] = [1e-3, 1e-4];
const TOL: f64 = 1e-5;

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    let n = Normal::new(0.0, std).unwrap();
    Tensor::new(shape.to_vec(), (0..shape.iter().product()).map(|_| n.sample(rng)).collect()).unwrap()
}

fn weighted(tape: &mut Tape<f64>, y: Var, w: Var) -> softpool::Result<Var> {
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

/// Each tensor has to agree at one of the step sizes in `STEPS`.
fn assert_grad<F>(label: &str, params: &ParamSet<f64>, f: F)
where
    F: Fn(&mut Tape<f64>, &softpool::params::BoundParams) -> softpool::Result<Var>,
{
    let reports: Vec<_> = STEPS.iter().map(|&h| grad_check_with(params, h, Stencil::FivePoint, &f).unwrap()).collect();
    for (i, (name, _)) in reports[0].per_param.iter().enumerate() {
        let best = reports.iter().map(|r| r.per_param[i].1).fold(f64::INFINITY, f64::min);
        assert!(best < TOL, "{label}: {name} off by {best:e} at every step in {STEPS:?}");
    }
}

#[test]
fn primitives_at_random_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for point in 0..10 {
        let (r, k, c) = (rng.gen_range(1..5), rng.gen_range(4..7), rng.gen_range(1..5));
        let mut p = ParamSet::new();
        p.insert("a", gaussian(&mut rng, &[r, k], 1.0));
        p.insert("b", gaussian(&mut rng, &[k, c], 1.0));
        p.insert("c", gaussian(&mut rng, &[r, k], 1.0));
        p.insert("w", gaussian(&mut rng, &[r, c], 1.0));
        p.insert("v", gaussian(&mut rng, &[r, k], 1.0));
        p.insert("g", gaussian(&mut rng, &[k], 1.0));
        p.insert("s", gaussian(&mut rng, &[k], 1.0));

        assert_grad(&format!("matmul@{point}"), &p, |t, b| {
            let y = t.matmul(b.get("a")?, b.get("b")?)?;
            weighted(t, y, b.get("w")?)
        });
        assert_grad(&format!("add-mul@{point}"), &p, |t, b| {
            let s = t.add(b.get("a")?, b.get("c")?)?;
            let y = t.mul(s, b.get("a")?)?;
            weighted(t, y, b.get("v")?)
        });
        assert_grad(&format!("softmax@{point}"), &p, |t, b| {
            let y = t.softmax(b.get("a")?)?;
            weighted(t, y, b.get("v")?)
        });
        assert_grad(&format!("layer-norm@{point}"), &p, |t, b| {
            let y = t.layer_norm(b.get("a")?, b.get("g")?, b.get("s")?)?;
            weighted(t, y, b.get("v")?)
        });
        assert_grad(&format!("gelu@{point}"), &p, |t, b| {
            let y = t.gelu(b.get("c")?)?;
            weighted(t, y, b.get("v")?)
        });
        assert_grad(&format!("concat-slice@{point}"), &p, |t, b| {
            let y = t.concat(&[b.get("a")?, b.get("c")?], 0)?;
            let s = t.slice(y, 0, r, r)?;
            weighted(t, s, b.get("v")?)
        });
        assert_grad(&format!("mean@{point}"), &p, |t, b| {
            let y = t.mean(b.get("a")?, 1)?;
            let z = t.transpose(y)?;
            let m = t.mean(z, 1)?;
            t.sum(m)
        });
    }
}

#[test]
fn pooled_projection_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..5 {
        let len = rng.gen_range(1..12);
        let r = rng.gen_range(1..6);
        let d = rng.gen_range(1..6);
        let mut p = ParamSet::new();
        p.insert("h", gaussian(&mut rng, &[len, d], 1.0));
        p.insert("proj", gaussian(&mut rng, &[d, d], 0.5));
        p.insert("w", gaussian(&mut rng, &[len.div_ceil(r), d], 1.0));
        assert_grad(&format!("len {len} r {r} d {d}"), &p, |t, b| {
            let z = mean_pool_on_tape(t, b.get("h")?, r)?;
            let y = t.matmul(z, b.get("proj")?)?;
            weighted(t, y, b.get("w")?)
        });
    }
}

fn random_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let n_heads = rng.gen_range(1..=2);
    let d_model = n_heads * rng.gen_range(4..=8usize);
    ModelConfig {
        vocab_size: rng.gen_range(8..=20),
        d_model,
        n_layers: rng.gen_range(1..=2),
        n_heads,
        d_ff: 2 * d_model,
        max_positions: 32,
    }
}

#[test]
fn multi_ratio_loss_on_random_tiny_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for case in 0..20 {
        let cfg = random_config(&mut rng);
        let variant = Variant::ALL[case % Variant::ALL.len()];
        let len = rng.gen_range(2..=8);
        let mut ratios = vec![1, 2, 4, 8];
        ratios.retain(|_| rng.gen_bool(0.6));
        if ratios.is_empty() {
            ratios.push(2);
        }
        let mut draw = |n: usize| (0..n).map(|_| rng.gen_range(0..cfg.vocab_size)).collect::<Vec<_>>();
        let ex = TrainingExample::new(draw(len), draw(2), draw(2)).unwrap();
        let teacher = ModelWeights::<f64>::init_with_std(cfg, 0.3, &mut rng).unwrap();
        let config = StudentConfig {
            variant,
            ratios: RatioSet::new(ratios.clone()).unwrap(),
            adapter: AdapterConfig { rank: 2, alpha: 2.0, ..AdapterConfig::default() },
            ablations: Default::default(),
        };
        let mut student = Student::init(&teacher, config, &mut rng).unwrap();
        let noise = Normal::new(0.0, 0.2).unwrap();
        for (_, t) in student.params.iter_mut() {
            for v in t.data_mut() {
                *v += noise.sample(&mut rng);
            }
        }
        let q = teacher_distributions(&student.base, &ex).unwrap();
        let label = format!("case {case}: {variant} {cfg:?} L={len} R={ratios:?}");
        assert_grad(&label, &student.params, |tape, b| {
            let bound = student.bind_with(tape, b)?;
            bound.multi_ratio_loss(tape, &ex, &q, &ratios)
        });
    }
}
