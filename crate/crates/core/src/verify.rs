//! Invariant suites over the numerical core.
//!
//! Each suite draws its cases from a seeded generator, compares library
//! results with small independent oracles and returns a [`SuiteReport`].
//! [`run`] executes the requested suites in a fixed order and
//! [`to_json_lines`] renders one JSON object per suite.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::compressor::{
    compress_multi, compressed_len, mean_pool, mean_pool_on_tape, mean_pool_strided, partition_blocks, Encoder,
    RatioSet, Variant,
};
use crate::distillation::{
    kd_loss_value, sample_ratio, teacher_distributions, Student, StudentConfig, TeacherOutput, TrainingExample,
};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check_with, Stencil};
use crate::metrics::{
    aggregate, exact_match, normalize_answer, substring_accuracy, teacher_normalized, token_f1, DatasetReport,
    MetricValues, SystemKey,
};
use crate::model::{AdapterConfig, InputItem, ModelConfig, ModelWeights};
use crate::ops::{cross_entropy, kl_from_logits};
use crate::params::ParamSet;
use crate::tensor::{kl_divergence, softmax, Tensor};

pub const POOL_CASES: usize = 1000;
pub const POOL_MAX_LEN: usize = 512;
pub const POOL_MAX_RATIO: usize = 128;
pub const POOL_MAX_DIM: usize = 32;
pub const POOL_TOL: f64 = 1e-9;
pub const GRAD_EPS: f64 = 1e-3;
pub const GRAD_TOL: f64 = 1e-5;
pub const PREFIX_SEEDS: u64 = 10;
pub const PREFIX_EQUAL_TOL: f64 = 1e-5;
pub const PREFIX_DIFF_MIN: f64 = 1e-4;
pub const PREFIX_DIFF_SEEDS: usize = 9;
pub const LOSS_SUM_TOL: f64 = 1e-6;
pub const KL_TOL: f64 = 1e-9;
pub const SAMPLING_DRAWS: usize = 10_000;
pub const SAMPLING_TOL: f64 = 0.02;
pub const COST_CASES: usize = 100;
pub const METRIC_TOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Suite {
    PoolingOracle,
    Gradients,
    PrefixProperty,
    LossAlgebra,
    CostAccounting,
    Metrics,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::PoolingOracle,
        Suite::Gradients,
        Suite::PrefixProperty,
        Suite::LossAlgebra,
        Suite::CostAccounting,
        Suite::Metrics,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::PoolingOracle => "pooling-oracle",
            Suite::Gradients => "gradients",
            Suite::PrefixProperty => "prefix-property",
            Suite::LossAlgebra => "loss-algebra",
            Suite::CostAccounting => "cost-accounting",
            Suite::Metrics => "metrics",
        }
    }

    fn salt(self) -> u64 {
        Suite::ALL.iter().position(|&s| s == self).expect("listed suite") as u64 + 1
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite {s:?}")))
    }
}

/// Deliberate defects used to confirm that a suite can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Pooling blocks start every `r + 1` rows instead of every `r`.
    PoolingStride,
}

impl FromStr for Fault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooling-stride" => Ok(Fault::PoolingStride),
            _ => Err(Error::Config(format!("unknown fault {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VerifyOptions {
    pub seed: u64,
    pub fault: Option<Fault>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { seed: 0, fault: None }
    }
}

/// One named comparison inside a suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check { name: name.into(), passed, detail: detail.into() }
    }

    /// Passes when `error < tol`.
    fn below(name: impl Into<String>, error: f64, tol: f64) -> Self {
        Check::new(name, error < tol, format!("max error {error:.3e}, limit {tol:.0e}"))
    }

    fn failed(name: impl Into<String>, err: &Error) -> Self {
        Check::new(name, false, format!("error: {err}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub passed: bool,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    fn new(suite: Suite, checks: Vec<Check>) -> Self {
        let passed = !checks.is_empty() && checks.iter().all(|c| c.passed);
        SuiteReport { suite: suite.name().to_string(), passed, checks }
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_mul(97).wrapping_add(suite.salt()));
    let checks = match suite {
        Suite::PoolingOracle => pooling_oracle(&mut rng, opts.fault),
        Suite::Gradients => gradients(&mut rng),
        Suite::PrefixProperty => prefix_property(opts.seed),
        Suite::LossAlgebra => loss_algebra(&mut rng),
        Suite::CostAccounting => cost_accounting(&mut rng),
        Suite::Metrics => metric_examples(),
    };
    SuiteReport::new(suite, checks)
}

/// Runs `suites` in [`Suite::ALL`] order, each at most once.
pub fn run(suites: &[Suite], opts: &VerifyOptions) -> Vec<SuiteReport> {
    Suite::ALL.into_iter().filter(|s| suites.contains(s)).map(|s| run_suite(s, opts)).collect()
}

pub fn run_all(opts: &VerifyOptions) -> Vec<SuiteReport> {
    run(&Suite::ALL, opts)
}

pub fn to_json_lines(reports: &[SuiteReport]) -> String {
    let mut out = String::new();
    for r in reports {
        out.push_str(&serde_json::to_string(r).expect("report serializes"));
        out.push('\n');
    }
    out
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), gaussian(rng, n, std)).expect("matching shape")
}

fn naive_mean_pool(h: &Tensor<f64>, r: usize) -> Vec<Vec<f64>> {
    let (len, d) = (h.rows(), h.cols());
    let mut out = Vec::new();
    let mut start = 0;
    while start < len {
        let end = if start + r < len { start + r } else { len };
        let mut row = Vec::with_capacity(d);
        for j in 0..d {
            let mut s = 0.0;
            for i in start..end {
                s += h.at(i, j);
            }
            row.push(s / (end - start) as f64);
        }
        out.push(row);
        start += r;
    }
    out
}

fn rows_error(got: &Tensor<f64>, want: &[Vec<f64>]) -> f64 {
    if got.rows() != want.len() || want.iter().any(|r| r.len() != got.cols()) {
        return f64::INFINITY;
    }
    let mut worst: f64 = 0.0;
    for (i, row) in want.iter().enumerate() {
        for (j, &w) in row.iter().enumerate() {
            let e = (got.at(i, j) - w).abs();
            if !e.is_finite() {
                return f64::INFINITY;
            }
            worst = worst.max(e);
        }
    }
    worst
}

fn pooling_oracle(rng: &mut ChaCha8Rng, fault: Option<Fault>) -> Vec<Check> {
    let pool = |h: &Tensor<f64>, r: usize| match fault {
        Some(Fault::PoolingStride) => mean_pool_strided(h, r, r + 1),
        None => mean_pool(h, r),
    };
    let mut checks = Vec::new();

    let mut worst: f64 = 0.0;
    let mut tape_worst: f64 = 0.0;
    for case in 0..POOL_CASES {
        let len = rng.gen_range(1..=POOL_MAX_LEN);
        let r = rng.gen_range(1..=POOL_MAX_RATIO);
        let d = rng.gen_range(1..=POOL_MAX_DIM);
        let h = random_tensor(rng, &[len, d], 1.0);
        let want = naive_mean_pool(&h, r);
        worst = worst.max(match pool(&h, r) {
            Ok(got) => rows_error(&got, &want),
            Err(_) => f64::INFINITY,
        });
        if case % 10 == 0 {
            let mut tape = Tape::new();
            let x = tape.constant(h.clone());
            tape_worst = tape_worst.max(match mean_pool_on_tape(&mut tape, x, r) {
                Ok(v) => rows_error(tape.value(v), &want),
                Err(_) => f64::INFINITY,
            });
        }
    }
    checks.push(Check::below(format!("mean-pool-vs-naive ({POOL_CASES} cases)"), worst, POOL_TOL));
    checks.push(Check::below("tape-mean-pool-vs-naive", tape_worst, POOL_TOL));

    let mut mismatches = 0usize;
    let mut first_bad = None;
    for len in 1..=POOL_MAX_LEN {
        for r in 1..=POOL_MAX_RATIO {
            let mut naive_count = 0;
            let mut start = 0;
            while start < len {
                naive_count += 1;
                start += r;
            }
            let blocks = partition_blocks(len, r);
            let contiguous = blocks.first().map(|b| b.start) == Some(0)
                && blocks.last().map(|b| b.end) == Some(len)
                && blocks.windows(2).all(|w| w[0].end == w[1].start)
                && blocks.iter().all(|b| b.len() == r || b.end == len);
            if blocks.len() != naive_count || compressed_len(len, r) != naive_count || !contiguous {
                mismatches += 1;
                first_bad.get_or_insert((len, r));
            }
        }
    }
    let detail = match first_bad {
        None => format!("{} (L, r) pairs", POOL_MAX_LEN * POOL_MAX_RATIO),
        Some((l, r)) => format!("{mismatches} mismatches, first at L={l} r={r}"),
    };
    checks.push(Check::new("block-count-exhaustive", mismatches == 0, detail));

    let mut row_mismatch = None;
    for len in 1..=POOL_MAX_LEN {
        let h = Tensor::zeros(vec![len, 1]);
        for r in 1..=POOL_MAX_RATIO {
            let rows = pool(&h, r).map(|t| t.rows()).unwrap_or(usize::MAX);
            if rows != len.div_ceil(r) {
                row_mismatch.get_or_insert((len, r));
            }
        }
    }
    checks.push(Check::new(
        "pooled-row-count-exhaustive",
        row_mismatch.is_none(),
        row_mismatch.map_or_else(|| "all rows match".to_string(), |(l, r)| format!("wrong at L={l} r={r}")),
    ));
    checks
}

type Primitive = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

fn weighted_sum(tape: &mut Tape<f64>, y: Var, w: Var) -> Result<Var> {
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor<f64>>, Primitive)> {
    let positive = |rng: &mut ChaCha8Rng, shape: &[usize]| {
        let t = random_tensor(rng, shape, 1.0);
        t.map(|v| 0.5 + v.abs())
    };
    vec![
        ("matmul", vec![random_tensor(rng, &[3, 4], 1.0), random_tensor(rng, &[4, 5], 1.0), random_tensor(rng, &[3, 5], 1.0)], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, v[2])
        }),
        ("add", vec![random_tensor(rng, &[3, 4], 1.0), random_tensor(rng, &[3, 4], 1.0), random_tensor(rng, &[3, 4], 1.0)], |t, v| {
            let y = t.add(v[0], v[1])?;
            weighted_sum(t, y, v[2])
        }),
        ("mul", vec![random_tensor(rng, &[3, 4], 1.0), random_tensor(rng, &[3, 4], 1.0), random_tensor(rng, &[3, 4], 1.0)], |t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted_sum(t, y, v[2])
        }),
        ("scale", vec![random_tensor(rng, &[2, 5], 1.0), random_tensor(rng, &[2, 5], 1.0)], |t, v| {
            let y = t.scale(v[0], -1.7)?;
            weighted_sum(t, y, v[1])
        }),
        ("transpose", vec![random_tensor(rng, &[3, 4], 1.0), random_tensor(rng, &[4, 3], 1.0)], |t, v| {
            let y = t.transpose(v[0])?;
            weighted_sum(t, y, v[1])
        }),
        ("concat-rows", vec![random_tensor(rng, &[2, 3], 1.0), random_tensor(rng, &[4, 3], 1.0), random_tensor(rng, &[6, 3], 1.0)], |t, v| {
            let y = t.concat(&[v[0], v[1]], 0)?;
            weighted_sum(t, y, v[2])
        }),
        ("concat-cols", vec![random_tensor(rng, &[3, 2], 1.0), random_tensor(rng, &[3, 4], 1.0), random_tensor(rng, &[3, 6], 1.0)], |t, v| {
            let y = t.concat(&[v[0], v[1]], 1)?;
            weighted_sum(t, y, v[2])
        }),
        ("slice", vec![random_tensor(rng, &[6, 3], 1.0), random_tensor(rng, &[3, 3], 1.0)], |t, v| {
            let y = t.slice(v[0], 0, 2, 3)?;
            weighted_sum(t, y, v[1])
        }),
        ("gather", vec![random_tensor(rng, &[5, 3], 1.0), random_tensor(rng, &[4, 3], 1.0)], |t, v| {
            let y = t.gather(v[0], &[4, 1, 1, 0])?;
            weighted_sum(t, y, v[1])
        }),
        ("softmax", vec![random_tensor(rng, &[3, 5], 1.0), random_tensor(rng, &[3, 5], 1.0)], |t, v| {
            let y = t.softmax(v[0])?;
            weighted_sum(t, y, v[1])
        }),
        ("ln", vec![positive(rng, &[3, 4]), random_tensor(rng, &[3, 4], 1.0)], |t, v| {
            let y = t.ln(v[0], 1e-12)?;
            weighted_sum(t, y, v[1])
        }),
        ("mean-axis0", vec![random_tensor(rng, &[4, 3], 1.0), random_tensor(rng, &[1, 3], 1.0)], |t, v| {
            let y = t.mean(v[0], 0)?;
            weighted_sum(t, y, v[1])
        }),
        ("mean-axis1", vec![random_tensor(rng, &[4, 3], 1.0), random_tensor(rng, &[4, 1], 1.0)], |t, v| {
            let y = t.mean(v[0], 1)?;
            weighted_sum(t, y, v[1])
        }),
        ("sum", vec![random_tensor(rng, &[3, 4], 1.0)], |t, v| t.sum(v[0])),
        (
            "layer-norm",
            vec![random_tensor(rng, &[3, 6], 1.0), random_tensor(rng, &[6], 1.0), random_tensor(rng, &[6], 1.0), random_tensor(rng, &[3, 6], 1.0)],
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2])?;
                weighted_sum(t, y, v[3])
            },
        ),
        ("masked-fill-softmax", vec![random_tensor(rng, &[3, 3], 1.0), random_tensor(rng, &[3, 3], 1.0)], |t, v| {
            let allowed: Arc<[bool]> = (0..9).map(|i| i % 3 <= i / 3).collect::<Vec<_>>().into();
            let m = t.masked_fill(v[0], allowed)?;
            let y = t.softmax(m)?;
            weighted_sum(t, y, v[1])
        }),
        ("gelu", vec![random_tensor(rng, &[3, 4], 1.5), random_tensor(rng, &[3, 4], 1.0)], |t, v| {
            let y = t.gelu(v[0])?;
            weighted_sum(t, y, v[1])
        }),
        ("fan-out", vec![random_tensor(rng, &[2, 2], 1.0)], |t, v| {
            let sq = t.mul(v[0], v[0])?;
            let lin = t.scale(v[0], 3.0)?;
            let y = t.add(sq, lin)?;
            t.sum(y)
        }),
    ]
}

fn check_gradient<F>(name: &str, params: &ParamSet<f64>, f: F) -> Check
where
    F: Fn(&mut Tape<f64>, &crate::params::BoundParams) -> Result<Var>,
{
    match grad_check_with(params, GRAD_EPS, Stencil::FivePoint, f) {
        Ok(report) => {
            let worst = report.max_error();
            let at = report
                .per_param
                .iter()
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .map(|p| p.0.clone())
                .unwrap_or_default();
            let mut c = Check::below(name, worst, GRAD_TOL);
            c.detail.push_str(&format!(" (worst tensor {at})"));
            c
        }
        Err(e) => Check::failed(name, &e),
    }
}

/// Architecture small enough for exhaustive finite differences.
pub fn grad_config() -> ModelConfig {
    ModelConfig { vocab_size: 20, d_model: 16, n_layers: 2, n_heads: 2, d_ff: 32, max_positions: 32 }
}

fn random_example(rng: &mut ChaCha8Rng, vocab: usize, context_len: usize) -> TrainingExample {
    let mut draw = |n: usize| (0..n).map(|_| rng.gen_range(0..vocab)).collect::<Vec<_>>();
    let context = draw(context_len);
    let prompt = draw(3);
    let answer = draw(2);
    TrainingExample::new(context, prompt, answer).expect("nonempty example")
}

fn randomize(params: &mut ParamSet<f64>, rng: &mut ChaCha8Rng, std: f64) {
    for (_, t) in params.iter_mut() {
        let noise = gaussian(rng, t.numel(), std);
        for (v, n) in t.data_mut().iter_mut().zip(noise) {
            *v += n;
        }
    }
}

fn random_student(rng: &mut ChaCha8Rng, cfg: ModelConfig, variant: Variant, ratios: &[usize], rank: usize) -> Result<Student<f64>> {
    let teacher = ModelWeights::<f64>::init_with_std(cfg, 0.3, rng)?;
    let config = StudentConfig {
        variant,
        ratios: RatioSet::new(ratios.to_vec())?,
        adapter: AdapterConfig { rank, alpha: rank as f64, ..AdapterConfig::default() },
        ablations: Default::default(),
    };
    let mut student = Student::init(&teacher, config, rng)?;
    randomize(&mut student.params, rng, 0.2);
    Ok(student)
}

fn gradients(rng: &mut ChaCha8Rng) -> Vec<Check> {
    let mut checks = Vec::new();
    for (name, inputs, f) in primitive_cases(rng) {
        let mut params = ParamSet::new();
        for (i, t) in inputs.into_iter().enumerate() {
            params.insert(format!("x{i}"), t);
        }
        let names: Vec<String> = params.names().cloned().collect();
        checks.push(check_gradient(name, &params, |tape, b| {
            let vars = names.iter().map(|n| b.get(n)).collect::<Result<Vec<_>>>()?;
            f(tape, &vars)
        }));
    }

    let mut params = ParamSet::new();
    params.insert("logits", random_tensor(rng, &[3, 6], 1.0));
    let q = softmax(&random_tensor(rng, &[3, 6], 1.0)).expect("finite logits");
    checks.push(check_gradient("kl-from-logits", &params, |tape, b| kl_from_logits(tape, &q, b.get("logits")?)));
    checks.push(check_gradient("cross-entropy", &params, |tape, b| cross_entropy(tape, &[0, 5, 2], b.get("logits")?)));

    let cfg = grad_config();
    let teacher = ModelWeights::<f64>::init_with_std(cfg, 0.3, rng).expect("valid config");
    let ex = random_example(rng, cfg.vocab_size, 8);
    let model_params = teacher.params.clone();
    checks.push(check_gradient("transformer-answer-loss", &model_params, |tape, b| {
        let model = crate::model::BoundModel::new(tape, cfg, b.clone(), None)?;
        crate::distillation::answer_cross_entropy(tape, &model, &ex)
    }));

    let ratios = [2, 4];
    for variant in Variant::ALL {
        let name = format!("multi-ratio-loss-{variant}");
        let result = random_student(rng, cfg, variant, &ratios, 2).and_then(|student| {
            let q = teacher_distributions(&student.base, &ex)?;
            Ok((student, q))
        });
        match result {
            Ok((student, q)) => checks.push(check_gradient(&name, &student.params, |tape, b| {
                let bound = student.bind_with(tape, b)?;
                bound.multi_ratio_loss(tape, &ex, &q, &ratios)
            })),
            Err(e) => checks.push(Check::failed(name, &e)),
        }
    }
    checks
}

/// Compressed states of one context at a coarse and a fine ratio.
fn two_ratio_states(student: &Student<f64>, context: &[usize], coarse: usize, fine: usize) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let a = student.compress(context, coarse)?;
    let b = student.compress(context, fine)?;
    Ok((a.vectors, b.vectors))
}

fn prefix_gap(student: &Student<f64>, rng: &mut ChaCha8Rng) -> Result<f64> {
    let len = rng.gen_range(12..=32);
    let context: Vec<usize> = (0..len).map(|_| rng.gen_range(0..student.base.config.vocab_size)).collect();
    let fine = rng.gen_range(2..=4);
    let coarse = fine * rng.gen_range(2..=4);
    let (short, long) = two_ratio_states(student, &context, coarse, fine)?;
    let k = short.rows();
    if k >= long.rows() {
        return Err(Error::InvalidArgument(format!("ratios {coarse} and {fine} give equal lengths")));
    }
    let mut worst: f64 = 0.0;
    for i in 0..k {
        for (a, b) in short.row(i).iter().zip(long.row(i)) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

fn prefix_property(seed: u64) -> Vec<Check> {
    let cfg = ModelConfig { vocab_size: 20, d_model: 16, n_layers: 2, n_heads: 2, d_ff: 32, max_positions: 64 };
    let mut causal_worst: f64 = 0.0;
    let mut causal_err = None;
    let mut bidir_separated = 0;
    let mut bidir_min = f64::INFINITY;
    let mut bidir_err = None;
    for s in 0..PREFIX_SEEDS {
        let case_seed = seed.wrapping_mul(1_000_003).wrapping_add(s);
        for variant in [Variant::CompTokCausal, Variant::CompTokBidirectional] {
            let mut rng = ChaCha8Rng::seed_from_u64(case_seed);
            let gap = random_student(&mut rng, cfg, variant, &[2], 4).and_then(|st| prefix_gap(&st, &mut rng));
            match (variant, gap) {
                (Variant::CompTokCausal, Ok(g)) => causal_worst = causal_worst.max(g),
                (Variant::CompTokCausal, Err(e)) => causal_err = Some(e),
                (_, Ok(g)) => {
                    bidir_min = bidir_min.min(g);
                    if g > PREFIX_DIFF_MIN {
                        bidir_separated += 1;
                    }
                }
                (_, Err(e)) => bidir_err = Some(e),
            }
        }
    }
    let causal = match causal_err {
        Some(e) => Check::failed("causal-prefix-equal", &e),
        None => Check::below(format!("causal-prefix-equal ({PREFIX_SEEDS} seeds)"), causal_worst, PREFIX_EQUAL_TOL),
    };
    let bidir = match bidir_err {
        Some(e) => Check::failed("bidirectional-prefix-differs", &e),
        None => Check::new(
            "bidirectional-prefix-differs",
            bidir_separated >= PREFIX_DIFF_SEEDS,
            format!(
                "{bidir_separated}/{PREFIX_SEEDS} seeds above {PREFIX_DIFF_MIN:.0e} (need {PREFIX_DIFF_SEEDS}), smallest gap {bidir_min:.3e}"
            ),
        ),
    };
    vec![causal, bidir]
}

fn loss_algebra(rng: &mut ChaCha8Rng) -> Vec<Check> {
    let mut checks = Vec::new();
    let cfg = grad_config();
    let ratios = [1, 2, 4];
    for variant in Variant::ALL {
        let name = format!("multi-equals-sum-{variant}");
        let result = (|| -> Result<f64> {
            let student = random_student(rng, cfg, variant, &ratios, 4)?;
            let mut worst: f64 = 0.0;
            for _ in 0..5 {
                let len = rng.gen_range(4..=12);
                let ex = random_example(rng, cfg.vocab_size, len);
                let q: TeacherOutput<f64> = teacher_distributions(&student.base, &ex)?;
                let multi = student.multi_ratio_loss(&ex, &q, &ratios)?;
                let mut sum = 0.0;
                for &r in &ratios {
                    sum += student_kd(&student, &ex, &q, r)?;
                }
                worst = worst.max((multi - sum).abs());
            }
            Ok(worst)
        })();
        checks.push(match result {
            Ok(w) => Check::below(name, w, LOSS_SUM_TOL),
            Err(e) => Check::failed(name, &e),
        });
    }

    let mut min_kl = f64::INFINITY;
    let mut self_kl: f64 = 0.0;
    let mut tape_self_kl: f64 = 0.0;
    for _ in 0..500 {
        let v = rng.gen_range(2..=40);
        let q = softmax(&random_tensor(rng, &[v], 2.0)).expect("finite");
        let p = softmax(&random_tensor(rng, &[v], 2.0)).expect("finite");
        min_kl = min_kl.min(kl_divergence(&q, &p).unwrap_or(f64::NEG_INFINITY));
        self_kl = self_kl.max(kl_divergence(&q, &q).map_or(f64::INFINITY, f64::abs));
        let mut tape = Tape::new();
        let logits = tape.constant(q.map(f64::ln).reshape(vec![1, v]).expect("row"));
        let q_row = q.reshape(vec![1, v]).expect("row");
        let kl = kl_from_logits(&mut tape, &q_row, logits).map(|k| tape.value(k).data()[0]);
        tape_self_kl = tape_self_kl.max(kl.map_or(f64::INFINITY, f64::abs));
    }
    checks.push(Check::new("kl-nonnegative", min_kl >= -KL_TOL, format!("smallest KL {min_kl:.3e}")));
    checks.push(Check::below("kl-zero-at-equality", self_kl, KL_TOL));
    checks.push(Check::below("tape-kl-zero-at-equality", tape_self_kl, KL_TOL));

    let ratios = [4, 8, 16, 32, 64, 128];
    let mut counts = [0usize; 6];
    for _ in 0..SAMPLING_DRAWS {
        let r = sample_ratio(rng, &ratios);
        counts[ratios.iter().position(|&x| x == r).expect("drawn from set")] += 1;
    }
    let expected = 1.0 / ratios.len() as f64;
    let worst = counts.iter().map(|&c| (c as f64 / SAMPLING_DRAWS as f64 - expected).abs()).fold(0.0, f64::max);
    checks.push(Check::new(
        format!("ratio-sampling-uniform ({SAMPLING_DRAWS} draws)"),
        worst <= SAMPLING_TOL,
        format!("counts {counts:?}, largest deviation {worst:.4}"),
    ));
    checks
}

/// Single-ratio distillation loss computed without the tape: compress,
/// decode the continuation and sum row-wise KL against the teacher.
fn student_kd(student: &Student<f64>, ex: &TrainingExample, q: &TeacherOutput<f64>, r: usize) -> Result<f64> {
    let ctx = student.compress(&ex.context, r)?;
    let mut items: Vec<InputItem<f64>> = (0..ctx.len()).map(|i| InputItem::Vector(ctx.vectors.row(i).to_vec())).collect();
    items.extend(ex.continuation().into_iter().map(InputItem::Token));
    let merged = crate::model::merge_adapter(&student.base, &student.decoder_adapter())?;
    let (_, logits) = crate::model::forward(&merged, None, &items, &crate::model::AttentionMask::causal(items.len())?)?;
    let start = ctx.len() + ex.prompt.len() - 1;
    let rows: Vec<Vec<f64>> = (start..start + ex.answer.len()).map(|i| logits.row(i).to_vec()).collect();
    kd_loss_value(q, &Tensor::from_rows(&rows)?)
}

fn cost_accounting(rng: &mut ChaCha8Rng) -> Vec<Check> {
    let cfg = ModelConfig { vocab_size: 20, d_model: 8, n_layers: 1, n_heads: 2, d_ff: 16, max_positions: 256 };
    let weights = match ModelWeights::<f64>::init(cfg, rng) {
        Ok(w) => w,
        Err(e) => return vec![Check::failed("model", &e)],
    };
    let encoder = Encoder::new(&weights, None);
    let mut bad: Vec<String> = Vec::new();
    let mut multi_bad: Vec<String> = Vec::new();
    for _ in 0..COST_CASES {
        let len: usize = rng.gen_range(1..=128);
        let r = rng.gen_range(1..=32);
        let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();
        for variant in Variant::ALL {
            let want = match variant {
                Variant::MeanPool => len,
                _ => len + len.div_ceil(r),
            };
            let got = RatioSet::single(r)
                .and_then(|set| compress_multi(encoder, &tokens, &set, variant, None))
                .map(|m| (m.processed_positions, m.contexts[&r].processed_positions, m.contexts[&r].len()));
            match got {
                Ok((counted, recorded, rows)) if counted == want && recorded == want && rows == len.div_ceil(r) => {}
                Ok((counted, recorded, _)) => {
                    bad.push(format!("{variant} L={len} r={r}: counted {counted}, recorded {recorded}, want {want}"))
                }
                Err(e) => bad.push(format!("{variant} L={len} r={r}: {e}")),
            }
        }
        let r2 = r + 1;
        let Ok(set) = RatioSet::new(vec![r, r2]) else { continue };
        for variant in Variant::ALL {
            let want = match variant {
                Variant::MeanPool => len,
                _ => 2 * len + len.div_ceil(r) + len.div_ceil(r2),
            };
            match compress_multi(encoder, &tokens, &set, variant, None) {
                Ok(m) if m.processed_positions == want => {}
                Ok(m) => multi_bad.push(format!("{variant} L={len} R={{{r},{r2}}}: {} vs {want}", m.processed_positions)),
                Err(e) => multi_bad.push(format!("{variant} L={len}: {e}")),
            }
        }
    }
    let summarize = |bad: &[String], what: &str| match bad.first() {
        None => format!("{COST_CASES} {what} cases exact"),
        Some(first) => format!("{} mismatches, first: {first}", bad.len()),
    };
    vec![
        Check::new("encoder-positions-single-ratio", bad.is_empty(), summarize(&bad, "(L, r)")),
        Check::new("encoder-positions-two-ratios", multi_bad.is_empty(), summarize(&multi_bad, "(L, R)")),
    ]
}

fn metric_examples() -> Vec<Check> {
    let mut checks = Vec::new();
    let states = "alabama alaska arizona arkansas california colorado connecticut delaware florida georgia hawaii \
                  idaho illinois indiana iowa kansas kentucky louisiana maine maryland massachusetts michigan \
                  minnesota mississippi missouri montana nebraska nevada new hampshire new jersey new mexico new york \
                  north carolina north dakota ohio oklahoma oregon pennsylvania rhode island south carolina \
                  south dakota tennessee texas utah vermont virginia washington west virginia wisconsin wyoming";

    let normalized = [("The Cat.", "cat"), ("cat", "cat"), ("A  big   DOG!", "big dog")];
    let norm_ok = normalized.iter().all(|(s, want)| normalize_answer(s) == *want);
    checks.push(Check::new("normalize-examples", norm_ok, "3 examples"));

    let em = [("The Cat.", "cat", 1.0), ("cats", "cat", 0.0), ("x", "x", 1.0)];
    let em_ok = em.iter().all(|&(p, g, want)| exact_match(p, g) == want);
    checks.push(Check::new("exact-match-examples", em_ok, "3 examples"));

    let f1 = [
        ("black cat", "cat", 2.0 / 3.0),
        ("x b c", "b c d", 2.0 / 3.0),
        ("a b c", "b c d", 0.8),
        ("same words here", "same words here", 1.0),
        ("", "", 1.0),
        ("", "cat", 0.0),
    ];
    let f1_err = f1.iter().map(|&(p, g, want)| (token_f1(p, g) - want).abs()).fold(0.0, f64::max);
    checks.push(Check::below("token-f1-examples", f1_err, 1e-12));

    let sub = [(states, "ohio", 1.0), ("the answer is cat", "cat", 1.0), ("dog", "cat", 0.0)];
    let sub_ok = sub.iter().all(|&(p, g, want)| substring_accuracy(p, g) == want);
    checks.push(Check::new("substring-examples", sub_ok, "3 examples"));

    let tn = [(47.90, 74.33, 23.06, 0.4845), (71.66, 74.33, 23.06, 0.9479), (74.33, 74.33, 23.06, 1.0)];
    let mut tn_err: f64 = 0.0;
    for &(fc, t, none, want) in &tn {
        tn_err = tn_err.max(teacher_normalized(fc, t, none).map_or(f64::INFINITY, |v| (v - want).abs()));
    }
    checks.push(Check::below("teacher-normalized-examples", tn_err, METRIC_TOL));
    checks.push(Check::new(
        "teacher-normalized-degenerate",
        matches!(teacher_normalized(0.5, 0.3, 0.3), Err(Error::DegenerateDenominator(_))),
        "equal teacher and no-context scores are rejected",
    ));

    let report = |name: &str, em: f64| {
        let v = MetricValues { em, f1: em, substring_acc: em };
        DatasetReport {
            dataset: name.to_string(),
            domain: crate::dataset::Domain::In,
            teacher: v,
            no_context: MetricValues::default(),
            students: vec![(SystemKey { system: "mean-pool".into(), ratio: 4, regime: "multi".into() }, v)]
                .into_iter()
                .collect(),
        }
    };
    let agg = aggregate(vec![report("a", 0.4), report("b", 0.6)]);
    let agg_ok = agg.map(|a| (a.overall.teacher.em - 0.5).abs() < 1e-12).unwrap_or(false);
    checks.push(Check::new("aggregate-mean", agg_ok, "values 0.4 and 0.6 average to 0.5"));
    checks.push(Check::new("aggregate-empty", aggregate(Vec::new()).is_err(), "no datasets is an error"));
    checks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
        assert_eq!("pooling-stride".parse::<Fault>().unwrap(), Fault::PoolingStride);
    }

    #[test]
    fn stride_fault_breaks_the_oracle() {
        let clean = run_suite(Suite::PoolingOracle, &VerifyOptions::default());
        assert!(clean.passed, "{clean:?}");
        let broken = run_suite(Suite::PoolingOracle, &VerifyOptions { seed: 0, fault: Some(Fault::PoolingStride) });
        assert!(!broken.passed);
    }

    #[test]
    fn json_lines_have_one_object_per_suite() {
        let reports = run(&[Suite::Metrics, Suite::CostAccounting], &VerifyOptions::default());
        let text = to_json_lines(&reports);
        let parsed: Vec<SuiteReport> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[0].suite, "cost-accounting");
        assert_eq!(parsed[1].suite, "metrics");
        assert!(parsed.iter().all(|r| r.passed), "{parsed:?}");
    }
}
