use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::example::{packed_cross_entropy, teacher_distributions, PackedExample, TeacherOutput, TrainingExample};
use super::optim::{clip_global_norm, global_norm, AdamW, LrSchedule, Schedule};
use super::student::{Ablations, Student, StudentConfig};
use crate::autodiff::{Tape, Var};
use crate::checkpoint::{self, Metadata};
use crate::compressor::{RatioSet, Variant};
use crate::error::{Error, Result};
use crate::model::{merge_adapter, AdapterConfig, BoundModel, LowRankAdapter, ModelConfig, ModelWeights};
use crate::params::{BoundParams, ParamSet};
use crate::tensor::{Scalar, Tensor};

/// Optimization and run settings. `Default` is the full-scale recipe;
/// [`TrainConfig::desk`] shrinks steps, batch and context for a laptop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub peak_lr: f64,
    pub final_lr: f64,
    pub schedule: Schedule,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub max_context: usize,
    pub max_answer: usize,
    pub ratios: RatioSet,
    pub variant: Variant,
    pub adapter: AdapterConfig,
    pub ablations: Ablations,
    pub seed: u64,
    /// Write an intermediate checkpoint every this many steps (0: final only).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            peak_lr: 2e-4,
            final_lr: 2e-5,
            schedule: Schedule::Cosine,
            warmup_ratio: 0.05,
            weight_decay: 0.0,
            steps: 48_000,
            batch_size: 32,
            max_context: 1024,
            max_answer: 256,
            ratios: RatioSet::default(),
            variant: Variant::MeanPool,
            adapter: AdapterConfig::default(),
            ablations: Ablations::default(),
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig { steps: 3000, batch_size: 16, max_context: 64, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.peak_lr > self.final_lr && self.final_lr > 0.0) {
            return bad(format!("need peak_lr > final_lr > 0, got {} / {}", self.peak_lr, self.final_lr));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad(format!("warmup_ratio {} outside [0, 1)", self.warmup_ratio));
        }
        if self.batch_size == 0 || self.steps == 0 {
            return bad("steps and batch_size must be positive".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        self.student().validate()
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            kind: self.schedule,
            peak: self.peak_lr,
            final_lr: self.final_lr,
            warmup_ratio: self.warmup_ratio,
            total: self.steps,
        }
    }

    pub fn student(&self) -> StudentConfig {
        StudentConfig { variant: self.variant, ratios: self.ratios.clone(), adapter: self.adapter, ablations: self.ablations }
    }
}

/// Scalars recorded for one optimizer update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// One-based index of the update.
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

/// Optimizer state shared by every training mode.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer<T> {
    pub adam: AdamW<T>,
    pub schedule: LrSchedule,
    pub clip_norm: f64,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl<T: Scalar> Trainer<T> {
    /// Moments are allocated for the `trainable` entries of `params`.
    pub fn new(cfg: &TrainConfig, params: &ParamSet<T>, trainable: &BTreeSet<String>) -> Self {
        let subset: ParamSet<T> =
            params.iter().filter(|(k, _)| trainable.contains(*k)).map(|(k, t)| (k.clone(), t.clone())).collect();
        Trainer {
            adam: AdamW::new(&subset, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay),
            schedule: cfg.schedule(),
            clip_norm: cfg.clip_norm,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        }
    }

    pub fn lr(&self) -> f64 {
        self.schedule.at(self.step)
    }

    /// `batch_size` example indices drawn uniformly with replacement.
    pub fn sample_batch(&mut self, n: usize, batch_size: usize) -> Vec<usize> {
        (0..batch_size).map(|_| self.rng.gen_range(0..n)).collect()
    }

    /// Records `loss_fn` on a fresh tape, backpropagates, clips and applies
    /// exactly one update to the `trainable` entries of `params`.
    pub fn update<F>(&mut self, params: &mut ParamSet<T>, trainable: &BTreeSet<String>, lr: f64, loss_fn: F) -> Result<StepStats>
    where
        F: FnOnce(&mut Tape<T>, &BoundParams, &mut ChaCha8Rng) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let mut vars = BoundParams::default();
        for (name, t) in params.iter() {
            vars.insert(name.clone(), tape.leaf(t.clone(), trainable.contains(name)));
        }
        let root = loss_fn(&mut tape, &vars, &mut self.rng)?;
        let loss = tape.value(root).item()?.as_f64();
        tape.backward(root)?;
        let mut grads = ParamSet::new();
        for name in trainable {
            let v = vars.get(name)?;
            let g = tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v).to_vec()));
            grads.insert(name.clone(), g);
        }
        let raw_norm = global_norm(&grads);
        if !loss.is_finite() || !raw_norm.is_finite() {
            let per: Vec<String> = grads.iter().map(|(k, g)| format!("{k}={:.3e}", g.sq_norm().as_f64().sqrt())).collect();
            return Err(Error::Diverged(format!(
                "step {} lr {lr:.3e} loss {loss} grad norm {raw_norm}; per-tensor grad norms: {}",
                self.step + 1,
                per.join(", ")
            )));
        }
        let (grad_norm, clipped_norm) = clip_global_norm(&mut grads, self.clip_norm);
        self.adam.step(params, &grads, lr)?;
        self.step += 1;
        Ok(StepStats { step: self.step, lr, loss, grad_norm, clipped_norm })
    }

    /// Sidecar with optimizer moments, step counter and generator position.
    pub fn save_state(&self, path: &Path) -> Result<()> {
        let mut meta = Metadata::new();
        meta.set("kind", "train_state");
        meta.set("step", self.step);
        meta.set("adam_t", self.adam.t);
        let seed: String = self.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        meta.set("rng_seed", seed);
        meta.set("rng_stream", self.rng.get_stream());
        meta.set("rng_word_pos", self.rng.get_word_pos());
        let mut tensors = ParamSet::new();
        tensors.extend_prefixed("m.", &self.adam.m);
        tensors.extend_prefixed("v.", &self.adam.v);
        checkpoint::save(path, &meta, &tensors)
    }

    /// Restores state written by [`Trainer::save_state`] into a trainer built
    /// from the same configuration.
    pub fn load_state(&mut self, path: &Path) -> Result<()> {
        let (meta, tensors) = checkpoint::load::<T>(path)?;
        if meta.get("kind") != Some("train_state") {
            return Err(Error::Format(format!("{} is not a training state", path.display())));
        }
        let hex = meta.require("rng_seed")?;
        if hex.len() != 64 {
            return Err(Error::Format("rng_seed must be 32 hex bytes".into()));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|e| Error::Format(e.to_string()))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(meta.parse("rng_stream")?);
        rng.set_word_pos(meta.parse("rng_word_pos")?);
        let m = tensors.strip_prefix("m.");
        let v = tensors.strip_prefix("v.");
        if m.len() != self.adam.m.len() || m.names().ne(self.adam.m.names()) {
            return Err(Error::Format("optimizer moments do not match the trainable set".into()));
        }
        self.adam.m = m;
        self.adam.v = v;
        self.adam.t = meta.parse("adam_t")?;
        self.step = meta.parse("step")?;
        self.rng = rng;
        Ok(())
    }
}

/// Lazily filled teacher distributions, one slot per corpus example.
#[derive(Clone, Debug)]
pub struct TeacherCache<'a, T> {
    teacher: &'a ModelWeights<T>,
    slots: Vec<Option<TeacherOutput<T>>>,
}

impl<'a, T: Scalar> TeacherCache<'a, T> {
    pub fn new(teacher: &'a ModelWeights<T>, n: usize) -> Self {
        TeacherCache { teacher, slots: vec![None; n] }
    }

    pub fn get(&mut self, i: usize, ex: &TrainingExample) -> Result<&TeacherOutput<T>> {
        if self.slots[i].is_none() {
            self.slots[i] = Some(teacher_distributions(self.teacher, ex)?);
        }
        Ok(self.slots[i].as_ref().expect("filled above"))
    }
}

/// One ratio drawn uniformly from `ratios`, which must be nonempty.
pub fn sample_ratio(rng: &mut impl Rng, ratios: &[usize]) -> usize {
    ratios[rng.gen_range(0..ratios.len())]
}

/// Student and optimizer during distillation.
#[derive(Clone, Debug)]
pub struct DistillState<T> {
    pub student: Student<T>,
    pub trainer: Trainer<T>,
    pub ratios: Vec<usize>,
}

impl<T: Scalar> DistillState<T> {
    pub fn new(cfg: &TrainConfig, teacher: &ModelWeights<T>) -> Result<Self> {
        cfg.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
        let student = Student::init(teacher, cfg.student(), &mut init_rng)?;
        let trainer = Trainer::new(cfg, &student.params, &student.trainable());
        Ok(DistillState { student, trainer, ratios: cfg.ratios.ratios().to_vec() })
    }

    pub fn train_step(&mut self, batch: &[(&TrainingExample, &TeacherOutput<T>)]) -> Result<StepStats> {
        let lr = self.trainer.lr();
        self.train_step_with_lr(batch, lr)
    }

    /// One update on the batch-mean of `L_multi` (or of the sampled-ratio
    /// loss when ratio sampling is on).
    pub fn train_step_with_lr(&mut self, batch: &[(&TrainingExample, &TeacherOutput<T>)], lr: f64) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let trainable = self.student.trainable();
        let sampling = self.student.config.ablations.ratio_sampling;
        let ratios = self.ratios.clone();
        let student = &self.student;
        let mut params = student.params.clone();
        let stats = self.trainer.update(&mut params, &trainable, lr, |tape, vars, rng| {
            let bound = student.bind_with(tape, vars)?;
            let mut total: Option<Var> = None;
            for (ex, q) in batch {
                let rs = if sampling { vec![sample_ratio(rng, &ratios)] } else { ratios.clone() };
                let l = bound.multi_ratio_loss(tape, ex, q, &rs)?;
                total = Some(match total {
                    None => l,
                    Some(t) => tape.add(t, l)?,
                });
            }
            tape.scale(total.expect("nonempty batch"), T::from_f64(1.0 / batch.len() as f64))
        })?;
        self.student.params = params;
        Ok(stats)
    }
}

/// Whether next-token training updates every weight or a low-rank adapter.
#[derive(Clone, Debug, PartialEq)]
pub enum LmTarget<T> {
    Full,
    Adapter { base: ModelWeights<T>, rank: usize, alpha: f64 },
}

/// Answer-only next-token training of a whole model or of an adapter.
#[derive(Clone, Debug)]
pub struct LmState<T> {
    pub config: ModelConfig,
    pub target: LmTarget<T>,
    pub params: ParamSet<T>,
    pub trainer: Trainer<T>,
}

impl<T: Scalar> LmState<T> {
    pub fn full(cfg: &TrainConfig, init: ModelWeights<T>) -> Self {
        let all: BTreeSet<String> = init.params.names().cloned().collect();
        let trainer = Trainer::new(cfg, &init.params, &all);
        LmState { config: init.config, target: LmTarget::Full, params: init.params, trainer }
    }

    pub fn adapter(cfg: &TrainConfig, base: &ModelWeights<T>) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0002);
        let adapter = LowRankAdapter::init(base, &cfg.adapter, &mut rng)?;
        let all: BTreeSet<String> = adapter.params.names().cloned().collect();
        let trainer = Trainer::new(cfg, &adapter.params, &all);
        Ok(LmState {
            config: base.config,
            target: LmTarget::Adapter { base: base.clone(), rank: adapter.rank, alpha: adapter.alpha },
            params: adapter.params,
            trainer,
        })
    }

    pub fn train_step(&mut self, batch: &[&PackedExample]) -> Result<StepStats> {
        let lr = self.trainer.lr();
        self.train_step_with_lr(batch, lr)
    }

    pub fn train_step_with_lr(&mut self, batch: &[&PackedExample], lr: f64) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let trainable: BTreeSet<String> = self.params.names().cloned().collect();
        let config = self.config;
        let target = &self.target;
        self.trainer.update(&mut self.params, &trainable, lr, |tape, vars, _| {
            let model = match target {
                LmTarget::Full => BoundModel::new(tape, config, vars.clone(), None)?,
                LmTarget::Adapter { base, rank, alpha } => {
                    let frozen = base.params.bind(tape, false);
                    BoundModel::new(tape, config, frozen, Some((vars, alpha / *rank as f64)))?
                }
            };
            let mut total: Option<Var> = None;
            for ex in batch {
                let l = packed_cross_entropy(tape, &model, ex)?;
                total = Some(match total {
                    None => l,
                    Some(t) => tape.add(t, l)?,
                });
            }
            tape.scale(total.expect("nonempty batch"), T::from_f64(1.0 / batch.len() as f64))
        })
    }

    /// The trained model; adapters are merged into their base.
    pub fn weights(&self) -> Result<ModelWeights<T>> {
        match &self.target {
            LmTarget::Full => ModelWeights::from_params(self.config, self.params.clone()),
            LmTarget::Adapter { base, rank, alpha } => {
                let adapter = LowRankAdapter { rank: *rank, alpha: *alpha, params: self.params.clone() };
                merge_adapter(base, &adapter)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Full-parameter training from random initialization.
    Pretrain(ModelConfig),
    /// Full-parameter training that resumes from an existing model.
    Continue,
    /// Adapter training on a base model, merged at the end.
    TeacherFinetune,
    /// Compressor distillation against a frozen teacher.
    Distill,
}

#[derive(Clone, Debug)]
pub enum TrainOutcome<T> {
    Model(ModelWeights<T>),
    Student(Student<T>),
}

/// Tab-separated `step lr loss grad_norm wall_ms` lines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub lines: Vec<String>,
}

impl TrainLog {
    pub fn push(&mut self, s: &StepStats, wall_ms: u128) {
        self.lines.push(format!("{}\t{:.6e}\t{:.6}\t{:.6}\t{}", s.step, s.lr, s.loss, s.grad_norm, wall_ms));
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        for l in &self.lines {
            writeln!(f, "{l}")?;
        }
        Ok(())
    }
}

/// File names written by [`run_training`].
pub const MODEL_FILE: &str = "model.bin";
pub const STUDENT_FILE: &str = "student.bin";
pub const STATE_FILE: &str = "state.bin";
pub const LOG_FILE: &str = "train.log";

/// Trains in `mode` on `corpus` and writes checkpoints, state and log to
/// `out_dir` when given. `init` is the base model for teacher finetuning and
/// the teacher for distillation. `progress` sees every step.
pub fn run_training<T: Scalar>(
    cfg: &TrainConfig,
    mode: Mode,
    corpus: &[TrainingExample],
    init: Option<&ModelWeights<T>>,
    out_dir: Option<&Path>,
    progress: &mut dyn FnMut(&StepStats),
) -> Result<(TrainOutcome<T>, TrainLog)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("training corpus is empty".into()));
    }
    for ex in corpus {
        ex.check_budget(cfg.max_context, cfg.max_answer)?;
    }
    if let Some(d) = out_dir {
        fs::create_dir_all(d)?;
    }
    let start = Instant::now();
    let mut log = TrainLog::default();
    let ckpt = |step: u64| cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.steps;
    let path = |name: String| -> Option<PathBuf> { out_dir.map(|d| d.join(name)) };

    let outcome = match mode {
        Mode::Pretrain(_) | Mode::Continue | Mode::TeacherFinetune => {
            let mut state = match mode {
                Mode::Pretrain(mc) => {
                    mc.validate()?;
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0003);
                    LmState::full(cfg, ModelWeights::init(mc, &mut rng)?)
                }
                Mode::Continue => {
                    let base = init.ok_or_else(|| Error::Config("continued training needs a model".into()))?;
                    LmState::full(cfg, base.clone())
                }
                _ => {
                    let base = init.ok_or_else(|| Error::Config("teacher finetuning needs a base model".into()))?;
                    LmState::adapter(cfg, base)?
                }
            };
            let sequences = match mode {
                Mode::Pretrain(mc) => PackedExample::pack_corpus(corpus, mc.max_positions)?,
                Mode::Continue => PackedExample::pack_corpus(corpus, state.config.max_positions)?,
                _ => corpus.iter().map(PackedExample::single).collect(),
            };
            for _ in 0..cfg.steps {
                let idx = state.trainer.sample_batch(sequences.len(), cfg.batch_size);
                let batch: Vec<&PackedExample> = idx.iter().map(|&i| &sequences[i]).collect();
                let stats = state.train_step(&batch)?;
                log.push(&stats, start.elapsed().as_millis());
                progress(&stats);
                if ckpt(stats.step) {
                    if let Some(p) = path(format!("checkpoint-{}.bin", stats.step)) {
                        checkpoint::save_model(&p, &state.weights()?)?;
                        state.trainer.save_state(&path(format!("state-{}.bin", stats.step)).expect("dir"))?;
                    }
                }
            }
            let weights = state.weights()?;
            if let Some(p) = path(MODEL_FILE.into()) {
                checkpoint::save_model(&p, &weights)?;
                state.trainer.save_state(&path(STATE_FILE.into()).expect("dir"))?;
                if let LmTarget::Adapter { .. } = state.target {
                    let mut meta = Metadata::new();
                    meta.set("kind", "adapter");
                    checkpoint::save(&path("adapter.bin".into()).expect("dir"), &meta, &state.params)?;
                }
            }
            TrainOutcome::Model(weights)
        }
        Mode::Distill => {
            let teacher = init.ok_or_else(|| Error::Config("distillation needs a teacher checkpoint".into()))?;
            let digest = teacher.digest();
            let mut state = DistillState::new(cfg, teacher)?;
            let mut cache = TeacherCache::new(teacher, corpus.len());
            for _ in 0..cfg.steps {
                let idx = state.trainer.sample_batch(corpus.len(), cfg.batch_size);
                let mut qs = Vec::with_capacity(idx.len());
                for &i in &idx {
                    qs.push(cache.get(i, &corpus[i])?.clone());
                }
                let batch: Vec<(&TrainingExample, &TeacherOutput<T>)> =
                    idx.iter().zip(&qs).map(|(&i, q)| (&corpus[i], q)).collect();
                let stats = state.train_step(&batch)?;
                log.push(&stats, start.elapsed().as_millis());
                progress(&stats);
                if ckpt(stats.step) {
                    if let Some(p) = path(format!("checkpoint-{}.bin", stats.step)) {
                        state.student.save(&p, &digest)?;
                        state.trainer.save_state(&path(format!("state-{}.bin", stats.step)).expect("dir"))?;
                    }
                }
            }
            if let Some(p) = path(STUDENT_FILE.into()) {
                state.student.save(&p, &digest)?;
                state.trainer.save_state(&path(STATE_FILE.into()).expect("dir"))?;
            }
            TrainOutcome::Student(state.student)
        }
    };
    if let Some(p) = path(LOG_FILE.into()) {
        log.write(&p)?;
    }
    Ok((outcome, log))
}
