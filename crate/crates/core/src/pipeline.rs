//! End-to-end desk experiment: corpus generation, base pretraining,
//! teacher finetuning, compressor distillation and evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::compressor::{RatioSet, Variant};
use crate::dataset::{
    fill_template, generate_corpus, read_jsonl, write_jsonl, Alphabet, CorpusSpec, Domain, QARecord, Split,
    TemplateLibrary, Tokenizer,
};
use crate::distillation::{
    generate_plain, run_training, Mode, Schedule, StepStats, Student, TrainConfig, TrainOutcome, TrainingExample, MODEL_FILE,
    STUDENT_FILE,
};
use crate::error::{Error, Result};
use crate::metrics::{aggregate_with, DatasetReport, EvalReport, MetricValues, Normalization, SystemKey};
use crate::model::{ModelConfig, ModelWeights};

/// Shape of the synthetic corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_keys: usize,
    pub n_values: usize,
    pub pairs_per_context: usize,
    /// Pairs per context in the short-context warmup corpus.
    pub warmup_pairs: usize,
    pub warmup_contexts: usize,
    pub questions_per_context: usize,
    pub train_contexts: usize,
    pub eval_contexts: usize,
    pub hops: usize,
    pub assign: String,
    pub separator: String,
    pub in_value_prefix: String,
    pub out_value_prefix: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_keys: 32,
            n_values: 32,
            pairs_per_context: 6,
            warmup_pairs: 2,
            warmup_contexts: 40_000,
            questions_per_context: 3,
            train_contexts: 20_000,
            eval_contexts: 100,
            hops: 1,
            assign: ":".into(),
            separator: ";".into(),
            in_value_prefix: "v".into(),
            out_value_prefix: "w".into(),
        }
    }
}

/// Transformer shape; the vocabulary size comes from the tokenizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_positions: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig { d_model: 64, n_layers: 2, n_heads: 4, d_ff: 128, max_positions: 96 }
    }
}

impl ArchConfig {
    pub fn with_vocab(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_positions: self.max_positions,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Ratios to evaluate; empty means every ratio the student was trained on.
    pub ratios: Vec<usize>,
    pub max_answer: usize,
    /// Evaluate at most this many records per eval set (0: all).
    pub limit: usize,
    pub normalization: Normalization,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { ratios: Vec::new(), max_answer: 8, limit: 0, normalization: Normalization::PerDataset }
    }
}

/// Everything one experiment needs. Stage seeds are derived from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ArchConfig,
    pub warmup: TrainConfig,
    pub pretrain: TrainConfig,
    pub teacher: TrainConfig,
    pub distill: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Laptop-sized profile used by the smoke experiment.
    pub fn desk() -> Self {
        let base = TrainConfig { max_context: 64, max_answer: 8, ..TrainConfig::desk() };
        let warmup = TrainConfig {
            steps: 2000,
            batch_size: 64,
            peak_lr: 1e-3,
            final_lr: 5e-4,
            schedule: Schedule::Constant,
            ..base.clone()
        };
        let pretrain = TrainConfig { steps: 3000, batch_size: 16, peak_lr: 1e-3, final_lr: 1e-4, ..base.clone() };
        let teacher = TrainConfig { steps: 100, batch_size: 16, peak_lr: 5e-4, final_lr: 5e-5, ..base.clone() };
        let distill = TrainConfig {
            steps: 3500,
            batch_size: 16,
            peak_lr: 2e-3,
            final_lr: 1e-4,
            ratios: RatioSet::new(vec![1, 4]).expect("valid ratios"),
            variant: Variant::MeanPool,
            ..base
        };
        RunConfig {
            seed: 7,
            data: DataConfig::default(),
            model: ArchConfig::default(),
            warmup,
            pretrain,
            teacher,
            distill,
            eval: EvalConfig::default(),
        }
    }

    /// Copy with every stage seed derived from `seed`.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.warmup.seed = self.seed.wrapping_mul(4);
        c.pretrain.seed = self.seed.wrapping_mul(4).wrapping_add(1);
        c.teacher.seed = self.seed.wrapping_mul(4).wrapping_add(2);
        c.distill.seed = self.seed.wrapping_mul(4).wrapping_add(3);
        c
    }

    pub fn validate(&self) -> Result<()> {
        for t in [&self.warmup, &self.pretrain, &self.teacher, &self.distill] {
            t.validate()?;
        }
        if self.data.warmup_pairs == 0 || self.data.warmup_pairs > self.data.pairs_per_context {
            return Err(Error::Config("data.warmup_pairs must lie in 1..=pairs_per_context".into()));
        }
        if self.eval.max_answer == 0 {
            return Err(Error::Config("eval.max_answer must be positive".into()));
        }
        self.model.with_vocab(1).validate()
    }

    pub fn corpus_spec(&self, split: Split, domain: Domain) -> CorpusSpec {
        let d = &self.data;
        let (prefix, contexts) = match (domain, split) {
            (Domain::In, Split::Train) => (&d.in_value_prefix, d.train_contexts),
            (Domain::Out, Split::Train) => (&d.out_value_prefix, d.train_contexts),
            (Domain::In, Split::Eval) => (&d.in_value_prefix, d.eval_contexts),
            (Domain::Out, Split::Eval) => (&d.out_value_prefix, d.eval_contexts),
        };
        let salt = match (split, domain) {
            (Split::Train, Domain::In) => 11,
            (Split::Train, Domain::Out) => 12,
            (Split::Eval, Domain::In) => 13,
            (Split::Eval, Domain::Out) => 14,
        };
        CorpusSpec {
            n_contexts: contexts,
            pairs_per_context: d.pairs_per_context,
            questions_per_context: d.questions_per_context,
            keys: Alphabet::new("k", d.n_keys),
            values: Alphabet::new(prefix.clone(), d.n_values),
            assign: d.assign.clone(),
            separator: d.separator.clone(),
            hops: d.hops,
            seed: self.seed.wrapping_mul(1000).wrapping_add(salt),
            split,
            domain_tag: domain,
            n_templates: TemplateLibrary::builtin(domain).len(),
        }
    }

    /// Training-split, in-domain corpus with `warmup_pairs` pairs per context.
    pub fn warmup_spec(&self) -> CorpusSpec {
        let mut spec = self.corpus_spec(Split::Train, Domain::In);
        spec.pairs_per_context = self.data.warmup_pairs;
        spec.n_contexts = self.data.warmup_contexts;
        spec.n_templates = 1;
        spec.questions_per_context = 1;
        spec.seed = self.seed.wrapping_mul(1000).wrapping_add(15);
        spec
    }

    /// Vocabulary covering every symbol the generator and templates can emit.
    pub fn tokenizer(&self) -> Tokenizer {
        let d = &self.data;
        let mut symbols: Vec<String> = Alphabet::new("k", d.n_keys).symbols();
        symbols.extend(Alphabet::new(d.in_value_prefix.clone(), d.n_values).symbols());
        symbols.extend(Alphabet::new(d.out_value_prefix.clone(), d.n_values).symbols());
        symbols.extend([d.assign.clone(), d.separator.clone()]);
        let mut texts: Vec<String> = Vec::new();
        for domain in [Domain::In, Domain::Out] {
            for t in TemplateLibrary::builtin(domain).templates() {
                texts.push(fill_template(t, "", ""));
            }
        }
        let template_tok = Tokenizer::from_texts(texts.iter().map(String::as_str));
        symbols.extend(template_tok.symbols().iter().cloned());
        Tokenizer::new(symbols)
    }
}

pub fn data_file(split: Split, domain: Domain) -> String {
    format!("{split}_{domain}.jsonl")
}

pub const WARMUP_FILE: &str = "warmup_in.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataManifest {
    pub seed: u64,
    pub vocab_size: usize,
    pub files: BTreeMap<String, usize>,
}

/// Writes the four split/domain JSONL files, the vocabulary and a manifest.
pub fn gen_data(cfg: &RunConfig, dir: &Path) -> Result<DataManifest> {
    fs::create_dir_all(dir)?;
    let tok = cfg.tokenizer();
    let mut files = BTreeMap::new();
    for split in [Split::Train, Split::Eval] {
        for domain in [Domain::In, Domain::Out] {
            let records = generate_corpus(&cfg.corpus_spec(split, domain))?;
            let lib = TemplateLibrary::builtin(domain);
            for r in &records {
                TrainingExample::from_record(r, &lib, &tok)?;
            }
            let name = data_file(split, domain);
            write_jsonl(&records, &dir.join(&name))?;
            files.insert(name, records.len());
        }
    }
    let warm = generate_corpus(&cfg.warmup_spec())?;
    write_jsonl(&warm, &dir.join(WARMUP_FILE))?;
    files.insert(WARMUP_FILE.to_string(), warm.len());
    tok.save(&dir.join(VOCAB_FILE))?;
    let manifest = DataManifest { seed: cfg.seed, vocab_size: tok.vocab_size(), files };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
    Ok(manifest)
}

/// Records and their token-level examples for one split/domain file.
#[derive(Clone, Debug)]
pub struct LoadedSet {
    pub name: String,
    pub domain: Domain,
    pub records: Vec<QARecord>,
    pub examples: Vec<TrainingExample>,
}

pub fn load_set(dir: &Path, split: Split, domain: Domain, tok: &Tokenizer) -> Result<LoadedSet> {
    load_file(&dir.join(data_file(split, domain)), domain, tok)
}

pub fn load_file(path: &Path, domain: Domain, tok: &Tokenizer) -> Result<LoadedSet> {
    let records = read_jsonl(path)?;
    let lib = TemplateLibrary::builtin(domain);
    let examples = records.iter().map(|r| TrainingExample::from_record(r, &lib, tok)).collect::<Result<_>>()?;
    let name = format!("kv-{domain}");
    Ok(LoadedSet { name, domain, records, examples })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Warmup,
    Pretrain,
    Teacher,
    Distill,
}

impl Stage {
    pub fn dir_name(self) -> &'static str {
        match self {
            Stage::Warmup => "warmup",
            Stage::Pretrain => "base",
            Stage::Teacher => "teacher",
            Stage::Distill => "student",
        }
    }
}

/// Runs one training stage. Warmup reads the short-context warmup file,
/// pretraining reads both training files, and the teacher and distill
/// stages see only the in-domain training file. `init` is the previous
/// stage's checkpoint; only the warmup stage starts from scratch.
pub fn train_stage(
    cfg: &RunConfig,
    stage: Stage,
    data_dir: &Path,
    init: Option<&Path>,
    out_dir: &Path,
    progress: &mut dyn FnMut(&StepStats),
) -> Result<PathBuf> {
    let cfg = cfg.resolved();
    let tok = Tokenizer::load(&data_dir.join(VOCAB_FILE))?;
    let examples = match stage {
        Stage::Warmup => load_file(&data_dir.join(WARMUP_FILE), Domain::In, &tok)?.examples,
        Stage::Pretrain => {
            let mut all = load_set(data_dir, Split::Train, Domain::In, &tok)?.examples;
            all.extend(load_set(data_dir, Split::Train, Domain::Out, &tok)?.examples);
            all
        }
        _ => load_set(data_dir, Split::Train, Domain::In, &tok)?.examples,
    };
    let init_weights = match init {
        Some(p) => Some(checkpoint::load_model::<f32>(p)?),
        None => None,
    };
    let (tc, mode) = match stage {
        Stage::Warmup => (&cfg.warmup, Mode::Pretrain(cfg.model.with_vocab(tok.vocab_size()))),
        Stage::Pretrain => (&cfg.pretrain, Mode::Continue),
        Stage::Teacher => (&cfg.teacher, Mode::TeacherFinetune),
        Stage::Distill => (&cfg.distill, Mode::Distill),
    };
    if stage != Stage::Warmup && init_weights.is_none() {
        return Err(Error::Config(format!("the {} stage needs an input checkpoint", stage.dir_name())));
    }
    let (outcome, _) = run_training(tc, mode, &examples, init_weights.as_ref(), Some(out_dir), progress)?;
    Ok(out_dir.join(match outcome {
        TrainOutcome::Model(_) => MODEL_FILE,
        TrainOutcome::Student(_) => STUDENT_FILE,
    }))
}

/// A trained student together with how it is labelled in reports.
#[derive(Clone, Debug)]
pub struct StudentEntry {
    pub student: Student<f32>,
    pub regime: String,
}

impl StudentEntry {
    pub fn new(student: Student<f32>) -> Self {
        let regime = if student.config.ratios.len() > 1 { "multi" } else { "single" };
        StudentEntry { student, regime: regime.into() }
    }
}

/// Predictions of all three conditions for one eval set.
pub fn evaluate_set(
    teacher: &ModelWeights<f32>,
    students: &[StudentEntry],
    ratios: &[usize],
    set: &LoadedSet,
    tok: &Tokenizer,
    cfg: &EvalConfig,
) -> Result<DatasetReport> {
    let n = if cfg.limit == 0 { set.examples.len() } else { cfg.limit.min(set.examples.len()) };
    if n == 0 {
        return Err(Error::InvalidArgument(format!("eval set {} is empty", set.name)));
    }
    let eoa = tok.eoa_id();
    let decode = |ids: Vec<usize>| tok.detokenize(&ids);
    let mut full = Vec::with_capacity(n);
    let mut none = Vec::with_capacity(n);
    let mut per_student: BTreeMap<SystemKey, Vec<MetricValues>> = BTreeMap::new();
    for (ex, rec) in set.examples.iter().zip(&set.records).take(n) {
        let gold = rec.answer.as_str();
        let mut with_ctx = ex.context.clone();
        with_ctx.extend_from_slice(&ex.prompt);
        full.push(MetricValues::of(&decode(generate_plain(teacher, &with_ctx, eoa, cfg.max_answer)?)?, gold));
        none.push(MetricValues::of(&decode(generate_plain(teacher, &ex.prompt, eoa, cfg.max_answer)?)?, gold));
        for entry in students {
            let trained = entry.student.config.ratios.ratios();
            let wanted: Vec<usize> = if ratios.is_empty() { trained.to_vec() } else { ratios.to_vec() };
            for &r in &wanted {
                if !trained.contains(&r) {
                    return Err(Error::Config(format!(
                        "ratio {r} was not among the trained ratios {trained:?} of the {} student",
                        entry.student.config.variant
                    )));
                }
                let ctx = entry.student.compress(&ex.context, r)?;
                let pred = decode(entry.student.generate(&ctx, &ex.prompt, eoa, cfg.max_answer)?)?;
                let key = SystemKey { system: entry.student.config.variant.to_string(), regime: entry.regime.clone(), ratio: r };
                per_student.entry(key).or_default().push(MetricValues::of(&pred, gold));
            }
        }
    }
    let students = per_student.into_iter().map(|(k, v)| Ok((k, MetricValues::mean(&v)?))).collect::<Result<_>>()?;
    Ok(DatasetReport {
        dataset: set.name.clone(),
        domain: set.domain,
        teacher: MetricValues::mean(&full)?,
        no_context: MetricValues::mean(&none)?,
        students,
    })
}

pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_TABLE: &str = "report.txt";

/// Evaluates on both eval files and writes the CSV and table into `out_dir`.
pub fn evaluate(
    cfg: &RunConfig,
    teacher: &ModelWeights<f32>,
    students: &[StudentEntry],
    data_dir: &Path,
    out_dir: &Path,
) -> Result<EvalReport> {
    let tok = Tokenizer::load(&data_dir.join(VOCAB_FILE))?;
    let mut reports = Vec::new();
    for domain in [Domain::In, Domain::Out] {
        let set = load_set(data_dir, Split::Eval, domain, &tok)?;
        reports.push(evaluate_set(teacher, students, &cfg.eval.ratios, &set, &tok, &cfg.eval)?);
    }
    let report = aggregate_with(reports, cfg.eval.normalization)?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(REPORT_CSV), report.to_csv())?;
    fs::write(out_dir.join(REPORT_TABLE), report.to_table())?;
    Ok(report)
}

/// Paths produced by [`run_all`].
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub data_dir: PathBuf,
    pub warmup: PathBuf,
    pub base: PathBuf,
    pub teacher: PathBuf,
    pub student: PathBuf,
    pub report_dir: PathBuf,
    pub report: EvalReport,
}

/// Every stage in order under `workdir`.
pub fn run_all(cfg: &RunConfig, workdir: &Path, progress: &mut dyn FnMut(Stage, &StepStats)) -> Result<RunArtifacts> {
    cfg.validate()?;
    let data_dir = workdir.join("data");
    gen_data(cfg, &data_dir)?;
    let warm = train_stage(cfg, Stage::Warmup, &data_dir, None, &workdir.join("warmup"), &mut |s| progress(Stage::Warmup, s))?;
    let base = train_stage(cfg, Stage::Pretrain, &data_dir, Some(&warm), &workdir.join("base"), &mut |s| {
        progress(Stage::Pretrain, s)
    })?;
    let teacher = train_stage(cfg, Stage::Teacher, &data_dir, Some(&base), &workdir.join("teacher"), &mut |s| {
        progress(Stage::Teacher, s)
    })?;
    let student = train_stage(cfg, Stage::Distill, &data_dir, Some(&teacher), &workdir.join("student"), &mut |s| {
        progress(Stage::Distill, s)
    })?;
    let teacher_w = checkpoint::load_model::<f32>(&teacher)?;
    let student_w = Student::load(&student, &teacher_w)?;
    let report_dir = workdir.join("eval");
    let report = evaluate(cfg, &teacher_w, &[StudentEntry::new(student_w)], &data_dir, &report_dir)?;
    Ok(RunArtifacts { data_dir, warmup: warm, base, teacher, student, report_dir, report })
}
