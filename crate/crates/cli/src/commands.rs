use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use softpool::checkpoint;
use softpool::compressor::RatioSet;
use softpool::distillation::{StepStats, Student, MODEL_FILE};
use softpool::pipeline::{self, RunConfig, Stage, StudentEntry, VOCAB_FILE};
use softpool::verify::{self, Fault, Suite, VerifyOptions};

use crate::{Cli, Command, EvalArgs, GenDataArgs, TrainArgs, TrainMode, VerifyArgs};

/// Name of the resolved configuration written next to every output.
pub const CONFIG_ECHO: &str = "config.toml";

struct Ctx {
    workdir: PathBuf,
    config: RunConfig,
    log_every: u64,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.workdir.join(p)
        }
    }
}

pub fn dispatch(cli: Cli) -> Result<()> {
    let ctx = Ctx {
        config: load_config(&cli)?,
        workdir: cli.workdir,
        log_every: cli.log_every.max(1),
    };
    match cli.command {
        Command::GenData(a) => gen_data(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Verify(a) => run_verify(&ctx, a),
        Command::Run => run(&ctx),
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let path = if p.is_absolute() { p.clone() } else { cli.workdir.join(p) };
            let text = fs::read_to_string(&path).with_context(|| format!("reading config {}", path.display()))?;
            overlay_config(&text).with_context(|| format!("parsing config {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Parses `text` as a partial configuration laid over the defaults, so a
/// file only needs the keys it changes. Unknown keys are still rejected.
pub fn overlay_config(text: &str) -> Result<RunConfig> {
    let user: toml::Table = toml::from_str(text)?;
    let mut merged = toml::Table::try_from(RunConfig::default())?;
    merge(&mut merged, user);
    Ok(merged.try_into()?)
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let text = toml::to_string(&cfg.resolved()).context("serializing the resolved config")?;
    fs::write(dir.join(CONFIG_ECHO), text)?;
    Ok(())
}

fn progress(label: &'static str, every: u64, total: u64) -> impl FnMut(&StepStats) {
    move |s: &StepStats| {
        if s.step == 1 || s.step % every == 0 || s.step == total {
            eprintln!("[{label}] step {}/{total} loss {:.5} lr {:.2e} grad {:.3}", s.step, s.loss, s.lr, s.grad_norm);
        }
    }
}

fn gen_data(ctx: &Ctx, a: GenDataArgs) -> Result<()> {
    let mut cfg = ctx.config.clone();
    if let Some(n) = a.train_contexts {
        cfg.data.train_contexts = n;
    }
    if let Some(n) = a.eval_contexts {
        cfg.data.eval_contexts = n;
    }
    if let Some(n) = a.warmup_contexts {
        cfg.data.warmup_contexts = n;
    }
    let out = ctx.path(&a.out);
    let manifest = pipeline::gen_data(&cfg, &out)?;
    echo_config(&cfg, &out)?;
    for (name, n) in &manifest.files {
        eprintln!("wrote {n} records to {}", out.join(name).display());
    }
    eprintln!("vocabulary of {} symbols", manifest.vocab_size);
    Ok(())
}

fn require_data(dir: &Path) -> Result<()> {
    if !dir.join(VOCAB_FILE).is_file() {
        bail!("no generated data in {}; run gen-data first", dir.display());
    }
    Ok(())
}

fn require_checkpoint(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!("configuration error: {what} checkpoint {} not found", path.display());
    }
    Ok(())
}

fn apply_train_overrides(cfg: &mut RunConfig, a: &TrainArgs) -> Result<()> {
    let student_flags = a.variant.is_some()
        || a.ratios.is_some()
        || a.multi_ratio
        || a.single_ratio.is_some()
        || a.fixed_decoder
        || a.fixed_encoder
        || a.no_encoder
        || a.no_linear
        || a.ratio_sampling;
    if student_flags && a.mode != TrainMode::Distill {
        bail!("compressor flags only apply to --mode distill");
    }
    if a.warmup_steps.is_some() && a.mode != TrainMode::Base {
        bail!("--warmup-steps only applies to --mode base");
    }
    let stage = match a.mode {
        TrainMode::Base => &mut cfg.pretrain,
        TrainMode::Teacher => &mut cfg.teacher,
        TrainMode::Distill => &mut cfg.distill,
    };
    if let Some(s) = a.steps {
        stage.steps = s;
    }
    if let Some(b) = a.batch_size {
        stage.batch_size = b;
    }
    if let Some(s) = a.warmup_steps {
        cfg.warmup.steps = s;
    }
    let d = &mut cfg.distill;
    if let Some(v) = a.variant {
        d.variant = v;
    }
    if let Some(r) = &a.ratios {
        d.ratios = RatioSet::new(r.clone())?;
    }
    if let Some(r) = a.single_ratio {
        d.ratios = RatioSet::single(r)?;
    }
    let ab = &mut d.ablations;
    ab.fixed_decoder |= a.fixed_decoder;
    ab.fixed_encoder |= a.fixed_encoder;
    ab.no_encoder |= a.no_encoder;
    ab.no_linear |= a.no_linear;
    ab.ratio_sampling |= a.ratio_sampling;
    cfg.validate()?;
    Ok(())
}

fn train(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let mut cfg = ctx.config.clone();
    apply_train_overrides(&mut cfg, &a)?;
    let data = ctx.path(&a.data);
    require_data(&data)?;
    let default_out = match a.mode {
        TrainMode::Base => Stage::Pretrain.dir_name(),
        TrainMode::Teacher => Stage::Teacher.dir_name(),
        TrainMode::Distill => Stage::Distill.dir_name(),
    };
    let out = ctx.path(a.out.as_deref().unwrap_or(Path::new(default_out)));
    let every = ctx.log_every;
    let written = match a.mode {
        TrainMode::Base => {
            let init = match &a.init {
                Some(p) => {
                    let p = ctx.path(p);
                    require_checkpoint(&p, "base")?;
                    p
                }
                None => {
                    let mut log = progress("warmup", every, cfg.warmup.steps);
                    pipeline::train_stage(&cfg, Stage::Warmup, &data, None, &out.join(Stage::Warmup.dir_name()), &mut log)?
                }
            };
            let mut log = progress("base", every, cfg.pretrain.steps);
            pipeline::train_stage(&cfg, Stage::Pretrain, &data, Some(&init), &out, &mut log)?
        }
        TrainMode::Teacher => {
            let init = ctx.path(a.init.as_deref().unwrap_or(&Path::new(Stage::Pretrain.dir_name()).join(MODEL_FILE)));
            require_checkpoint(&init, "base")?;
            let mut log = progress("teacher", every, cfg.teacher.steps);
            pipeline::train_stage(&cfg, Stage::Teacher, &data, Some(&init), &out, &mut log)?
        }
        TrainMode::Distill => {
            let init = ctx.path(a.init.as_deref().unwrap_or(&Path::new(Stage::Teacher.dir_name()).join(MODEL_FILE)));
            require_checkpoint(&init, "teacher")?;
            let label = "distill";
            let mut log = progress(label, every, cfg.distill.steps);
            pipeline::train_stage(&cfg, Stage::Distill, &data, Some(&init), &out, &mut log)?
        }
    };
    echo_config(&cfg, &out)?;
    eprintln!("wrote {}", written.display());
    Ok(())
}

fn eval(ctx: &Ctx, a: EvalArgs) -> Result<()> {
    let mut cfg = ctx.config.clone();
    if let Some(r) = a.ratios {
        cfg.eval.ratios = r;
    }
    if let Some(l) = a.limit {
        cfg.eval.limit = l;
    }
    let data = ctx.path(&a.data);
    require_data(&data)?;
    let teacher_path = ctx.path(&a.teacher);
    require_checkpoint(&teacher_path, "teacher")?;
    let teacher = checkpoint::load_model::<f32>(&teacher_path)?;
    let mut students = Vec::with_capacity(a.student.len());
    for s in &a.student {
        let p = ctx.path(s);
        require_checkpoint(&p, "student")?;
        let student = Student::load(&p, &teacher).with_context(|| format!("loading {}", p.display()))?;
        students.push(StudentEntry::new(student));
    }
    let out = ctx.path(&a.out);
    let report = pipeline::evaluate(&cfg, &teacher, &students, &data, &out)?;
    echo_config(&cfg, &out)?;
    eprint!("{}", report.to_table());
    eprintln!("wrote {}", out.join(pipeline::REPORT_CSV).display());
    Ok(())
}

fn run_verify(ctx: &Ctx, a: VerifyArgs) -> Result<()> {
    let suites = if a.suites.is_empty() {
        Suite::ALL.to_vec()
    } else {
        a.suites.iter().map(|s| s.parse::<Suite>()).collect::<softpool::Result<Vec<_>>>()?
    };
    let fault = a.inject_fault.as_deref().map(str::parse::<Fault>).transpose()?;
    let opts = VerifyOptions { seed: ctx.config.seed, fault };
    let mut reports = Vec::with_capacity(suites.len());
    for suite in verify::Suite::ALL.into_iter().filter(|s| suites.contains(s)) {
        let r = verify::run_suite(suite, &opts);
        eprintln!("{} {}", if r.passed { "PASS" } else { "FAIL" }, r.suite);
        for c in r.failures() {
            eprintln!("    {}: {}", c.name, c.detail);
        }
        reports.push(r);
    }
    let lines = verify::to_json_lines(&reports);
    print!("{lines}");
    if let Some(p) = a.out {
        let p = ctx.path(&p);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&p, &lines)?;
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        bail!("{failed} of {} suites failed", reports.len());
    }
    Ok(())
}

fn run(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.config;
    echo_config(cfg, &ctx.workdir)?;
    let every = ctx.log_every;
    let artifacts = pipeline::run_all(cfg, &ctx.workdir, &mut |stage, s| {
        if s.step == 1 || s.step % every == 0 {
            eprintln!("[{}] step {} loss {:.5} lr {:.2e}", stage.dir_name(), s.step, s.loss, s.lr);
        }
    })?;
    eprint!("{}", artifacts.report.to_table());
    eprintln!("wrote {}", artifacts.report_dir.join(pipeline::REPORT_CSV).display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_keeps_unmentioned_defaults() {
        let cfg = overlay_config("[distill]\nsteps = 5\n").unwrap();
        let desk = RunConfig::default();
        assert_eq!(cfg.distill.steps, 5);
        assert_eq!(cfg.distill.peak_lr, desk.distill.peak_lr);
        assert_eq!(cfg.distill.ratios, desk.distill.ratios);
        assert_eq!(cfg.teacher, desk.teacher);
    }

    #[test]
    fn overlay_rejects_unknown_keys() {
        assert!(overlay_config("[model]\nwidth = 3\n").is_err());
        assert!(overlay_config("colour = 1\n").is_err());
    }

    #[test]
    fn echoed_config_round_trips() {
        let cfg = RunConfig::default().resolved();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(overlay_config(&text).unwrap(), cfg);
    }
}
