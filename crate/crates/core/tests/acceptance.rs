//! Acceptance criteria 1 to 8. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any of them fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use softpool::metrics::{Aggregate, SystemKey};
use softpool::pipeline::{run_all, RunConfig, RunArtifacts};
use softpool::verify::{run_suite, Suite, SuiteReport, VerifyOptions};

struct Outcome {
    passed: bool,
    summary: String,
}

fn suite_outcome(suite: Suite, budget: Duration) -> Outcome {
    let start = Instant::now();
    let report: SuiteReport = run_suite(suite, &VerifyOptions::default());
    let elapsed = start.elapsed();
    let failures: Vec<String> = report.failures().map(|c| format!("{}: {}", c.name, c.detail)).collect();
    let in_time = elapsed <= budget;
    let mut summary = format!("{} checks in {:.1}s (budget {}s)", report.checks.len(), elapsed.as_secs_f64(), budget.as_secs());
    if !failures.is_empty() {
        summary.push_str(&format!("; failed: {}", failures.join("; ")));
    }
    Outcome { passed: report.passed && in_time, summary }
}

fn student_em(agg: &Aggregate, ratio: usize) -> Option<(f64, Option<f64>)> {
    agg.students
        .iter()
        .find(|(k, _): &(&SystemKey, _)| k.system == "mean-pool" && k.ratio == ratio)
        .map(|(_, (m, rel))| (m.em, rel.em))
}

fn pipeline_outcome(art: &RunArtifacts, elapsed: Duration, vocab: usize, cfg: &RunConfig) -> Outcome {
    let report = &art.report;
    let (Some(ind), Some(ood)) = (&report.in_domain, &report.out_of_domain) else {
        return Outcome { passed: false, summary: "report lacks a domain group".into() };
    };
    let teacher_em = ind.teacher.em;
    let r1 = student_em(ind, 1).and_then(|s| s.1);
    let r4 = student_em(ind, 4).and_then(|s| s.1);
    let ood_r1 = student_em(ood, 1).and_then(|s| s.1);
    let ood_r4 = student_em(ood, 4).and_then(|s| s.1);
    let shape_ok = cfg.model.d_model == 64
        && cfg.model.n_layers == 2
        && cfg.model.n_heads == 4
        && vocab <= 512
        && cfg.distill.max_context <= 64;
    let checks = [
        ("shape", shape_ok),
        ("teacher EM >= 0.95", teacher_em >= 0.95),
        ("r=1 relative EM >= 0.90", r1.is_some_and(|v| v >= 0.90)),
        ("r=4 relative EM >= 0.30", r4.is_some_and(|v| v >= 0.30)),
        ("runtime <= 30 min", elapsed <= Duration::from_secs(30 * 60)),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
    let mut summary = format!(
        "teacher EM {teacher_em:.3}, relative EM r=1 {} r=4 {} (out-of-domain r=1 {} r=4 {}), vocab {vocab}, {:.0}s",
        fmt(r1),
        fmt(r4),
        fmt(ood_r1),
        fmt(ood_r4),
        elapsed.as_secs_f64()
    );
    if !failed.is_empty() {
        summary.push_str(&format!("; failed: {}", failed.join(", ")));
    }
    Outcome { passed: failed.is_empty(), summary }
}

/// Every file under `root` except training logs, which record wall time.
fn artifacts(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).expect("readable run directory") {
            let path = entry.expect("directory entry").path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n != "train.log") {
                let rel = path.strip_prefix(root).unwrap().to_path_buf();
                out.insert(rel, fs::read(&path).expect("readable artifact"));
            }
        }
    }
    out
}

fn determinism_outcome(first: &Path, second: &Path) -> Outcome {
    let a = artifacts(first);
    let b = artifacts(second);
    let mut differing: Vec<String> = a
        .iter()
        .filter(|(p, bytes)| b.get(*p) != Some(bytes))
        .map(|(p, _)| p.display().to_string())
        .collect();
    differing.extend(b.keys().filter(|p| !a.contains_key(*p)).map(|p| p.display().to_string()));
    let checkpoints = a.keys().filter(|p| p.extension().is_some_and(|e| e == "bin")).count();
    let reports = a.keys().filter(|p| p.starts_with("eval")).count();
    let mut summary = format!("{} files compared ({checkpoints} checkpoints, {reports} reports)", a.len());
    if !differing.is_empty() {
        summary.push_str(&format!("; differing: {}", differing.join(", ")));
    }
    Outcome { passed: differing.is_empty() && checkpoints > 0 && reports > 0, summary }
}

fn timed_run(cfg: &RunConfig, dir: &Path) -> Result<(RunArtifacts, Duration), String> {
    let start = Instant::now();
    let art = run_all(cfg, dir, &mut |_, _| {}).map_err(|e| e.to_string())?;
    Ok((art, start.elapsed()))
}

fn main() -> ExitCode {
    let mut results: Vec<(u8, &str, Outcome)> = Vec::new();
    let mut report = |n: u8, name: &'static str, o: Outcome| {
        println!("criterion {n} {name}: {} ({})", if o.passed { "PASS" } else { "FAIL" }, o.summary);
        results.push((n, name, o));
    };

    report(1, "pooling oracle", suite_outcome(Suite::PoolingOracle, Duration::from_secs(60)));
    report(2, "gradient suite", suite_outcome(Suite::Gradients, Duration::from_secs(5 * 60)));
    report(3, "prefix property", suite_outcome(Suite::PrefixProperty, Duration::from_secs(60)));
    report(4, "loss algebra", suite_outcome(Suite::LossAlgebra, Duration::from_secs(5 * 60)));
    report(5, "cost accounting", suite_outcome(Suite::CostAccounting, Duration::from_secs(5 * 60)));
    report(6, "metric arithmetic", suite_outcome(Suite::Metrics, Duration::from_secs(60)));

    let cfg = RunConfig::desk();
    let vocab = cfg.tokenizer().vocab_size();
    let first = tempfile::tempdir().expect("temporary directory");
    let second = tempfile::tempdir().expect("temporary directory");
    match timed_run(&cfg, first.path()) {
        Ok((art, elapsed)) => {
            report(7, "desk pipeline", pipeline_outcome(&art, elapsed, vocab, &cfg));
            let again = timed_run(&cfg, second.path());
            let o = match again {
                Ok(_) => determinism_outcome(first.path(), second.path()),
                Err(e) => Outcome { passed: false, summary: format!("second run failed: {e}") },
            };
            report(8, "determinism", o);
        }
        Err(e) => {
            report(7, "desk pipeline", Outcome { passed: false, summary: format!("run failed: {e}") });
            report(8, "determinism", Outcome { passed: false, summary: "no first run to compare".into() });
        }
    }

    let failed = results.iter().filter(|r| !r.2.passed).count();
    println!("acceptance: {} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
