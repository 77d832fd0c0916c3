//! Answer scoring (exact match, token F1, substring accuracy), the
//! teacher-normalized score, macro aggregation and report emission.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::Domain;
use crate::error::{Error, Result};

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Lowercases, strips ASCII punctuation, drops the articles `a`, `an`,
/// `the` and collapses whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lowered = s.to_lowercase();
    let no_punct: String = lowered.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    no_punct
        .split_whitespace()
        .filter(|w| !ARTICLES.contains(w))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn exact_match(pred: &str, gold: &str) -> f64 {
    f64::from(u8::from(normalize_answer(pred) == normalize_answer(gold)))
}

pub fn token_f1(pred: &str, gold: &str) -> f64 {
    let p = normalize_answer(pred);
    let g = normalize_answer(gold);
    let pt: Vec<&str> = p.split_whitespace().collect();
    let gt: Vec<&str> = g.split_whitespace().collect();
    match (pt.is_empty(), gt.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gt {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in &pt {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pt.len() as f64;
    let recall = overlap as f64 / gt.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn substring_accuracy(pred: &str, gold: &str) -> f64 {
    f64::from(u8::from(normalize_answer(pred).contains(&normalize_answer(gold))))
}

/// `(m_fc - m_no_ctx) / (m_teacher - m_no_ctx)`, unclamped.
pub fn teacher_normalized(m_fc: f64, m_teacher: f64, m_no_ctx: f64) -> Result<f64> {
    let denom = m_teacher - m_no_ctx;
    if denom == 0.0 {
        return Err(Error::DegenerateDenominator(m_teacher));
    }
    Ok((m_fc - m_no_ctx) / denom)
}

/// Mean scores over a set of examples, each in `[0, 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub em: f64,
    pub f1: f64,
    pub substring_acc: f64,
}

impl MetricValues {
    pub fn of(pred: &str, gold: &str) -> Self {
        MetricValues { em: exact_match(pred, gold), f1: token_f1(pred, gold), substring_acc: substring_accuracy(pred, gold) }
    }

    /// Averages per-example scores over `(prediction, gold)` pairs.
    pub fn score<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let all: Vec<MetricValues> = pairs.into_iter().map(|(p, g)| Self::of(p, g)).collect();
        Self::mean(&all)
    }

    pub fn mean(values: &[MetricValues]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("cannot average zero scores".into()));
        }
        let n = values.len() as f64;
        Ok(MetricValues {
            em: values.iter().map(|v| v.em).sum::<f64>() / n,
            f1: values.iter().map(|v| v.f1).sum::<f64>() / n,
            substring_acc: values.iter().map(|v| v.substring_acc).sum::<f64>() / n,
        })
    }
}

/// Identifies one compressed-context system in a report.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SystemKey {
    /// Compressor name (for example `mean-pool`).
    pub system: String,
    /// `single` or `multi`.
    pub regime: String,
    pub ratio: usize,
}

/// Scores of every condition on one evaluation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub dataset: String,
    pub domain: Domain,
    /// Teacher given the full context.
    pub teacher: MetricValues,
    /// Teacher given only the prompt.
    pub no_context: MetricValues,
    pub students: BTreeMap<SystemKey, MetricValues>,
}

/// `teacher_normalized` for EM and F1; `None` where the denominator vanishes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Relative {
    pub em: Option<f64>,
    pub f1: Option<f64>,
}

impl DatasetReport {
    pub fn relative(&self, m: &MetricValues) -> Relative {
        Relative {
            em: teacher_normalized(m.em, self.teacher.em, self.no_context.em).ok(),
            f1: teacher_normalized(m.f1, self.teacher.f1, self.no_context.f1).ok(),
        }
    }
}

/// Unweighted means over a group of datasets. Relative scores are
/// normalized per dataset first and then averaged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n_datasets: usize,
    pub teacher: MetricValues,
    pub no_context: MetricValues,
    pub students: BTreeMap<SystemKey, (MetricValues, Relative)>,
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Order of teacher normalization and macro averaging in [`aggregate_with`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Normalize each dataset's scores, then average the relative values.
    #[default]
    PerDataset,
    /// Average the raw scores, then normalize the averages.
    OfMeans,
}

fn aggregate_group(reports: &[&DatasetReport], mode: Normalization) -> Result<Aggregate> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("no dataset reports to aggregate".into()));
    }
    let teacher = MetricValues::mean(&reports.iter().map(|r| r.teacher).collect::<Vec<_>>())?;
    let no_context = MetricValues::mean(&reports.iter().map(|r| r.no_context).collect::<Vec<_>>())?;
    let mut keys: Vec<&SystemKey> = reports.iter().flat_map(|r| r.students.keys()).collect();
    keys.sort();
    keys.dedup();
    let mut students = BTreeMap::new();
    for key in keys {
        let present: Vec<&&DatasetReport> = reports.iter().filter(|r| r.students.contains_key(key)).collect();
        let vals: Vec<MetricValues> = present.iter().map(|r| r.students[key]).collect();
        let mean = MetricValues::mean(&vals)?;
        let relative = match mode {
            Normalization::PerDataset => {
                let rel: Vec<Relative> = present.iter().map(|r| r.relative(&r.students[key])).collect();
                Relative { em: mean_opt(rel.iter().map(|r| r.em)), f1: mean_opt(rel.iter().map(|r| r.f1)) }
            }
            Normalization::OfMeans => {
                let t = MetricValues::mean(&present.iter().map(|r| r.teacher).collect::<Vec<_>>())?;
                let n = MetricValues::mean(&present.iter().map(|r| r.no_context).collect::<Vec<_>>())?;
                Relative {
                    em: teacher_normalized(mean.em, t.em, n.em).ok(),
                    f1: teacher_normalized(mean.f1, t.f1, n.f1).ok(),
                }
            }
        };
        students.insert(key.clone(), (mean, relative));
    }
    Ok(Aggregate { n_datasets: reports.len(), teacher, no_context, students })
}

/// Difference in-domain minus out-of-domain for one system.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gap {
    pub em: f64,
    pub f1: f64,
    pub relative_em: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub datasets: Vec<DatasetReport>,
    pub overall: Aggregate,
    pub in_domain: Option<Aggregate>,
    pub out_of_domain: Option<Aggregate>,
    pub gap: BTreeMap<SystemKey, Gap>,
}

pub fn aggregate(reports: Vec<DatasetReport>) -> Result<EvalReport> {
    aggregate_with(reports, Normalization::PerDataset)
}

pub fn aggregate_with(reports: Vec<DatasetReport>, mode: Normalization) -> Result<EvalReport> {
    let all: Vec<&DatasetReport> = reports.iter().collect();
    let overall = aggregate_group(&all, mode)?;
    let pick = |d: Domain| -> Result<Option<Aggregate>> {
        let group: Vec<&DatasetReport> = reports.iter().filter(|r| r.domain == d).collect();
        if group.is_empty() {
            Ok(None)
        } else {
            aggregate_group(&group, mode).map(Some)
        }
    };
    let in_domain = pick(Domain::In)?;
    let out_of_domain = pick(Domain::Out)?;
    let mut gap = BTreeMap::new();
    if let (Some(i), Some(o)) = (&in_domain, &out_of_domain) {
        for (key, (mi, ri)) in &i.students {
            if let Some((mo, ro)) = o.students.get(key) {
                let relative_em = ri.em.zip(ro.em).map(|(a, b)| a - b);
                gap.insert(key.clone(), Gap { em: mi.em - mo.em, f1: mi.f1 - mo.f1, relative_em });
            }
        }
    }
    Ok(EvalReport { datasets: reports, overall, in_domain, out_of_domain, gap })
}

pub const CSV_HEADER: &str = "dataset,system,ratio,regime,em,f1,substring_acc,relative_em,relative_f1";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn csv_row(out: &mut String, dataset: &str, system: &str, ratio: &str, regime: &str, m: &MetricValues, rel: Relative) {
    let _ = writeln!(
        out,
        "{dataset},{system},{ratio},{regime},{:.6},{:.6},{:.6},{},{}",
        m.em,
        m.f1,
        m.substring_acc,
        fmt_opt(rel.em),
        fmt_opt(rel.f1)
    );
}

impl EvalReport {
    /// Per-dataset rows followed by the macro rows (`macro`, `macro-in`,
    /// `macro-out`). Values are in `[0, 1]`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(CSV_HEADER);
        out.push('\n');
        for d in &self.datasets {
            csv_row(&mut out, &d.dataset, "original", "", "-", &d.teacher, d.relative(&d.teacher));
            csv_row(&mut out, &d.dataset, "no-context", "", "-", &d.no_context, d.relative(&d.no_context));
            for (key, m) in &d.students {
                csv_row(&mut out, &d.dataset, &key.system, &key.ratio.to_string(), &key.regime, m, d.relative(m));
            }
        }
        for (name, agg) in self.aggregates() {
            let full = Relative { em: Some(1.0), f1: Some(1.0) };
            let none = Relative { em: Some(0.0), f1: Some(0.0) };
            csv_row(&mut out, name, "original", "", "-", &agg.teacher, full);
            csv_row(&mut out, name, "no-context", "", "-", &agg.no_context, none);
            for (key, (m, rel)) in &agg.students {
                csv_row(&mut out, name, &key.system, &key.ratio.to_string(), &key.regime, m, *rel);
            }
        }
        out
    }

    fn aggregates(&self) -> Vec<(&'static str, &Aggregate)> {
        let mut v = vec![("macro", &self.overall)];
        if let Some(a) = &self.in_domain {
            v.push(("macro-in", a));
        }
        if let Some(a) = &self.out_of_domain {
            v.push(("macro-out", a));
        }
        v
    }

    /// Fixed-width table: one row per system (grouped by compressor, then
    /// regime, then ratio), one F1/EM column pair per dataset plus the
    /// macro average, all scaled by 100.
    pub fn to_table(&self) -> String {
        let mut keys: Vec<&SystemKey> = self.overall.students.keys().collect();
        keys.sort_by(|a, b| (&a.system, &a.regime, a.ratio).cmp(&(&b.system, &b.regime, b.ratio)));
        let mut out = String::new();
        let _ = write!(out, "{:<14}{:<8}{:>6}", "system", "regime", "ratio");
        for d in &self.datasets {
            let _ = write!(out, " | {:>17}", format!("{} F1/EM", d.dataset));
        }
        let _ = writeln!(out, " | {:>17} | {:>8}", "mean F1/EM", "rel. EM");
        let cell = |m: &MetricValues| format!("{:>8.2}/{:<8.2}", 100.0 * m.f1, 100.0 * m.em);
        let line = |out: &mut String, name: &str, regime: &str, ratio: &str, per: Vec<Option<MetricValues>>, mean: &MetricValues, rel: Option<f64>| {
            let _ = write!(out, "{name:<14}{regime:<8}{ratio:>6}");
            for m in per {
                let _ = write!(out, " | {:>17}", m.as_ref().map(cell).unwrap_or_else(|| "-".into()));
            }
            let _ = writeln!(out, " | {:>17} | {:>8}", cell(mean), rel.map(|r| format!("{:.3}", r)).unwrap_or_else(|| "-".into()));
        };
        line(&mut out, "Original", "-", "-", self.datasets.iter().map(|d| Some(d.teacher)).collect(), &self.overall.teacher, Some(1.0));
        line(&mut out, "No Ctx", "-", "-", self.datasets.iter().map(|d| Some(d.no_context)).collect(), &self.overall.no_context, Some(0.0));
        for key in keys {
            let (mean, rel) = &self.overall.students[key];
            let per = self.datasets.iter().map(|d| d.students.get(key).copied()).collect();
            line(&mut out, &key.system, &key.regime, &format!("{}x", key.ratio), per, mean, rel.em);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_answer("The Cat."), "cat");
        assert_eq!(normalize_answer("cat"), "cat");
        assert_eq!(normalize_answer("A  big   DOG!"), "big dog");
    }

    #[test]
    fn exact_match_examples() {
        assert_eq!(exact_match("The Cat.", "cat"), 1.0);
        assert_eq!(exact_match("cats", "cat"), 0.0);
        assert_eq!(exact_match("x", "x"), 1.0);
    }

    #[test]
    fn f1_examples() {
        assert!((token_f1("black cat", "cat") - 2.0 / 3.0).abs() < 1e-12);
        assert!((token_f1("x b c", "b c d") - 2.0 / 3.0).abs() < 1e-12);
        // the article is dropped before counting: p = 1, r = 2/3
        assert!((token_f1("a b c", "b c d") - 0.8).abs() < 1e-12);
        assert_eq!(token_f1("some words", "some words"), 1.0);
        assert_eq!(token_f1("", ""), 1.0);
        assert_eq!(token_f1("", "cat"), 0.0);
        assert_eq!(token_f1("cat", "the"), 0.0);
    }

    #[test]
    fn substring_examples() {
        let states = "alabama alaska arizona arkansas california colorado connecticut delaware florida georgia \
            hawaii idaho illinois indiana iowa kansas kentucky louisiana maine maryland massachusetts michigan \
            minnesota mississippi missouri montana nebraska nevada new hampshire new jersey new mexico new york \
            north carolina north dakota ohio oklahoma oregon pennsylvania rhode island south carolina south dakota \
            tennessee texas utah vermont virginia washington west virginia wisconsin wyoming";
        assert_eq!(substring_accuracy(states, "Ohio"), 1.0);
        assert_eq!(substring_accuracy("the answer is cat", "cat"), 1.0);
        assert_eq!(substring_accuracy("dog", "cat"), 0.0);
    }

    #[test]
    fn normalized_score_examples() {
        assert!((teacher_normalized(47.90, 74.33, 23.06).unwrap() - 0.4845).abs() < 1e-3);
        assert!((teacher_normalized(71.66, 74.33, 23.06).unwrap() - 0.9479).abs() < 1e-3);
        assert_eq!(teacher_normalized(74.33, 74.33, 23.06).unwrap(), 1.0);
        assert!(matches!(teacher_normalized(1.0, 0.5, 0.5), Err(Error::DegenerateDenominator(_))));
    }

    fn report(name: &str, domain: Domain, em: f64) -> DatasetReport {
        let m = |v: f64| MetricValues { em: v, f1: v, substring_acc: v };
        let key = SystemKey { system: "mean-pool".into(), regime: "multi".into(), ratio: 4 };
        DatasetReport {
            dataset: name.into(),
            domain,
            teacher: m(1.0),
            no_context: m(0.0),
            students: [(key, m(em))].into_iter().collect(),
        }
    }

    #[test]
    fn aggregation() {
        assert!(aggregate(vec![]).is_err());
        let single = aggregate(vec![report("a", Domain::In, 0.4)]).unwrap();
        assert_eq!(single.overall.students.values().next().unwrap().0.em, 0.4);
        let two = aggregate(vec![report("a", Domain::In, 0.4), report("b", Domain::Out, 0.6)]).unwrap();
        let (m, rel) = two.overall.students.values().next().unwrap();
        assert!((m.em - 0.5).abs() < 1e-12);
        assert!((rel.em.unwrap() - 0.5).abs() < 1e-12);
        assert!((two.gap.values().next().unwrap().em + 0.2).abs() < 1e-12);
        let same = aggregate(vec![report("a", Domain::In, 0.5), report("b", Domain::Out, 0.5)]).unwrap();
        assert_eq!(same.gap.values().next().unwrap().em, 0.0);
    }

    #[test]
    fn normalization_order() {
        let mut b = report("b", Domain::Out, 0.4);
        b.teacher = MetricValues { em: 0.5, f1: 0.5, substring_acc: 0.5 };
        let reports = vec![report("a", Domain::In, 0.4), b];
        let per = aggregate_with(reports.clone(), Normalization::PerDataset).unwrap();
        let of = aggregate_with(reports, Normalization::OfMeans).unwrap();
        let rel = |r: &EvalReport| r.overall.students.values().next().unwrap().1.em.unwrap();
        assert!((rel(&per) - 0.6).abs() < 1e-12);
        assert!((rel(&of) - 0.4 / 0.75).abs() < 1e-12);
    }

    #[test]
    fn csv_and_table_shapes() {
        let r = aggregate(vec![report("a", Domain::In, 0.4), report("b", Domain::Out, 0.6)]).unwrap();
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert!(lines.iter().all(|l| l.split(',').count() == 9));
        assert!(csv.contains("a,mean-pool,4,multi,0.400000,0.400000,0.400000,0.400000,0.400000"));
        let table = r.to_table();
        assert!(table.contains("Original"));
        assert!(table.contains("No Ctx"));
        assert!(table.contains("4x"));
    }
}
