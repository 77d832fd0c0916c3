//! Synthetic key-value reading-comprehension corpus, prompt templates,
//! a whitespace tokenizer and JSONL IO.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    In,
    Out,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Eval => "eval",
        })
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::In => "in",
            Domain::Out => "out",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QARecord {
    pub context: String,
    pub question: String,
    pub answer: String,
    pub split: Split,
    pub domain_tag: Domain,
    pub template_id: usize,
}

/// Symbols `{prefix}0 .. {prefix}{size-1}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Alphabet {
    pub prefix: String,
    pub size: usize,
}

impl Alphabet {
    pub fn new(prefix: impl Into<String>, size: usize) -> Self {
        Alphabet { prefix: prefix.into(), size }
    }

    pub fn symbol(&self, i: usize) -> String {
        format!("{}{}", self.prefix, i)
    }

    pub fn symbols(&self) -> Vec<String> {
        (0..self.size).map(|i| self.symbol(i)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_contexts: usize,
    pub pairs_per_context: usize,
    pub questions_per_context: usize,
    pub keys: Alphabet,
    pub values: Alphabet,
    /// Token written between a key and its value.
    pub assign: String,
    /// Token closing each pair.
    pub separator: String,
    /// 1 for direct lookup; 2 chains a key through a second key.
    pub hops: usize,
    pub seed: u64,
    pub split: Split,
    pub domain_tag: Domain,
    /// Number of templates the record's `template_id` is drawn from.
    pub n_templates: usize,
}

impl CorpusSpec {
    /// Number of distinct keys a context needs.
    fn keys_needed(&self) -> usize {
        self.pairs_per_context
    }

    fn validate(&self) -> Result<()> {
        if self.keys.size == 0 || self.values.size == 0 {
            return Err(Error::Capacity("alphabets must be nonempty".into()));
        }
        if self.n_contexts == 0 || self.pairs_per_context == 0 || self.questions_per_context == 0 {
            return Err(Error::Capacity(format!(
                "need at least one context, pair and question (got {} / {} / {})",
                self.n_contexts, self.pairs_per_context, self.questions_per_context
            )));
        }
        if self.n_templates == 0 {
            return Err(Error::Capacity("template count must be positive".into()));
        }
        if !(1..=2).contains(&self.hops) {
            return Err(Error::Config(format!("hops must be 1 or 2, got {}", self.hops)));
        }
        if self.keys_needed() > self.keys.size {
            return Err(Error::Capacity(format!(
                "{} distinct keys per context from an alphabet of {}",
                self.keys_needed(),
                self.keys.size
            )));
        }
        let chains = if self.hops == 2 { self.pairs_per_context / 2 } else { self.pairs_per_context };
        if self.questions_per_context > chains {
            return Err(Error::Capacity(format!(
                "{} questions per context but only {chains} answerable chains",
                self.questions_per_context
            )));
        }
        for (what, tok) in [("assign", &self.assign), ("separator", &self.separator)] {
            if tok.is_empty() || tok.contains(char::is_whitespace) {
                return Err(Error::Config(format!("{what} token {tok:?} must be a single symbol")));
            }
        }
        Ok(())
    }
}

/// Generates `n_contexts * questions_per_context` records; a pure function of `spec`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<QARecord>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.n_contexts * spec.questions_per_context);
    let key_ids: Vec<usize> = (0..spec.keys.size).collect();
    for _ in 0..spec.n_contexts {
        let keys: Vec<usize> = key_ids.choose_multiple(&mut rng, spec.keys_needed()).copied().collect();
        let mut pairs: Vec<(String, String)> = Vec::with_capacity(keys.len());
        // (question key, answer) candidates
        let mut chains: Vec<(String, String)> = Vec::new();
        if spec.hops == 1 {
            for &k in &keys {
                let v = spec.values.symbol(rng.gen_range(0..spec.values.size));
                pairs.push((spec.keys.symbol(k), v.clone()));
                chains.push((spec.keys.symbol(k), v));
            }
        } else {
            for c in keys.chunks_exact(2) {
                let v = spec.values.symbol(rng.gen_range(0..spec.values.size));
                let (a, b) = (spec.keys.symbol(c[0]), spec.keys.symbol(c[1]));
                pairs.push((a.clone(), b.clone()));
                pairs.push((b, v.clone()));
                chains.push((a, v));
            }
            if keys.len() % 2 == 1 {
                let v = spec.values.symbol(rng.gen_range(0..spec.values.size));
                pairs.push((spec.keys.symbol(keys[keys.len() - 1]), v));
            }
        }
        pairs.shuffle(&mut rng);
        let context = pairs
            .iter()
            .map(|(k, v)| format!("{k} {} {v} {}", spec.assign, spec.separator))
            .collect::<Vec<_>>()
            .join(" ");
        let asked: Vec<&(String, String)> = chains.choose_multiple(&mut rng, spec.questions_per_context).collect();
        for (key, answer) in asked {
            out.push(QARecord {
                context: context.clone(),
                question: key.clone(),
                answer: answer.clone(),
                split: spec.split,
                domain_tag: spec.domain_tag,
                template_id: rng.gen_range(0..spec.n_templates),
            });
        }
    }
    Ok(out)
}

/// Rule-based reader: follows `key assign value` links starting from the
/// questioned key until it reaches a symbol that is not itself a key.
pub fn extract_answer(context: &str, question: &str, assign: &str) -> Option<String> {
    let toks: Vec<&str> = context.split(' ').collect();
    let mut links = BTreeMap::new();
    for w in toks.windows(3) {
        if w[1] == assign {
            links.insert(w[0], w[2]);
        }
    }
    let mut cur = question.split(' ').next()?.trim_end_matches('?');
    let mut seen = BTreeSet::new();
    while let Some(&next) = links.get(cur) {
        if !seen.insert(cur) {
            return None;
        }
        cur = next;
    }
    (!seen.is_empty()).then(|| cur.to_string())
}

/// Prompt templates for one task. Every entry holds `{C}` and `{Q}` once.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateLibrary {
    pub task: String,
    templates: Vec<String>,
}

pub const IN_DOMAIN_TEMPLATES: &str = include_str!("../data/templates/kv_in.txt");
pub const OUT_OF_DOMAIN_TEMPLATES: &str = include_str!("../data/templates/kv_out.txt");

impl TemplateLibrary {
    pub fn new(task: impl Into<String>, templates: Vec<String>) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::Template("template library is empty".into()));
        }
        for t in &templates {
            for ph in ["{C}", "{Q}"] {
                let n = t.matches(ph).count();
                if n != 1 {
                    return Err(Error::Template(format!("{t:?} contains {ph} {n} times")));
                }
            }
        }
        Ok(TemplateLibrary { task: task.into(), templates })
    }

    /// One template per nonempty line; the two-character sequence `\n`
    /// stands for a line break.
    pub fn parse(task: impl Into<String>, text: &str) -> Result<Self> {
        let templates = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.replace("\\n", "\n"))
            .collect();
        Self::new(task, templates)
    }

    pub fn load(task: impl Into<String>, path: &Path) -> Result<Self> {
        Self::parse(task, &std::fs::read_to_string(path)?)
    }

    pub fn builtin(domain: Domain) -> Self {
        let (task, text) = match domain {
            Domain::In => ("kv", IN_DOMAIN_TEMPLATES),
            Domain::Out => ("kv-out", OUT_OF_DOMAIN_TEMPLATES),
        };
        Self::parse(task, text).expect("bundled templates are well formed")
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn get(&self, id: usize) -> Result<&str> {
        self.templates
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Template(format!("template {id} of {}", self.templates.len())))
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }
}

/// Substitutes `context` and `question` into a template.
pub fn fill_template(template: &str, context: &str, question: &str) -> String {
    template.replace("{C}", context).replace("{Q}", question)
}

/// Rendered prompt: the context is kept apart because only it is compressed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub template_id: usize,
    pub text: String,
    pub context_tokens: Vec<usize>,
    pub prompt_tokens: Vec<usize>,
}

/// Renders `rec` with template `template_id`. The prompt is the template
/// with `{C}` dropped and `{Q}` filled in.
pub fn render_with(rec: &QARecord, lib: &TemplateLibrary, template_id: usize, tok: &Tokenizer) -> Result<RenderedPrompt> {
    let template = lib.get(template_id)?;
    let text = fill_template(template, &rec.context, &rec.question);
    let prompt = fill_template(template, "", &rec.question);
    Ok(RenderedPrompt {
        template_id,
        text,
        context_tokens: tok.tokenize(&rec.context)?,
        prompt_tokens: tok.tokenize(&prompt)?,
    })
}

/// Samples a template uniformly and renders `rec` with it.
pub fn render_prompt(rec: &QARecord, lib: &TemplateLibrary, tok: &Tokenizer, rng: &mut impl Rng) -> Result<RenderedPrompt> {
    let id = rng.gen_range(0..lib.len());
    render_with(rec, lib, id, tok)
}

pub const PAD: &str = "<pad>";
pub const END_OF_ANSWER: &str = "<eoa>";
pub const NEWLINE: &str = "\n";

/// Whitespace tokenizer: symbols are separated by single spaces and a line
/// break is a symbol of its own.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    symbols: Vec<String>,
    ids: BTreeMap<String, usize>,
}

impl Tokenizer {
    /// Reserved ids: 0 = pad, 1 = end of answer, 2 = line break. The
    /// remaining symbols follow in sorted order.
    pub fn new<I, S>(symbols: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let reserved = [PAD, END_OF_ANSWER, NEWLINE];
        let rest: BTreeSet<String> = symbols
            .into_iter()
            .map(Into::into)
            .filter(|s| !s.is_empty() && !reserved.contains(&s.as_str()))
            .collect();
        let symbols: Vec<String> = reserved.iter().map(|s| s.to_string()).chain(rest).collect();
        let ids = symbols.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Tokenizer { symbols, ids }
    }

    /// Every symbol that can appear in text of the given records and templates.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set = BTreeSet::new();
        for t in texts {
            for piece in split_symbols(t) {
                set.insert(piece.to_string());
            }
        }
        Tokenizer::new(set)
    }

    pub fn vocab_size(&self) -> usize {
        self.symbols.len()
    }

    pub fn pad_id(&self) -> usize {
        0
    }

    pub fn eoa_id(&self) -> usize {
        1
    }

    pub fn id(&self, symbol: &str) -> Result<usize> {
        self.ids
            .get(symbol)
            .copied()
            .ok_or_else(|| Error::Vocabulary(format!("unknown symbol {symbol:?}")))
    }

    pub fn symbol(&self, id: usize) -> Result<&str> {
        self.symbols
            .get(id)
            .map(String::as_str)
            .ok_or(Error::InvalidToken { id, vocab_size: self.symbols.len() })
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn tokenize(&self, s: &str) -> Result<Vec<usize>> {
        split_symbols(s).map(|p| self.id(p)).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        let mut prev_newline = true;
        for &id in ids {
            let s = self.symbol(id)?;
            if s == NEWLINE {
                out.push('\n');
                prev_newline = true;
            } else {
                if !prev_newline {
                    out.push(' ');
                }
                out.push_str(s);
                prev_newline = false;
            }
        }
        Ok(out)
    }

    /// One symbol per line; the line break symbol is written as `<nl>`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for s in &self.symbols {
            writeln!(w, "{}", if s == NEWLINE { "<nl>" } else { s })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let symbols: Vec<String> =
            text.lines().map(|l| if l == "<nl>" { NEWLINE.to_string() } else { l.to_string() }).collect();
        if symbols.len() < 3 || symbols[0] != PAD || symbols[1] != END_OF_ANSWER || symbols[2] != NEWLINE {
            return Err(Error::Format(format!("{} is not a vocabulary file", path.display())));
        }
        let ids: BTreeMap<String, usize> = symbols.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        if ids.len() != symbols.len() {
            return Err(Error::Format(format!("{} repeats a symbol", path.display())));
        }
        Ok(Tokenizer { symbols, ids })
    }
}

fn split_symbols(s: &str) -> impl Iterator<Item = &str> {
    s.split_inclusive('\n').flat_map(|line| {
        let (body, nl) = match line.strip_suffix('\n') {
            Some(b) => (b, Some(NEWLINE)),
            None => (line, None),
        };
        body.split(' ').filter(|p| !p.is_empty()).chain(nl)
    })
}

pub fn write_jsonl(records: &[QARecord], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<QARecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn spec(domain: Domain) -> CorpusSpec {
        CorpusSpec {
            n_contexts: 20,
            pairs_per_context: 6,
            questions_per_context: 2,
            keys: Alphabet::new("k", 16),
            values: Alphabet::new(if domain == Domain::In { "v" } else { "w" }, 16),
            assign: ":".into(),
            separator: ";".into(),
            hops: 1,
            seed: 3,
            split: Split::Train,
            domain_tag: domain,
            n_templates: 8,
        }
    }

    #[test]
    fn corpus_is_deterministic_and_sufficient() {
        let a = generate_corpus(&spec(Domain::In)).unwrap();
        assert_eq!(a, generate_corpus(&spec(Domain::In)).unwrap());
        assert_eq!(a.len(), 40);
        for r in &a {
            assert!(r.context.contains(&r.answer));
            assert_eq!(extract_answer(&r.context, &r.question, ":").as_deref(), Some(r.answer.as_str()));
        }
    }

    #[test]
    fn two_hop_answers_follow_the_chain() {
        let mut s = spec(Domain::In);
        s.hops = 2;
        s.questions_per_context = 3;
        for r in generate_corpus(&s).unwrap() {
            assert!(r.answer.starts_with('v'));
            assert_eq!(extract_answer(&r.context, &r.question, ":").as_deref(), Some(r.answer.as_str()));
        }
    }

    #[test]
    fn domains_have_disjoint_answers() {
        let a: BTreeSet<String> = generate_corpus(&spec(Domain::In)).unwrap().into_iter().map(|r| r.answer).collect();
        let b: BTreeSet<String> = generate_corpus(&spec(Domain::Out)).unwrap().into_iter().map(|r| r.answer).collect();
        assert!(a.is_disjoint(&b));
    }

    #[test]
    fn capacity_errors() {
        let mut s = spec(Domain::In);
        s.pairs_per_context = 17;
        assert!(matches!(generate_corpus(&s), Err(Error::Capacity(_))));
        let mut s = spec(Domain::In);
        s.n_contexts = 0;
        assert!(matches!(generate_corpus(&s), Err(Error::Capacity(_))));
    }

    #[test]
    fn template_substitution() {
        let lib = TemplateLibrary::new("kv", vec!["Context: {C}\nQ: {Q}\nA:".into()]).unwrap();
        assert_eq!(fill_template(lib.get(0).unwrap(), "k1 v1", "k1?"), "Context: k1 v1\nQ: k1?\nA:");
        assert!(TemplateLibrary::new("kv", vec!["{C} only".into()]).is_err());
        assert!(TemplateLibrary::new("kv", vec!["{C}{Q}{Q}".into()]).is_err());
        assert!(TemplateLibrary::new("kv", vec![]).is_err());
        assert!(TemplateLibrary::builtin(Domain::In).len() >= 8);
        assert!(TemplateLibrary::builtin(Domain::Out).len() >= 8);
    }

    #[test]
    fn single_template_is_always_chosen() {
        let lib = TemplateLibrary::new("kv", vec!["{C}\n{Q}".into()]).unwrap();
        let rec = &generate_corpus(&spec(Domain::In)).unwrap()[0];
        let tok = Tokenizer::from_texts([rec.context.as_str(), rec.question.as_str(), "\n"]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            assert_eq!(render_prompt(rec, &lib, &tok, &mut rng).unwrap().template_id, 0);
        }
    }

    #[test]
    fn tokenizer_round_trip() {
        let tok = Tokenizer::from_texts(["abc", "Q: k1 ?\nA:"]);
        assert_eq!(tok.detokenize(&tok.tokenize("abc").unwrap()).unwrap(), "abc");
        assert!(tok.tokenize("").unwrap().is_empty());
        let s = "Q: k1 ?\nA: abc";
        assert_eq!(tok.detokenize(&tok.tokenize(s).unwrap()).unwrap(), s);
        assert!(tok.detokenize(&[tok.vocab_size()]).is_err());
        assert!(matches!(tok.tokenize("zzz"), Err(Error::Vocabulary(_))));
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let tok = Tokenizer::from_texts(["a b\nc"]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        tok.save(&p).unwrap();
        assert_eq!(Tokenizer::load(&p).unwrap(), tok);
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = spec(Domain::In);
        s.n_contexts = 50;
        let recs = generate_corpus(&s).unwrap();
        assert_eq!(recs.len(), 100);
        let p = dir.path().join("a.jsonl");
        write_jsonl(&recs, &p).unwrap();
        assert_eq!(read_jsonl(&p).unwrap(), recs);

        let empty = dir.path().join("empty.jsonl");
        std::fs::write(&empty, "").unwrap();
        assert!(read_jsonl(&empty).unwrap().is_empty());

        let bad = dir.path().join("bad.jsonl");
        let good = serde_json::to_string(&recs[0]).unwrap();
        let missing = r#"{"context":"k1 : v1 ;","question":"k1 ?","split":"train","domain_tag":"in","template_id":0}"#;
        std::fs::write(&bad, format!("{good}\n{missing}\n")).unwrap();
        match read_jsonl(&bad) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("answer"), "{msg}");
            }
            other => panic!("expected a parse error, got {other:?}"),
        }
    }
}
