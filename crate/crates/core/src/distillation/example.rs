use crate::autodiff::{Tape, Var};
use crate::dataset::{render_with, Domain, QARecord, TemplateLibrary, Tokenizer};
use crate::error::{Error, Result};
use crate::model::{AttentionMask, BoundModel, ModelWeights, Segment};
use crate::ops::{cross_entropy, kl_from_logits};
use crate::tensor::{kl_divergence, softmax, Scalar, Tensor};

/// One `(context, prompt, answer)` triple as token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingExample {
    pub context: Vec<usize>,
    pub prompt: Vec<usize>,
    /// Gold answer tokens, ending with the end-of-answer id.
    pub answer: Vec<usize>,
    pub domain_tag: Domain,
    pub template_id: usize,
}

impl TrainingExample {
    pub fn new(context: Vec<usize>, prompt: Vec<usize>, answer: Vec<usize>) -> Result<Self> {
        let ex = TrainingExample { context, prompt, answer, domain_tag: Domain::In, template_id: 0 };
        ex.validate()?;
        Ok(ex)
    }

    /// Renders `rec` with its stored template and appends the end-of-answer id.
    pub fn from_record(rec: &QARecord, lib: &TemplateLibrary, tok: &Tokenizer) -> Result<Self> {
        let rendered = render_with(rec, lib, rec.template_id, tok)?;
        let mut answer = tok.tokenize(&rec.answer)?;
        answer.push(tok.eoa_id());
        let ex = TrainingExample {
            context: rendered.context_tokens,
            prompt: rendered.prompt_tokens,
            answer,
            domain_tag: rec.domain_tag,
            template_id: rendered.template_id,
        };
        ex.validate()?;
        Ok(ex)
    }

    fn validate(&self) -> Result<()> {
        if self.context.is_empty() {
            return Err(Error::InvalidArgument("example has an empty context".into()));
        }
        if self.answer.is_empty() {
            return Err(Error::InvalidArgument("example has an empty answer".into()));
        }
        Ok(())
    }

    /// Length of the teacher-forced input `T ‖ P ‖ A[..m-1]`.
    pub fn teacher_len(&self) -> usize {
        self.context.len() + self.prompt.len() + self.answer.len() - 1
    }

    /// `P ‖ A[..m-1]`: what follows the (compressed or raw) context.
    pub fn continuation(&self) -> Vec<usize> {
        let mut v = self.prompt.clone();
        v.extend_from_slice(&self.answer[..self.answer.len() - 1]);
        v
    }

    /// Checks the example against context/answer budgets.
    pub fn check_budget(&self, max_context: usize, max_answer: usize) -> Result<()> {
        if self.context.len() > max_context {
            return Err(Error::Length { len: self.context.len(), max: max_context });
        }
        if self.answer.len() > max_answer {
            return Err(Error::Length { len: self.answer.len(), max: max_answer });
        }
        Ok(())
    }
}

/// Teacher next-token distributions at the answer positions, `[m x V]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherOutput<T> {
    pub distributions: Tensor<T>,
}

impl<T: Scalar> TeacherOutput<T> {
    pub fn len(&self) -> usize {
        self.distributions.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Logits of `model` at the `m` answer positions when `prefix` (context
/// tokens, compressed vectors, or nothing) is followed by `P ‖ A[..m-1]`.
pub fn answer_logits<T: Scalar>(
    tape: &mut Tape<T>,
    model: &BoundModel,
    prefix: Option<Segment>,
    ex: &TrainingExample,
) -> Result<Var> {
    let cont = ex.continuation();
    let mut segments = Vec::with_capacity(2);
    let mut prefix_len = 0;
    if let Some(p) = prefix {
        prefix_len = match &p {
            Segment::Tokens(t) => t.len(),
            Segment::Vectors(v) => tape.try_value(*v)?.rows(),
            Segment::CompressionTokens(c) => *c,
        };
        segments.push(p);
    }
    let n = prefix_len + cont.len();
    if prefix_len + ex.prompt.len() == 0 {
        return Err(Error::InvalidArgument("nothing precedes the first answer token".into()));
    }
    segments.push(Segment::Tokens(cont));
    let mask = AttentionMask::causal(n)?;
    let hidden = model.hidden(tape, &segments, &mask)?;
    model.logits_rows(tape, hidden, prefix_len + ex.prompt.len() - 1, ex.answer.len())
}

/// One causal pass over `T ‖ P ‖ A`; row `i` is the softmax at the position
/// preceding `a_i`.
pub fn teacher_distributions<T: Scalar>(teacher: &ModelWeights<T>, ex: &TrainingExample) -> Result<TeacherOutput<T>> {
    let mut tape = Tape::new();
    let model = BoundModel::bind(&mut tape, teacher, None, false)?;
    let logits = answer_logits(&mut tape, &model, Some(Segment::Tokens(ex.context.clone())), ex)?;
    Ok(TeacherOutput { distributions: softmax(tape.value(logits))? })
}

/// `sum_i KL(q_i || softmax(logits_i))` on the tape.
pub fn kd_loss<T: Scalar>(tape: &mut Tape<T>, teacher: &TeacherOutput<T>, student_logits: Var) -> Result<Var> {
    let rows = tape.try_value(student_logits)?.dims2()?.0;
    if rows != teacher.len() {
        return Err(Error::InvalidArgument(format!(
            "{} teacher positions vs {rows} student positions",
            teacher.len()
        )));
    }
    kl_from_logits(tape, &teacher.distributions, student_logits)
}

/// Value-level [`kd_loss`].
pub fn kd_loss_value<T: Scalar>(teacher: &TeacherOutput<T>, student_logits: &Tensor<T>) -> Result<f64> {
    let (rows, v) = student_logits.dims2()?;
    if rows != teacher.len() {
        return Err(Error::InvalidArgument(format!(
            "{} teacher positions vs {rows} student positions",
            teacher.len()
        )));
    }
    let p = softmax(student_logits)?;
    let mut total = 0.0;
    for i in 0..rows {
        let q = Tensor::new(vec![v], teacher.distributions.row(i).to_vec())?;
        let pi = Tensor::new(vec![v], p.row(i).to_vec())?;
        total += kl_divergence(&q, &pi)?.as_f64();
    }
    Ok(total)
}

/// Answer-only next-token cross-entropy of `model` on `ex` with the full context.
pub fn answer_cross_entropy<T: Scalar>(tape: &mut Tape<T>, model: &BoundModel, ex: &TrainingExample) -> Result<Var> {
    let logits = answer_logits(tape, model, Some(Segment::Tokens(ex.context.clone())), ex)?;
    cross_entropy(tape, &ex.answer, logits)
}

/// Several prompt/answer pairs that share one context, laid out as
/// `T ‖ P1 ‖ A1 ‖ P2 ‖ A2 ‖ ...` (final token dropped). Every answer token is
/// a target, predicted from the position before it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedExample {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

impl PackedExample {
    pub fn single(ex: &TrainingExample) -> Self {
        Self::pack(&[ex]).expect("one example always packs")
    }

    /// Fails unless every example carries the same context.
    pub fn pack(group: &[&TrainingExample]) -> Result<Self> {
        let first = group.first().ok_or_else(|| Error::InvalidArgument("nothing to pack".into()))?;
        let mut tokens = first.context.clone();
        let (mut positions, mut targets) = (Vec::new(), Vec::new());
        for ex in group {
            if ex.context != first.context {
                return Err(Error::InvalidArgument("packed examples must share their context".into()));
            }
            tokens.extend_from_slice(&ex.prompt);
            for &a in &ex.answer {
                positions.push(tokens.len() - 1);
                targets.push(a);
                tokens.push(a);
            }
        }
        tokens.pop();
        Ok(PackedExample { tokens, positions, targets })
    }

    /// Groups runs of consecutive examples with equal contexts, starting a
    /// new sequence whenever `max_len` tokens would be exceeded.
    pub fn pack_corpus(corpus: &[TrainingExample], max_len: usize) -> Result<Vec<Self>> {
        let mut out = Vec::new();
        let mut group: Vec<&TrainingExample> = Vec::new();
        let mut len = 0;
        for ex in corpus {
            let extra = ex.prompt.len() + ex.answer.len();
            let fits = group.first().is_some_and(|g| g.context == ex.context) && len + extra - 1 <= max_len;
            if !fits && !group.is_empty() {
                out.push(Self::pack(&group)?);
                group.clear();
            }
            if group.is_empty() {
                len = ex.context.len();
            }
            len += extra;
            group.push(ex);
        }
        if !group.is_empty() {
            out.push(Self::pack(&group)?);
        }
        Ok(out)
    }
}

/// Summed cross-entropy over the targets of `p` in one causal pass.
pub fn packed_cross_entropy<T: Scalar>(tape: &mut Tape<T>, model: &BoundModel, p: &PackedExample) -> Result<Var> {
    let mask = AttentionMask::causal(p.tokens.len())?;
    let hidden = model.hidden(tape, &[Segment::Tokens(p.tokens.clone())], &mask)?;
    let rows = tape.gather(hidden, &p.positions)?;
    let logits = model.logits(tape, rows)?;
    cross_entropy(tape, &p.targets, logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{InputItem, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn items_from_tokens(tokens: &[usize]) -> Vec<InputItem<f64>> {
        tokens.iter().map(|&t| InputItem::Token(t)).collect()
    }

    fn cfg() -> ModelConfig {
        ModelConfig { vocab_size: 12, d_model: 8, n_layers: 1, n_heads: 2, d_ff: 16, max_positions: 16 }
    }

    #[test]
    fn teacher_output_contract() {
        let w = ModelWeights::<f64>::init(cfg(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let ex = TrainingExample::new(vec![3, 4, 5], vec![6, 7], vec![8, 9, 1]).unwrap();
        let a = teacher_distributions(&w, &ex).unwrap();
        assert_eq!(a.len(), 3);
        for i in 0..3 {
            assert!((a.distributions.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert_eq!(a, teacher_distributions(&w, &ex).unwrap());
    }

    #[test]
    fn teacher_rows_match_full_forward() {
        let w = ModelWeights::<f64>::init(cfg(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let ex = TrainingExample::new(vec![3, 4], vec![6], vec![8, 1]).unwrap();
        let all = [3, 4, 6, 8, 1];
        let (_, logits) =
            crate::model::forward(&w, None, &items_from_tokens(&all), &AttentionMask::causal(5).unwrap()).unwrap();
        let q = teacher_distributions(&w, &ex).unwrap();
        let full = softmax(&logits).unwrap();
        for i in 0..2 {
            for v in 0..12 {
                assert!((q.distributions.at(i, v) - full.at(2 + i, v)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kd_loss_examples() {
        let q = TeacherOutput { distributions: Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap() };
        let even = Tensor::new(vec![1, 2], vec![0.0f64, 0.0]).unwrap();
        assert!((kd_loss_value(&q, &even).unwrap() - 2f64.ln()).abs() < 1e-12);

        let z = Tensor::new(vec![2, 3], vec![0.2, -0.3, 1.1, 0.0, 0.5, -1.0]).unwrap();
        let same = TeacherOutput { distributions: softmax(&z).unwrap() };
        assert!(kd_loss_value(&same, &z).unwrap().abs() < 1e-9);

        let two = TeacherOutput { distributions: Tensor::new(vec![2, 2], vec![0.5, 0.5, 1.0, 0.0]).unwrap() };
        let logits = Tensor::new(vec![2, 2], vec![0.0f64, 0.0, 0.0, 0.0]).unwrap();
        assert!((kd_loss_value(&two, &logits).unwrap() - 2f64.ln()).abs() < 1e-12);
        let mut tape = Tape::new();
        let l = tape.leaf(logits.clone(), true);
        let loss = kd_loss(&mut tape, &two, l).unwrap();
        assert!((tape.value(loss).item().unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(kd_loss_value(&q, &logits).is_err());
    }

    #[test]
    fn packing_layout_and_loss() {
        let a = TrainingExample::new(vec![3, 4], vec![6], vec![8, 1]).unwrap();
        let b = TrainingExample::new(vec![3, 4], vec![7], vec![9, 1]).unwrap();
        let p = PackedExample::pack(&[&a, &b]).unwrap();
        assert_eq!(p.tokens, vec![3, 4, 6, 8, 1, 7, 9]);
        assert_eq!(p.positions, vec![2, 3, 5, 6]);
        assert_eq!(p.targets, vec![8, 1, 9, 1]);
        let c = TrainingExample::new(vec![5], vec![6], vec![8, 1]).unwrap();
        assert!(PackedExample::pack(&[&a, &c]).is_err());
        let groups = PackedExample::pack_corpus(&[a.clone(), b.clone(), c.clone()], 16).unwrap();
        assert_eq!(groups.len(), 2);
        assert_eq!(PackedExample::pack_corpus(&[a.clone(), b.clone()], 5).unwrap().len(), 2);

        let w = ModelWeights::<f64>::init(cfg(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut tape = Tape::new();
        let m = BoundModel::bind(&mut tape, &w, None, false).unwrap();
        let single = answer_cross_entropy(&mut tape, &m, &a).unwrap();
        let packed = packed_cross_entropy(&mut tape, &m, &PackedExample::single(&a)).unwrap();
        let (x, y) = (tape.value(single).item().unwrap(), tape.value(packed).item().unwrap());
        assert!((x - y).abs() < 1e-12, "{x} vs {y}");
    }
}
