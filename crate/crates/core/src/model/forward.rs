//! Pre-norm transformer forward pass over mixed token / vector inputs.

use std::collections::HashMap;

use super::adapter::LowRankAdapter;
use super::config::ModelConfig;
use super::mask::AttentionMask;
use super::weights::{attention_matrices, ffn_matrices, ModelWeights};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::BoundParams;
use crate::tensor::{Scalar, Tensor};

/// One contiguous run of model inputs.
#[derive(Clone, Debug)]
pub enum Segment {
    Tokens(Vec<usize>),
    /// Continuous `[k x d_model]` inputs already on the tape.
    Vectors(Var),
    /// `n` copies of the shared learned compression-token embedding.
    CompressionTokens(usize),
}

impl Segment {
    fn len<T: Scalar>(&self, tape: &Tape<T>) -> usize {
        match self {
            Segment::Tokens(ids) => ids.len(),
            Segment::Vectors(v) => tape.shape(*v)[0],
            Segment::CompressionTokens(n) => *n,
        }
    }
}

/// Value-level input item.
#[derive(Clone, Debug, PartialEq)]
pub enum InputItem<T> {
    Token(usize),
    Vector(Vec<T>),
    CompressionToken,
}

#[derive(Clone, Debug)]
struct AdapterPath {
    down_t: Var,
    up_t: Var,
}

/// Weights (and optionally an adapter) recorded on a tape, with the
/// transposed projection matrices prepared once per binding.
#[derive(Clone, Debug)]
pub struct BoundModel {
    config: ModelConfig,
    params: BoundParams,
    linear_t: HashMap<String, Var>,
    adapter: HashMap<String, AdapterPath>,
    adapter_scale: f64,
}

fn linear_names(cfg: &ModelConfig) -> Vec<String> {
    let mut names = vec!["lm_head".to_string()];
    for l in 0..cfg.n_layers {
        names.extend(attention_matrices(l));
        names.extend(ffn_matrices(l));
    }
    names
}

impl BoundModel {
    /// `params` must hold every tensor of the weight layout; `adapter`, when
    /// present, holds `{target}.down` / `{target}.up` pairs.
    pub fn new<T: Scalar>(
        tape: &mut Tape<T>,
        config: ModelConfig,
        params: BoundParams,
        adapter: Option<(&BoundParams, f64)>,
    ) -> Result<Self> {
        let mut linear_t = HashMap::new();
        for name in linear_names(&config) {
            let w = params.get(&name)?;
            linear_t.insert(name, tape.transpose(w)?);
        }
        let mut paths = HashMap::new();
        let mut adapter_scale = 0.0;
        if let Some((ad, scale)) = adapter {
            adapter_scale = scale;
            for (name, &down) in ad.iter() {
                let Some(target) = name.strip_suffix(".down") else { continue };
                if !linear_t.contains_key(target) {
                    return Err(Error::InvalidArgument(format!("adapter targets unknown matrix {target}")));
                }
                let up = ad.get(&format!("{target}.up"))?;
                let path = AdapterPath { down_t: tape.transpose(down)?, up_t: tape.transpose(up)? };
                paths.insert(target.to_string(), path);
            }
        }
        Ok(BoundModel { config, params, linear_t, adapter: paths, adapter_scale })
    }

    /// Binds `weights` (and `adapter`) as fresh leaves.
    pub fn bind<T: Scalar>(
        tape: &mut Tape<T>,
        weights: &ModelWeights<T>,
        adapter: Option<&LowRankAdapter<T>>,
        requires_grad: bool,
    ) -> Result<Self> {
        if let Some(a) = adapter {
            a.validate_against(weights)?;
        }
        let params = weights.params.bind(tape, requires_grad);
        let bound_adapter = adapter.map(|a| (a.params.bind(tape, requires_grad), a.scale()));
        Self::new(tape, weights.config, params, bound_adapter.as_ref().map(|(p, s)| (p, *s)))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param(&self, name: &str) -> Result<Var> {
        self.params.get(name)
    }

    fn linear<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, name: &str) -> Result<Var> {
        let wt = self.linear_t[name];
        let y = tape.matmul(x, wt)?;
        match self.adapter.get(name) {
            None => Ok(y),
            Some(path) => {
                let low = tape.matmul(x, path.down_t)?;
                let delta = tape.matmul(low, path.up_t)?;
                let delta = tape.scale(delta, T::from_f64(self.adapter_scale))?;
                tape.add(y, delta)
            }
        }
    }

    /// Input embeddings plus learned absolute positions `0..n`.
    pub fn embed<T: Scalar>(&self, tape: &mut Tape<T>, segments: &[Segment]) -> Result<Var> {
        let d = self.config.d_model;
        let n: usize = segments.iter().map(|s| s.len(tape)).sum();
        if n == 0 {
            return Err(Error::InvalidShape("empty input sequence".into()));
        }
        if n > self.config.max_positions {
            return Err(Error::Length { len: n, max: self.config.max_positions });
        }
        let mut parts = Vec::with_capacity(segments.len());
        for seg in segments {
            match seg {
                Segment::Tokens(ids) if ids.is_empty() => {}
                Segment::Tokens(ids) => {
                    if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
                        return Err(Error::InvalidToken { id: bad, vocab_size: self.config.vocab_size });
                    }
                    let emb = self.params.get("tok_emb")?;
                    parts.push(tape.gather(emb, ids)?);
                }
                Segment::Vectors(v) => {
                    let shape = tape.try_value(*v)?.shape();
                    if shape.len() != 2 || shape[1] != d {
                        return Err(Error::InvalidShape(format!("input vectors {shape:?}, expected [k x {d}]")));
                    }
                    parts.push(*v);
                }
                Segment::CompressionTokens(0) => {}
                Segment::CompressionTokens(c) => {
                    let emb = self.params.get("comp_emb")?;
                    parts.push(tape.gather(emb, &vec![0; *c])?);
                }
            }
        }
        let x = if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 0)? };
        let positions: Vec<usize> = (0..n).collect();
        let pos_emb = self.params.get("pos_emb")?;
        let pos = tape.gather(pos_emb, &positions)?;
        tape.add(x, pos)
    }

    /// Final-layer hidden states (after the closing layer norm), `[n x d_model]`.
    pub fn hidden<T: Scalar>(&self, tape: &mut Tape<T>, segments: &[Segment], mask: &AttentionMask) -> Result<Var> {
        let mut x = self.embed(tape, segments)?;
        let n = tape.shape(x)[0];
        if n != mask.len() {
            return Err(Error::InvalidShape(format!("input of length {n} with a {0}x{0} mask", mask.len())));
        }
        let cfg = self.config;
        let hd = cfg.head_dim();
        let inv_sqrt = T::from_f64(1.0 / (hd as f64).sqrt());
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            let h = tape.layer_norm(x, self.params.get(&p("ln1.g"))?, self.params.get(&p("ln1.b"))?)?;
            let q = self.linear(tape, h, &p("attn.wq"))?;
            let k = self.linear(tape, h, &p("attn.wk"))?;
            let v = self.linear(tape, h, &p("attn.wv"))?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for head in 0..cfg.n_heads {
                let qh = tape.slice(q, 1, head * hd, hd)?;
                let kh = tape.slice(k, 1, head * hd, hd)?;
                let vh = tape.slice(v, 1, head * hd, hd)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale(scores, inv_sqrt)?;
                let scores = tape.masked_fill(scores, mask.allowed().clone())?;
                let attn = tape.softmax(scores)?;
                heads.push(tape.matmul(attn, vh)?);
            }
            let merged = if heads.len() == 1 { heads[0] } else { tape.concat(&heads, 1)? };
            let o = self.linear(tape, merged, &p("attn.wo"))?;
            x = tape.add(x, o)?;
            let h = tape.layer_norm(x, self.params.get(&p("ln2.g"))?, self.params.get(&p("ln2.b"))?)?;
            let f = self.linear(tape, h, &p("ffn.w1"))?;
            let f = tape.gelu(f)?;
            let f = self.linear(tape, f, &p("ffn.w2"))?;
            x = tape.add(x, f)?;
        }
        tape.layer_norm(x, self.params.get("ln_f.g")?, self.params.get("ln_f.b")?)
    }

    /// Vocabulary logits for hidden rows `[k x d_model]`.
    pub fn logits<T: Scalar>(&self, tape: &mut Tape<T>, hidden: Var) -> Result<Var> {
        self.linear(tape, hidden, "lm_head")
    }

    /// Logits for rows `start..start + len` of `hidden`.
    pub fn logits_rows<T: Scalar>(&self, tape: &mut Tape<T>, hidden: Var, start: usize, len: usize) -> Result<Var> {
        let rows = tape.slice(hidden, 0, start, len)?;
        self.logits(tape, rows)
    }
}

/// Runs the model without recording gradients and returns
/// `(hidden [len x d_model], logits [len x vocab])`.
pub fn forward<T: Scalar>(
    weights: &ModelWeights<T>,
    adapter: Option<&LowRankAdapter<T>>,
    input: &[InputItem<T>],
    mask: &AttentionMask,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut tape = Tape::new();
    let model = BoundModel::bind(&mut tape, weights, adapter, false)?;
    let segments = segments_from_items(&mut tape, input, weights.config.d_model)?;
    let hidden = model.hidden(&mut tape, &segments, mask)?;
    let logits = model.logits(&mut tape, hidden)?;
    Ok((tape.value(hidden).clone(), tape.value(logits).clone()))
}

fn segments_from_items<T: Scalar>(tape: &mut Tape<T>, input: &[InputItem<T>], d: usize) -> Result<Vec<Segment>> {
    let mut segments: Vec<Segment> = Vec::new();
    let mut pending_vectors: Vec<T> = Vec::new();
    let flush = |tape: &mut Tape<T>, pending: &mut Vec<T>, segments: &mut Vec<Segment>| -> Result<()> {
        if !pending.is_empty() {
            let rows = pending.len() / d;
            let t = Tensor::new(vec![rows, d], std::mem::take(pending))?;
            segments.push(Segment::Vectors(tape.constant(t)));
        }
        Ok(())
    };
    for item in input {
        match item {
            InputItem::Vector(v) => {
                if v.len() != d {
                    return Err(Error::InvalidShape(format!("input vector of length {}, expected {d}", v.len())));
                }
                pending_vectors.extend_from_slice(v);
            }
            InputItem::Token(id) => {
                flush(tape, &mut pending_vectors, &mut segments)?;
                match segments.last_mut() {
                    Some(Segment::Tokens(ids)) => ids.push(*id),
                    _ => segments.push(Segment::Tokens(vec![*id])),
                }
            }
            InputItem::CompressionToken => {
                flush(tape, &mut pending_vectors, &mut segments)?;
                match segments.last_mut() {
                    Some(Segment::CompressionTokens(n)) => *n += 1,
                    _ => segments.push(Segment::CompressionTokens(1)),
                }
            }
        }
    }
    flush(tape, &mut pending_vectors, &mut segments)?;
    Ok(segments)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::adapter::{merge_adapter, AdapterConfig};
    use crate::model::mask::MaskKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig { vocab_size: 20, d_model: 16, n_layers: 2, n_heads: 2, d_ff: 32, max_positions: 16 }
    }

    fn tokens(ids: &[usize]) -> Vec<InputItem<f64>> {
        ids.iter().map(|&i| InputItem::Token(i)).collect()
    }

    #[test]
    fn single_token_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = ModelWeights::<f64>::init(tiny(), &mut rng).unwrap();
        let (h, z) = forward(&w, None, &tokens(&[3]), &AttentionMask::causal(1).unwrap()).unwrap();
        assert_eq!(h.shape(), &[1, 16]);
        assert_eq!(z.shape(), &[1, 20]);
    }

    #[test]
    fn zero_adapter_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = ModelWeights::<f64>::init(tiny(), &mut rng).unwrap();
        let a = LowRankAdapter::init(&w, &AdapterConfig { rank: 4, ..Default::default() }, &mut rng).unwrap();
        let mask = AttentionMask::causal(5).unwrap();
        let input = tokens(&[1, 2, 3, 4, 5]);
        let base = forward(&w, None, &input, &mask).unwrap();
        let adapted = forward(&w, Some(&a), &input, &mask).unwrap();
        assert_eq!(base, adapted);
        assert_eq!(merge_adapter(&w, &a).unwrap(), w);
    }

    #[test]
    fn full_mask_changes_first_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = ModelWeights::<f64>::init(tiny(), &mut rng).unwrap();
        let input = tokens(&[4, 9, 1, 7]);
        let (hc, _) = forward(&w, None, &input, &AttentionMask::causal(4).unwrap()).unwrap();
        let (hf, _) = forward(&w, None, &input, &AttentionMask::full(4).unwrap()).unwrap();
        let diff = hc.row(0).iter().zip(hf.row(0)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff > 1e-6, "{diff}");
    }

    #[test]
    fn errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = ModelWeights::<f64>::init(tiny(), &mut rng).unwrap();
        let mask = AttentionMask::causal(2).unwrap();
        assert!(matches!(forward(&w, None, &tokens(&[1, 20]), &mask), Err(Error::InvalidToken { .. })));
        assert!(matches!(forward(&w, None, &tokens(&[1, 2, 3]), &mask), Err(Error::InvalidShape(_))));
        let long: Vec<usize> = (0..17).map(|i| i % 20).collect();
        let mask = AttentionMask::causal(17).unwrap();
        assert!(matches!(forward(&w, None, &tokens(&long), &mask), Err(Error::Length { .. })));
    }

    #[test]
    fn mixed_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = ModelWeights::<f64>::init(tiny(), &mut rng).unwrap();
        let mut input = vec![InputItem::Vector(vec![0.1; 16]), InputItem::Vector(vec![-0.2; 16])];
        input.extend(tokens(&[5, 6]));
        input.push(InputItem::CompressionToken);
        let mask = AttentionMask::build(MaskKind::Causal, 5, 0).unwrap();
        let (h, _) = forward(&w, None, &input, &mask).unwrap();
        assert_eq!(h.shape(), &[5, 16]);
    }
}
