//! Context compressors: mean pooling over full-attention encoder states and
//! appended compression tokens with causal or bidirectional attention.
//!
//! Every compressor maps `L` context tokens at ratio `r` to `ceil(L / r)`
//! vectors of width `d_model`, optionally followed by a shared square
//! projection `W` (no bias).

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::{self, Metadata};
use crate::error::{Error, Result};
use crate::model::{AttentionMask, BoundModel, LowRankAdapter, MaskKind, ModelWeights, Segment};
use crate::params::ParamSet;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "mean-pool")]
    MeanPool,
    #[serde(rename = "ctok-causal")]
    CompTokCausal,
    #[serde(rename = "ctok-bidir")]
    CompTokBidirectional,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::MeanPool, Variant::CompTokCausal, Variant::CompTokBidirectional];

    pub fn name(self) -> &'static str {
        match self {
            Variant::MeanPool => "mean-pool",
            Variant::CompTokCausal => "ctok-causal",
            Variant::CompTokBidirectional => "ctok-bidir",
        }
    }

    /// Encoder positions processed for a context of `len` tokens at `ratio`.
    pub fn encoder_positions(self, len: usize, ratio: usize) -> usize {
        match self {
            Variant::MeanPool => len,
            _ => len + compressed_len(len, ratio),
        }
    }

    fn mask_kind(self) -> Option<MaskKind> {
        match self {
            Variant::MeanPool => None,
            Variant::CompTokCausal => Some(MaskKind::CompTokCausal),
            Variant::CompTokBidirectional => Some(MaskKind::CompTokBidirectional),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?} (expected mean-pool, ctok-causal or ctok-bidir)")))
    }
}

/// Attention pattern among appended compression tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenAttention {
    Causal,
    Bidirectional,
}

impl TokenAttention {
    pub fn variant(self) -> Variant {
        match self {
            TokenAttention::Causal => Variant::CompTokCausal,
            TokenAttention::Bidirectional => Variant::CompTokBidirectional,
        }
    }
}

/// Strictly increasing, nonempty set of positive compression ratios.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct RatioSet(Vec<usize>);

impl RatioSet {
    pub fn new(ratios: Vec<usize>) -> Result<Self> {
        if ratios.is_empty() {
            return Err(Error::Config("ratio set is empty".into()));
        }
        if ratios.contains(&0) {
            return Err(Error::Config("ratios must be at least 1".into()));
        }
        if ratios.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("ratios {ratios:?} are not strictly increasing")));
        }
        Ok(RatioSet(ratios))
    }

    pub fn single(r: usize) -> Result<Self> {
        Self::new(vec![r])
    }

    pub fn ratios(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, r: usize) -> bool {
        self.0.contains(&r)
    }
}

impl Default for RatioSet {
    fn default() -> Self {
        RatioSet(vec![4, 8, 16, 32, 64, 128])
    }
}

impl TryFrom<Vec<usize>> for RatioSet {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        RatioSet::new(v)
    }
}

impl From<RatioSet> for Vec<usize> {
    fn from(r: RatioSet) -> Self {
        r.0
    }
}

impl FromStr for RatioSet {
    type Err = Error;

    /// Parses a comma-separated list such as `4,8,16`.
    fn from_str(s: &str) -> Result<Self> {
        let ratios = s
            .split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad ratio {p:?}"))))
            .collect::<Result<Vec<_>>>()?;
        RatioSet::new(ratios)
    }
}

/// Square projection applied to compressor outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionWeights<T> {
    pub w: Tensor<T>,
}

impl<T: Scalar> ProjectionWeights<T> {
    pub fn identity(d: usize) -> Self {
        ProjectionWeights { w: Tensor::identity(d) }
    }

    pub fn new(w: Tensor<T>) -> Result<Self> {
        let (r, c) = w.dims2()?;
        if w.rank() != 2 || r != c {
            return Err(Error::InvalidArgument(format!("projection must be square, got {:?}", w.shape())));
        }
        Ok(ProjectionWeights { w })
    }

    pub fn dim(&self) -> usize {
        self.w.rows()
    }
}

/// `ceil(len / ratio)`.
pub fn compressed_len(len: usize, ratio: usize) -> usize {
    len.div_ceil(ratio)
}

/// Consecutive non-overlapping zero-based blocks of size `r`; only the last
/// block may be shorter.
pub fn partition_blocks(len: usize, r: usize) -> Vec<Range<usize>> {
    assert!(r >= 1, "ratio must be positive");
    (0..compressed_len(len, r)).map(|k| k * r..((k + 1) * r).min(len)).collect()
}

/// Row `k` of the result is the mean of `h` over block `k`.
pub fn mean_pool<T: Scalar>(h: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    mean_pool_strided(h, r, r)
}

/// Mean pooling whose block starts advance by `stride` instead of `r`.
///
/// Only `stride == r` is correct; other strides exist so the verification
/// suites can confirm that they notice a broken partition.
#[doc(hidden)]
pub fn mean_pool_strided<T: Scalar>(h: &Tensor<T>, r: usize, stride: usize) -> Result<Tensor<T>> {
    if r == 0 || stride == 0 {
        return Err(Error::InvalidArgument("ratio must be positive".into()));
    }
    let (len, d) = h.dims2()?;
    let n_blocks = compressed_len(len, r);
    let mut out = Vec::with_capacity(n_blocks * d);
    for k in 0..n_blocks {
        let start = (k * stride).min(len);
        let end = (start + r).min(len);
        let n = T::from_f64((end - start) as f64);
        let mut acc = vec![T::zero(); d];
        for i in start..end {
            for (a, &x) in acc.iter_mut().zip(h.row(i)) {
                *a = *a + x;
            }
        }
        out.extend(acc.into_iter().map(|v| v / n));
    }
    Tensor::new(vec![n_blocks, d], out)
}

/// Differentiable mean pooling built from slice, mean and concat.
pub fn mean_pool_on_tape<T: Scalar>(tape: &mut Tape<T>, h: Var, r: usize) -> Result<Var> {
    if r == 0 {
        return Err(Error::InvalidArgument("ratio must be positive".into()));
    }
    let len = tape.try_value(h)?.dims2()?.0;
    if r == 1 {
        return Ok(h);
    }
    let mut rows = Vec::new();
    for block in partition_blocks(len, r) {
        let part = tape.slice(h, 0, block.start, block.len())?;
        rows.push(tape.mean(part, 0)?);
    }
    if rows.len() == 1 {
        Ok(rows[0])
    } else {
        tape.concat(&rows, 0)
    }
}

/// `z W` with no bias.
pub fn apply_projection<T: Scalar>(z: &Tensor<T>, proj: &ProjectionWeights<T>) -> Result<Tensor<T>> {
    let (_, d) = z.dims2()?;
    if d != proj.dim() {
        return Err(Error::InvalidArgument(format!(
            "vectors of width {d} with a {0}x{0} projection",
            proj.dim()
        )));
    }
    z.matmul(&proj.w)
}

/// `f_c(T; r)`: compressed vectors plus provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedContext<T> {
    pub vectors: Tensor<T>,
    pub ratio: usize,
    pub source_len: usize,
    pub variant: Variant,
    pub projected: bool,
    /// Encoder positions processed to produce these vectors.
    pub processed_positions: usize,
}

impl<T: Scalar> CompressedContext<T> {
    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = Metadata::new();
        meta.set("kind", "compressed_context");
        meta.set("variant", self.variant);
        meta.set("ratio", self.ratio);
        meta.set("source_len", self.source_len);
        meta.set("projected", self.projected);
        meta.set("processed_positions", self.processed_positions);
        let mut tensors = ParamSet::new();
        tensors.insert("vectors", self.vectors.clone());
        checkpoint::save(path, &meta, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors) = checkpoint::load::<T>(path)?;
        if meta.get("kind") != Some("compressed_context") {
            return Err(Error::Format(format!("{} is not a compressed context", path.display())));
        }
        let ctx = CompressedContext {
            vectors: tensors.get("vectors")?.clone(),
            ratio: meta.parse("ratio")?,
            source_len: meta.parse("source_len")?,
            variant: meta.require("variant")?.parse()?,
            projected: meta.parse("projected")?,
            processed_positions: meta.parse("processed_positions")?,
        };
        if ctx.len() != compressed_len(ctx.source_len, ctx.ratio) {
            return Err(Error::Format(format!(
                "{} vectors for L={} at r={}",
                ctx.len(),
                ctx.source_len,
                ctx.ratio
            )));
        }
        Ok(ctx)
    }
}

/// Where the pre-pooling context representation comes from.
#[derive(Clone, Copy, Debug)]
pub enum EncoderRef<'a> {
    /// The transformer encoder.
    Transformer(&'a BoundModel),
    /// Token embeddings of the given model only, with no attention layers.
    EmbeddingsOnly(&'a BoundModel),
}

fn check_context(len: usize, extra: usize, max: usize) -> Result<()> {
    if len == 0 {
        return Err(Error::InvalidArgument("empty context".into()));
    }
    if len + extra > max {
        return Err(Error::Length { len: len + extra, max });
    }
    Ok(())
}

/// Full-attention encoder states `[L x d]` for `tokens`.
pub fn encode_full<T: Scalar>(tape: &mut Tape<T>, encoder: EncoderRef<'_>, tokens: &[usize]) -> Result<Var> {
    match encoder {
        EncoderRef::Transformer(model) => {
            check_context(tokens.len(), 0, model.config().max_positions)?;
            let mask = AttentionMask::full(tokens.len())?;
            model.hidden(tape, &[Segment::Tokens(tokens.to_vec())], &mask)
        }
        EncoderRef::EmbeddingsOnly(model) => {
            if tokens.is_empty() {
                return Err(Error::InvalidArgument("empty context".into()));
            }
            if let Some(&bad) = tokens.iter().find(|&&t| t >= model.config().vocab_size) {
                return Err(Error::InvalidToken { id: bad, vocab_size: model.config().vocab_size });
            }
            let emb = model.param("tok_emb")?;
            tape.gather(emb, tokens)
        }
    }
}

/// Final states at the `ceil(L / r)` appended compression-token positions.
pub fn encode_comp_tokens<T: Scalar>(
    tape: &mut Tape<T>,
    encoder: &BoundModel,
    tokens: &[usize],
    r: usize,
    attention: TokenAttention,
) -> Result<Var> {
    Ok(encode_comp_tokens_counted(tape, encoder, tokens, r, attention)?.0)
}

/// Like [`encode_comp_tokens`], also returning the number of encoder rows run.
fn encode_comp_tokens_counted<T: Scalar>(
    tape: &mut Tape<T>,
    encoder: &BoundModel,
    tokens: &[usize],
    r: usize,
    attention: TokenAttention,
) -> Result<(Var, usize)> {
    if r == 0 {
        return Err(Error::InvalidArgument("ratio must be positive".into()));
    }
    let c = compressed_len(tokens.len(), r);
    check_context(tokens.len(), c, encoder.config().max_positions)?;
    let kind = attention.variant().mask_kind().expect("token variant");
    let mask = AttentionMask::build(kind, tokens.len(), c)?;
    let segments = [Segment::Tokens(tokens.to_vec()), Segment::CompressionTokens(c)];
    let hidden = encoder.hidden(tape, &segments, &mask)?;
    let rows = tape.try_value(hidden)?.rows();
    Ok((tape.slice(hidden, 0, tokens.len(), c)?, rows))
}

fn project<T: Scalar>(tape: &mut Tape<T>, z: Var, w: Option<Var>) -> Result<Var> {
    match w {
        None => Ok(z),
        Some(w) => {
            let (d, d2) = tape.try_value(w)?.dims2()?;
            if d != d2 || tape.try_value(z)?.cols() != d {
                return Err(Error::InvalidArgument(format!(
                    "projection {:?} for vectors {:?}",
                    tape.shape(w),
                    tape.shape(z)
                )));
            }
            tape.matmul(z, w)
        }
    }
}

/// Per-ratio compressed vectors for one context, recorded on a tape.
#[derive(Clone, Debug)]
pub struct TapeCompression {
    pub per_ratio: Vec<(usize, Var)>,
    pub processed_positions: usize,
}

/// Compresses `tokens` at every ratio in `ratios`.
///
/// Mean pooling runs the encoder once and pools per ratio; compression
/// tokens need one encoder pass per ratio.
pub fn compress_multi_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    encoder: EncoderRef<'_>,
    tokens: &[usize],
    ratios: &[usize],
    variant: Variant,
    w: Option<Var>,
) -> Result<TapeCompression> {
    let mut per_ratio = Vec::with_capacity(ratios.len());
    let mut processed = 0;
    match variant {
        Variant::MeanPool => {
            let h = encode_full(tape, encoder, tokens)?;
            processed += tape.try_value(h)?.rows();
            for &r in ratios {
                let z = mean_pool_on_tape(tape, h, r)?;
                per_ratio.push((r, project(tape, z, w)?));
            }
        }
        Variant::CompTokCausal | Variant::CompTokBidirectional => {
            let EncoderRef::Transformer(model) = encoder else {
                return Err(Error::Config("compression tokens require a transformer encoder".into()));
            };
            let attention = if variant == Variant::CompTokCausal {
                TokenAttention::Causal
            } else {
                TokenAttention::Bidirectional
            };
            for &r in ratios {
                let (z, rows) = encode_comp_tokens_counted(tape, model, tokens, r, attention)?;
                processed += rows;
                per_ratio.push((r, project(tape, z, w)?));
            }
        }
    }
    Ok(TapeCompression { per_ratio, processed_positions: processed })
}

/// Encoder weights plus optional adapter.
#[derive(Clone, Copy, Debug)]
pub struct Encoder<'a, T> {
    pub weights: &'a ModelWeights<T>,
    pub adapter: Option<&'a LowRankAdapter<T>>,
}

impl<'a, T: Scalar> Encoder<'a, T> {
    pub fn new(weights: &'a ModelWeights<T>, adapter: Option<&'a LowRankAdapter<T>>) -> Self {
        Encoder { weights, adapter }
    }
}

/// All ratios of one context plus the total encoder work.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiCompression<T> {
    pub contexts: BTreeMap<usize, CompressedContext<T>>,
    pub processed_positions: usize,
}

pub fn compress_multi<T: Scalar>(
    encoder: Encoder<'_, T>,
    tokens: &[usize],
    ratios: &RatioSet,
    variant: Variant,
    proj: Option<&ProjectionWeights<T>>,
) -> Result<MultiCompression<T>> {
    let mut tape = Tape::new();
    let model = BoundModel::bind(&mut tape, encoder.weights, encoder.adapter, false)?;
    let w = proj.map(|p| tape.constant(p.w.clone()));
    let out = compress_multi_on_tape(&mut tape, EncoderRef::Transformer(&model), tokens, ratios.ratios(), variant, w)?;
    let contexts = out
        .per_ratio
        .iter()
        .map(|&(r, v)| {
            let ctx = CompressedContext {
                vectors: tape.value(v).clone(),
                ratio: r,
                source_len: tokens.len(),
                variant,
                projected: proj.is_some(),
                processed_positions: variant.encoder_positions(tokens.len(), r),
            };
            (r, ctx)
        })
        .collect();
    Ok(MultiCompression { contexts, processed_positions: out.processed_positions })
}

fn single<T: Scalar>(
    encoder: Encoder<'_, T>,
    tokens: &[usize],
    r: usize,
    variant: Variant,
    proj: Option<&ProjectionWeights<T>>,
) -> Result<CompressedContext<T>> {
    let mut multi = compress_multi(encoder, tokens, &RatioSet::single(r)?, variant, proj)?;
    Ok(multi.contexts.remove(&r).expect("requested ratio"))
}

/// Full-attention encoding over exactly `L` positions, pooled at `r`.
pub fn compress_mean_pool<T: Scalar>(
    encoder: Encoder<'_, T>,
    tokens: &[usize],
    r: usize,
    proj: Option<&ProjectionWeights<T>>,
) -> Result<CompressedContext<T>> {
    single(encoder, tokens, r, Variant::MeanPool, proj)
}

/// `L + ceil(L / r)` encoder positions; the outputs are the appended
/// compression-token states.
pub fn compress_tokens<T: Scalar>(
    encoder: Encoder<'_, T>,
    tokens: &[usize],
    r: usize,
    attention: TokenAttention,
    proj: Option<&ProjectionWeights<T>>,
) -> Result<CompressedContext<T>> {
    single(encoder, tokens, r, attention.variant(), proj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, InputItem, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig { vocab_size: 20, d_model: 8, n_layers: 2, n_heads: 2, d_ff: 16, max_positions: 40 }
    }

    fn naive_pool(h: &Tensor<f64>, r: usize) -> Vec<Vec<f64>> {
        let (l, d) = h.dims2().unwrap();
        let mut out = Vec::new();
        let mut start = 0;
        while start < l {
            let end = (start + r).min(l);
            let mut row = vec![0.0; d];
            for (j, slot) in row.iter_mut().enumerate() {
                let mut s = 0.0;
                for i in start..end {
                    s += h.at(i, j);
                }
                *slot = s / (end - start) as f64;
            }
            out.push(row);
            start = end;
        }
        out
    }

    #[test]
    fn partition_examples() {
        assert_eq!(partition_blocks(10, 4), vec![0..4, 4..8, 8..10]);
        let b = partition_blocks(1024, 128);
        assert_eq!(b.len(), 8);
        assert!(b.iter().all(|r| r.len() == 128));
        assert_eq!(partition_blocks(5, 8), vec![0..5]);
    }

    #[test]
    fn pooling_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = Tensor::new(vec![10, 4], (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        assert_eq!(mean_pool(&h, 1).unwrap(), h);
        let c = Tensor::full(vec![7, 3], 0.25f64);
        assert!(mean_pool(&c, 3).unwrap().data().iter().all(|&v| v == 0.25));
        let z = mean_pool(&h, 4).unwrap();
        let oracle = naive_pool(&h, 4);
        for (k, row) in oracle.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert!((z.at(k, j) - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn projection_examples() {
        let z = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(apply_projection(&z, &ProjectionWeights::identity(2)).unwrap(), z);
        let two = ProjectionWeights::new(Tensor::identity(2).scale(2.0)).unwrap();
        assert_eq!(apply_projection(&z, &two).unwrap(), z.scale(2.0));
        assert!(apply_projection(&z, &ProjectionWeights::identity(3)).is_err());
        let w = ProjectionWeights::new(Tensor::new(vec![2, 2], vec![0.5, -1.0, 2.0, 0.0]).unwrap()).unwrap();
        let out = apply_projection(&z, &w).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let expect: f64 = (0..2).map(|k| z.at(i, k) * w.w.at(k, j)).sum();
                assert!((out.at(i, j) - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mean_pool_identity_matches_encoder_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = ModelWeights::<f64>::init(tiny(), &mut rng).unwrap();
        let tokens = [1, 5, 7, 2, 9, 3];
        let ctx = compress_mean_pool(Encoder::new(&w, None), &tokens, 1, Some(&ProjectionWeights::identity(8))).unwrap();
        let items: Vec<InputItem<f64>> = tokens.iter().map(|&t| InputItem::Token(t)).collect();
        let (h, _) = forward(&w, None, &items, &AttentionMask::full(6).unwrap()).unwrap();
        assert_eq!(ctx.vectors, h.matmul(&Tensor::identity(8)).unwrap());
        assert_eq!(ctx.processed_positions, 6);
        assert!(ctx.projected);
    }

    #[test]
    fn counters_and_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = ModelWeights::<f64>::init(tiny(), &mut rng).unwrap();
        let tokens: Vec<usize> = (0..10).map(|i| i % 20).collect();
        let ctx = compress_mean_pool(Encoder::new(&w, None), &tokens, 4, None).unwrap();
        assert_eq!((ctx.len(), ctx.processed_positions), (3, 10));
        let ctx = compress_tokens(Encoder::new(&w, None), &tokens, 4, TokenAttention::Bidirectional, None).unwrap();
        assert_eq!((ctx.len(), ctx.processed_positions), (3, 13));
        let tokens: Vec<usize> = (0..16).collect();
        let m = compress_multi(Encoder::new(&w, None), &tokens, &RatioSet::new(vec![4, 8]).unwrap(), Variant::CompTokCausal, None)
            .unwrap();
        assert_eq!(m.processed_positions, 38);
        let m = compress_multi(Encoder::new(&w, None), &tokens, &RatioSet::new(vec![4, 8]).unwrap(), Variant::MeanPool, None)
            .unwrap();
        assert_eq!(m.processed_positions, 16);
    }

    #[test]
    fn overlong_inputs_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = ModelWeights::<f64>::init(tiny(), &mut rng).unwrap();
        let tokens: Vec<usize> = (0..41).map(|i| i % 20).collect();
        assert!(matches!(compress_mean_pool(Encoder::new(&w, None), &tokens, 4, None), Err(Error::Length { .. })));
        let tokens: Vec<usize> = (0..36).map(|i| i % 20).collect();
        assert!(compress_mean_pool(Encoder::new(&w, None), &tokens, 4, None).is_ok());
        assert!(matches!(
            compress_tokens(Encoder::new(&w, None), &tokens, 4, TokenAttention::Causal, None),
            Err(Error::Length { .. })
        ));
    }

    #[test]
    fn ratio_sets() {
        assert_eq!(RatioSet::default().ratios(), &[4, 8, 16, 32, 64, 128]);
        assert!(RatioSet::new(vec![]).is_err());
        assert!(RatioSet::new(vec![8, 4]).is_err());
        assert!(RatioSet::new(vec![0, 4]).is_err());
        assert_eq!("4, 8".parse::<RatioSet>().unwrap().ratios(), &[4, 8]);
        assert!("mean-pool".parse::<Variant>().is_ok());
        assert!("mean_pool".parse::<Variant>().is_err());
    }

    #[test]
    fn compressed_context_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let w = ModelWeights::<f32>::init(tiny(), &mut rng).unwrap();
        let tokens = [3, 4, 5, 6, 7];
        let ctx = compress_mean_pool(Encoder::new(&w, None), &tokens, 2, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ctx.bin");
        ctx.save(&path).unwrap();
        assert_eq!(CompressedContext::<f32>::load(&path).unwrap(), ctx);
    }
}
