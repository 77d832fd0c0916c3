use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::example::{answer_logits, kd_loss, TeacherOutput, TrainingExample};
use crate::autodiff::{Tape, Var};
use crate::checkpoint::{self, Metadata};
use crate::compressor::{compress_multi_on_tape, CompressedContext, EncoderRef, RatioSet, Variant};
use crate::error::{Error, Result};
use crate::model::{AdapterConfig, BoundModel, LowRankAdapter, ModelWeights, Segment};
use crate::params::{BoundParams, ParamSet};
use crate::tensor::{Scalar, Tensor};

pub const ENCODER_PREFIX: &str = "enc.";
pub const DECODER_PREFIX: &str = "dec.";
pub const PROJECTION: &str = "proj.w";
pub const COMP_EMBEDDING: &str = "comp_emb";

/// Ablation switches; all off reproduces the full method.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    /// Decoder adapter stays at its (zero) initialization.
    pub fixed_decoder: bool,
    /// Encoder adapter stays at its (zero) initialization.
    pub fixed_encoder: bool,
    /// Pool raw decoder token embeddings instead of encoder states.
    pub no_encoder: bool,
    /// Identity in place of the learned projection.
    pub no_linear: bool,
    /// One uniformly drawn ratio per example instead of the sum over all.
    pub ratio_sampling: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentConfig {
    pub variant: Variant,
    /// Ratios the student is trained (and may be evaluated) on.
    pub ratios: RatioSet,
    #[serde(default)]
    pub adapter: AdapterConfig,
    #[serde(default)]
    pub ablations: Ablations,
}

impl StudentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ablations.no_encoder && self.variant != Variant::MeanPool {
            return Err(Error::Config("the no-encoder ablation only applies to mean pooling".into()));
        }
        Ok(())
    }
}

/// Compressor plus decoder built on frozen teacher weights.
///
/// `params` holds only what the student adds: `enc.*` and `dec.*` adapter
/// tensors, the projection `proj.w` and, for compression-token variants,
/// the compression-token embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Student<T> {
    pub base: ModelWeights<T>,
    pub params: ParamSet<T>,
    pub config: StudentConfig,
}

/// A student recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundStudent {
    pub encoder: Option<BoundModel>,
    pub decoder: BoundModel,
    pub projection: Option<Var>,
    pub variant: Variant,
}

impl BoundStudent {
    pub fn encoder_ref(&self) -> EncoderRef<'_> {
        match &self.encoder {
            Some(e) => EncoderRef::Transformer(e),
            None => EncoderRef::EmbeddingsOnly(&self.decoder),
        }
    }

    /// Compressed vectors per ratio for `context`.
    pub fn compress(&self, tape: &mut Tape<impl Scalar>, context: &[usize], ratios: &[usize]) -> Result<Vec<(usize, Var)>> {
        let out = compress_multi_on_tape(tape, self.encoder_ref(), context, ratios, self.variant, self.projection)?;
        Ok(out.per_ratio)
    }

    /// `sum_{r in ratios} L_KD(r)` for one example, sharing encoder work
    /// across ratios where the variant allows it.
    pub fn multi_ratio_loss<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        ex: &TrainingExample,
        teacher: &TeacherOutput<T>,
        ratios: &[usize],
    ) -> Result<Var> {
        if ratios.is_empty() {
            return Err(Error::InvalidArgument("no ratios to train on".into()));
        }
        let mut total: Option<Var> = None;
        for (_, z) in self.compress(tape, &ex.context, ratios)? {
            let logits = answer_logits(tape, &self.decoder, Some(Segment::Vectors(z)), ex)?;
            let l = kd_loss(tape, teacher, logits)?;
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l)?,
            });
        }
        Ok(total.expect("at least one ratio"))
    }
}

impl<T: Scalar> Student<T> {
    pub fn init(teacher: &ModelWeights<T>, config: StudentConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        if !config.ablations.no_encoder {
            let enc = LowRankAdapter::init(teacher, &config.adapter, rng)?;
            params.extend_prefixed(ENCODER_PREFIX, &enc.params);
        }
        let dec = LowRankAdapter::init(teacher, &config.adapter, rng)?;
        params.extend_prefixed(DECODER_PREFIX, &dec.params);
        if !config.ablations.no_linear {
            params.insert(PROJECTION, Tensor::identity(teacher.config.d_model));
        }
        if config.variant != Variant::MeanPool {
            params.insert(COMP_EMBEDDING, teacher.params.get(COMP_EMBEDDING)?.clone());
        }
        Ok(Student { base: teacher.clone(), params, config })
    }

    /// Names updated by the optimizer under the configured ablations.
    pub fn trainable(&self) -> BTreeSet<String> {
        let ab = self.config.ablations;
        self.params
            .names()
            .filter(|n| !(ab.fixed_encoder && n.starts_with(ENCODER_PREFIX)))
            .filter(|n| !(ab.fixed_decoder && n.starts_with(DECODER_PREFIX)))
            .cloned()
            .collect()
    }

    fn adapter_scale(&self) -> f64 {
        self.config.adapter.alpha / self.config.adapter.rank as f64
    }

    pub fn encoder_adapter(&self) -> Option<LowRankAdapter<T>> {
        (!self.config.ablations.no_encoder).then(|| LowRankAdapter {
            rank: self.config.adapter.rank,
            alpha: self.config.adapter.alpha,
            params: self.params.strip_prefix(ENCODER_PREFIX),
        })
    }

    pub fn decoder_adapter(&self) -> LowRankAdapter<T> {
        LowRankAdapter {
            rank: self.config.adapter.rank,
            alpha: self.config.adapter.alpha,
            params: self.params.strip_prefix(DECODER_PREFIX),
        }
    }

    /// Binds the student tensors; only names in `trainable` record gradients.
    pub fn bind_params(&self, tape: &mut Tape<T>, trainable: &BTreeSet<String>) -> BoundParams {
        let mut bound = BoundParams::default();
        for (name, t) in self.params.iter() {
            bound.insert(name.clone(), tape.leaf(t.clone(), trainable.contains(name)));
        }
        bound
    }

    /// Builds encoder and decoder on `tape` around already-bound student tensors.
    pub fn bind_with(&self, tape: &mut Tape<T>, vars: &BoundParams) -> Result<BoundStudent> {
        let base = self.base.params.bind(tape, false);
        let scale = self.adapter_scale();
        let dec_adapter = vars.strip_prefix(DECODER_PREFIX);
        let decoder = BoundModel::new(tape, self.base.config, base.clone(), Some((&dec_adapter, scale)))?;
        let encoder = if self.config.ablations.no_encoder {
            None
        } else {
            let mut enc_base = base;
            if let Some(c) = vars.try_get(COMP_EMBEDDING) {
                enc_base.insert(COMP_EMBEDDING, c);
            }
            let enc_adapter = vars.strip_prefix(ENCODER_PREFIX);
            Some(BoundModel::new(tape, self.base.config, enc_base, Some((&enc_adapter, scale)))?)
        };
        Ok(BoundStudent { encoder, decoder, projection: vars.try_get(PROJECTION), variant: self.config.variant })
    }

    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Result<BoundStudent> {
        let trainable = if requires_grad { self.trainable() } else { BTreeSet::new() };
        let vars = self.bind_params(tape, &trainable);
        self.bind_with(tape, &vars)
    }

    /// Value of `L_multi` for one example.
    pub fn multi_ratio_loss(&self, ex: &TrainingExample, teacher: &TeacherOutput<T>, ratios: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let loss = bound.multi_ratio_loss(&mut tape, ex, teacher, ratios)?;
        Ok(tape.value(loss).item()?.as_f64())
    }

    pub fn compress(&self, context: &[usize], r: usize) -> Result<CompressedContext<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let (_, z) = bound.compress(&mut tape, context, &[r])?[0];
        Ok(CompressedContext {
            vectors: tape.value(z).clone(),
            ratio: r,
            source_len: context.len(),
            variant: self.config.variant,
            projected: bound.projection.is_some(),
            processed_positions: self.config.variant.encoder_positions(context.len(), r),
        })
    }

    /// Greedy continuation of `ctx ‖ prompt`, stopping after `eoa` (not
    /// included) or `max_new` tokens.
    pub fn generate(&self, ctx: &CompressedContext<T>, prompt: &[usize], eoa: usize, max_new: usize) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let z = tape.constant(ctx.vectors.clone());
        greedy(&mut tape, &bound.decoder, Some(Segment::Vectors(z)), ctx.len(), prompt, eoa, max_new)
    }

    pub fn save(&self, path: &Path, teacher_digest: &str) -> Result<()> {
        let mut meta = Metadata::new();
        meta.set("kind", "student");
        meta.set(
            "student_config",
            serde_json::to_string(&self.config).map_err(|e| Error::Format(e.to_string()))?,
        );
        meta.set("teacher_digest", teacher_digest);
        checkpoint::save(path, &meta, &self.params)
    }

    /// Loads student tensors saved by [`Student::save`] on top of `teacher`,
    /// which must be the model the student was distilled from.
    pub fn load(path: &Path, teacher: &ModelWeights<T>) -> Result<Self> {
        let (meta, params) = checkpoint::load(path)?;
        if meta.get("kind") != Some("student") {
            return Err(Error::Format(format!("{} is not a student checkpoint", path.display())));
        }
        let config: StudentConfig =
            serde_json::from_str(meta.require("student_config")?).map_err(|e| Error::Format(e.to_string()))?;
        let digest = teacher.digest();
        if meta.require("teacher_digest")? != digest {
            return Err(Error::Config(format!("{} was distilled from a different teacher", path.display())));
        }
        let student = Student { base: teacher.clone(), params, config };
        student.decoder_adapter().validate_against(teacher)?;
        if let Some(e) = student.encoder_adapter() {
            e.validate_against(teacher)?;
        }
        Ok(student)
    }
}

/// Greedy decoding without a key-value cache: the sequence is re-encoded
/// from scratch for every new token.
pub fn greedy<T: Scalar>(
    tape: &mut Tape<T>,
    model: &BoundModel,
    prefix: Option<Segment>,
    prefix_len: usize,
    prompt: &[usize],
    eoa: usize,
    max_new: usize,
) -> Result<Vec<usize>> {
    let max_pos = model.config().max_positions;
    let mut tokens = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_new && prefix_len + tokens.len() < max_pos {
        let n = prefix_len + tokens.len();
        if n == 0 {
            return Err(Error::InvalidArgument("cannot decode from an empty input".into()));
        }
        let mut segments = Vec::with_capacity(2);
        if let Some(p) = &prefix {
            segments.push(p.clone());
        }
        segments.push(Segment::Tokens(tokens.clone()));
        let mask = crate::model::AttentionMask::causal(n)?;
        let hidden = model.hidden(tape, &segments, &mask)?;
        let logits = model.logits_rows(tape, hidden, n - 1, 1)?;
        let next = argmax(tape.value(logits).data());
        if next == eoa {
            break;
        }
        out.push(next);
        tokens.push(next);
    }
    Ok(out)
}

/// First index of the maximum; ties resolve to the lowest id.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Greedy answer of a plain model (teacher) given `tokens`.
pub fn generate_plain<T: Scalar>(
    weights: &ModelWeights<T>,
    tokens: &[usize],
    eoa: usize,
    max_new: usize,
) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let model = BoundModel::bind(&mut tape, weights, None, false)?;
    greedy(&mut tape, &model, None, 0, tokens, eoa, max_new)
}
