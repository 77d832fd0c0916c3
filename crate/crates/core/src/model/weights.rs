use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{Scalar, Tensor};

pub const INIT_STD: f64 = 0.02;

/// Names of the projection matrices inside attention block `layer`.
pub fn attention_matrices(layer: usize) -> [String; 4] {
    ["wq", "wk", "wv", "wo"].map(|m| format!("layers.{layer}.attn.{m}"))
}

pub fn ffn_matrices(layer: usize) -> [String; 2] {
    ["w1", "w2"].map(|m| format!("layers.{layer}.ffn.{m}"))
}

/// All parameters of one transformer. Linear maps are stored `d_out x d_in`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
}

/// Expected `(name, shape)` layout for `cfg`.
pub fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (v, d, f, p) = (cfg.vocab_size, cfg.d_model, cfg.d_ff, cfg.max_positions);
    let mut out = vec![
        ("tok_emb".to_string(), vec![v, d]),
        ("pos_emb".to_string(), vec![p, d]),
        ("comp_emb".to_string(), vec![1, d]),
        ("ln_f.g".to_string(), vec![d]),
        ("ln_f.b".to_string(), vec![d]),
        ("lm_head".to_string(), vec![v, d]),
    ];
    for l in 0..cfg.n_layers {
        for ln in ["ln1", "ln2"] {
            out.push((format!("layers.{l}.{ln}.g"), vec![d]));
            out.push((format!("layers.{l}.{ln}.b"), vec![d]));
        }
        for m in attention_matrices(l) {
            out.push((m, vec![d, d]));
        }
        let [w1, w2] = ffn_matrices(l);
        out.push((w1, vec![f, d]));
        out.push((w2, vec![d, f]));
    }
    out
}

impl<T: Scalar> ModelWeights<T> {
    /// Gains start at one, biases at zero, everything else `N(0, 0.02^2)`.
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        Self::init_with_std(config, INIT_STD, rng)
    }

    pub fn init_with_std(config: ModelConfig, std: f64, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut params = ParamSet::new();
        for (name, shape) in layout(&config) {
            let n: usize = shape.iter().product();
            let data: Vec<T> = if name.ends_with(".g") {
                vec![T::one(); n]
            } else if name.ends_with(".b") {
                vec![T::zero(); n]
            } else {
                (0..n).map(|_| T::from_f64(normal.sample(rng))).collect()
            };
            params.insert(name, Tensor::from_parts(shape, data));
        }
        Ok(ModelWeights { config, params })
    }

    /// Checks that `params` matches the layout for `config` exactly.
    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            let t = params.get(name).map_err(|_| Error::Format(format!("missing tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!("{name}: shape {:?}, expected {shape:?}", t.shape())));
            }
        }
        Ok(ModelWeights { config, params })
    }

    pub fn cast<U: Scalar>(&self) -> ModelWeights<U> {
        ModelWeights { config: self.config, params: self.params.cast() }
    }

    pub fn digest(&self) -> String {
        self.params.digest()
    }
}

