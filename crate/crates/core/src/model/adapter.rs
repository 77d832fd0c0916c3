//! Low-rank additive deltas on selected weight matrices.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::weights::{attention_matrices, ffn_matrices, ModelWeights};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{Scalar, Tensor};

/// Which weight matrices receive an adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterTargets {
    #[default]
    Attention,
    AttentionAndFfn,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    #[serde(default)]
    pub targets: AdapterTargets,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig { rank: 16, alpha: 16.0, targets: AdapterTargets::Attention }
    }
}

impl AdapterTargets {
    pub fn matrices(self, cfg: &ModelConfig) -> Vec<String> {
        let mut out = Vec::new();
        for l in 0..cfg.n_layers {
            out.extend(attention_matrices(l));
            if self == AdapterTargets::AttentionAndFfn {
                out.extend(ffn_matrices(l));
            }
        }
        out
    }
}

/// For each adapted `d_out x d_in` matrix `M`: `down` is `rank x d_in`, `up`
/// is `d_out x rank` and the effective delta is `(alpha / rank) up down`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankAdapter<T> {
    pub rank: usize,
    pub alpha: f64,
    pub params: ParamSet<T>,
}

impl<T: Scalar> LowRankAdapter<T> {
    /// `down ~ N(0, 1/d_in)` and `up = 0`, so the adapted model starts out
    /// identical to the base model.
    pub fn init(weights: &ModelWeights<T>, cfg: &AdapterConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.rank == 0 {
            return Err(Error::Config("adapter rank must be positive".into()));
        }
        let mut params = ParamSet::new();
        for name in cfg.targets.matrices(&weights.config) {
            let base = weights.params.get(&name)?;
            let (d_out, d_in) = base.dims2()?;
            let normal = Normal::new(0.0, (1.0 / d_in as f64).sqrt())
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
            let down = (0..cfg.rank * d_in).map(|_| T::from_f64(normal.sample(rng))).collect();
            params.insert(format!("{name}.down"), Tensor::from_parts(vec![cfg.rank, d_in], down));
            params.insert(format!("{name}.up"), Tensor::zeros(vec![d_out, cfg.rank]));
        }
        Ok(LowRankAdapter { rank: cfg.rank, alpha: cfg.alpha, params })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Names of the adapted base matrices.
    pub fn targets(&self) -> Vec<String> {
        self.params.names().filter_map(|n| n.strip_suffix(".down").map(str::to_string)).collect()
    }

    /// `(alpha / rank) up down` for one target.
    pub fn delta(&self, target: &str) -> Result<Tensor<T>> {
        let down = self.params.get(&format!("{target}.down"))?;
        let up = self.params.get(&format!("{target}.up"))?;
        Ok(up.matmul(down)?.scale(T::from_f64(self.scale())))
    }

    /// Checks shapes against the weights the adapter will be applied to.
    pub fn validate_against(&self, weights: &ModelWeights<T>) -> Result<()> {
        for target in self.targets() {
            let base = weights
                .params
                .get(&target)
                .map_err(|_| Error::InvalidArgument(format!("adapter targets unknown matrix {target}")))?;
            let (d_out, d_in) = base.dims2()?;
            let down = self.params.get(&format!("{target}.down"))?;
            let up = self.params.get(&format!("{target}.up"))?;
            if down.shape() != [self.rank, d_in] || up.shape() != [d_out, self.rank] {
                return Err(Error::InvalidArgument(format!(
                    "{target}: adapter shapes {:?}/{:?} do not fit {d_out}x{d_in} at rank {}",
                    up.shape(),
                    down.shape(),
                    self.rank
                )));
            }
        }
        Ok(())
    }
}

/// Folds `adapter` into a copy of `weights`: `M + (alpha / rank) up down`.
pub fn merge_adapter<T: Scalar>(weights: &ModelWeights<T>, adapter: &LowRankAdapter<T>) -> Result<ModelWeights<T>> {
    adapter.validate_against(weights)?;
    let mut merged = weights.clone();
    for target in adapter.targets() {
        let delta = adapter.delta(&target)?;
        let m = merged.params.get_mut(&target)?;
        for (a, &d) in m.data_mut().iter_mut().zip(delta.data()) {
            *a = *a + d;
        }
    }
    Ok(merged)
}
