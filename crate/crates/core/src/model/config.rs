use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the pre-norm transformer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_positions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { vocab_size: 256, d_model: 64, n_layers: 2, n_heads: 4, d_ff: 128, max_positions: 128 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = fields.iter().find(|f| f.1 == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub(crate) fn to_kv(self) -> Vec<(String, String)> {
        vec![
            ("vocab_size".into(), self.vocab_size.to_string()),
            ("d_model".into(), self.d_model.to_string()),
            ("n_layers".into(), self.n_layers.to_string()),
            ("n_heads".into(), self.n_heads.to_string()),
            ("d_ff".into(), self.d_ff.to_string()),
            ("max_positions".into(), self.max_positions.to_string()),
        ]
    }

    pub(crate) fn from_kv(kv: &crate::checkpoint::Metadata) -> Result<Self> {
        let cfg = ModelConfig {
            vocab_size: kv.parse("vocab_size")?,
            d_model: kv.parse("d_model")?,
            n_layers: kv.parse("n_layers")?,
            n_heads: kv.parse("n_heads")?,
            d_ff: kv.parse("d_ff")?,
            max_positions: kv.parse("max_positions")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
