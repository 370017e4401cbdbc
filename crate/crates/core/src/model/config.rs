use std::collections::BTreeMap;

use super::MaskKind;
use crate::{Error, Result};

/// Shape of the shared backbone and its task adapters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub vocab_size: usize,
    /// Frame dimension `D` of the continuous sequences.
    pub frame_dim: usize,
    pub max_positions: usize,
    /// Temporal mean-pooling window of the recognition adapter.
    pub adapter_pool: usize,
    /// Share the token embedding with the output projection.
    pub tie_embeddings: bool,
    /// Mask the generation task runs under (full in the reference setup).
    pub tts_mask: MaskKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_heads: 4,
            n_layers: 5,
            vocab_size: 32,
            frame_dim: 16,
            max_positions: 192,
            adapter_pool: 2,
            tie_embeddings: true,
            tts_mask: MaskKind::Full,
        }
    }
}

impl ModelConfig {
    /// Small shape used by gradient checks and unit tests.
    pub fn tiny() -> Self {
        Self {
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            vocab_size: 8,
            frame_dim: 4,
            max_positions: 48,
            adapter_pool: 2,
            tie_embeddings: true,
            tts_mask: MaskKind::Full,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("frame_dim", self.frame_dim),
            ("max_positions", self.max_positions),
            ("adapter_pool", self.adapter_pool),
        ];
        for (name, v) in extents {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 3 {
            return Err(Error::Config("vocab_size must leave room for the null and terminal tokens".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form count of learnable scalars.
    pub fn param_count(&self) -> usize {
        let (d, v, p, f, l) = (self.d_model, self.vocab_size, self.max_positions, self.frame_dim, self.n_layers);
        let embeddings = v * d + p * d;
        let time = d * d + d;
        let frame_in = 2 * f * d + d;
        let adapter = f * d + d;
        let per_layer = 12 * d * d + 13 * d;
        let final_norm = 2 * d;
        let lm = if self.tie_embeddings { 0 } else { d * v };
        let velocity = d * f + f;
        embeddings + time + frame_in + adapter + l * per_layer + final_norm + lm + velocity
    }

    pub fn to_kv(&self) -> String {
        format!(
            "d_model={}\nn_heads={}\nn_layers={}\nvocab_size={}\nframe_dim={}\nmax_positions={}\nadapter_pool={}\ntie_embeddings={}\ntts_mask={}\n",
            self.d_model,
            self.n_heads,
            self.n_layers,
            self.vocab_size,
            self.frame_dim,
            self.max_positions,
            self.adapter_pool,
            self.tie_embeddings,
            self.tts_mask.as_str()
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let map = parse_kv(text)?;
        let get = |k: &str| -> Result<&str> {
            map.get(k).map(String::as_str).ok_or_else(|| Error::Format(format!("model config is missing `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|e| Error::Format(format!("model config `{k}`: {e}")))
        };
        let cfg = Self {
            d_model: num("d_model")?,
            n_heads: num("n_heads")?,
            n_layers: num("n_layers")?,
            vocab_size: num("vocab_size")?,
            frame_dim: num("frame_dim")?,
            max_positions: num("max_positions")?,
            adapter_pool: num("adapter_pool")?,
            tie_embeddings: get("tie_embeddings")?
                .parse()
                .map_err(|e| Error::Format(format!("model config `tie_embeddings`: {e}")))?,
            tts_mask: get("tts_mask")?.parse().map_err(Error::Format)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}
