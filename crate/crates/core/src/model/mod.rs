//! Shared transformer backbone.
//!
//! One set of weights serves both tasks; the caller decides the attention
//! mask per sequence. Time conditioning for generation enters only through a
//! dedicated TIME position in the packed sequence, never through per-layer
//! modulation.

mod config;
mod mask;
mod params;
mod session;

pub use config::{parse_kv, ModelConfig};
pub use mask::{AttentionMask, MaskKind};
pub use params::{Param, ParamId, ParamStore};
pub use session::{pool_frames, sinusoidal_features, PackedSequence, Role, Session, TIME_SCALE};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::numerics::{Real, Tensor};
use crate::{Error, Result};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub(crate) struct LayerIds {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub qkv_w: ParamId,
    pub qkv_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct ParamIds {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub time_w: ParamId,
    pub time_b: ParamId,
    pub frame_w: ParamId,
    pub frame_b: ParamId,
    pub adapter_w: ParamId,
    pub adapter_b: ParamId,
    pub layers: Vec<LayerIds>,
    pub lnf_g: ParamId,
    pub lnf_b: ParamId,
    pub lm_w: Option<ParamId>,
    pub vel_w: ParamId,
    pub vel_b: ParamId,
}

/// Parameters that only the generation task reaches.
pub const GENERATION_ONLY_PARAMS: &[&str] =
    &["time_proj.w", "time_proj.b", "frame_in.w", "frame_in.b", "velocity_head.w", "velocity_head.b"];

/// Parameters that only the recognition task reaches.
pub const RECOGNITION_ONLY_PARAMS: &[&str] = &["adapter.w", "adapter.b"];

fn build<T: Real>(
    cfg: &ModelConfig,
    mut make: impl FnMut(&str, Vec<usize>, Init) -> Result<Tensor<T>>,
) -> Result<(ParamStore<T>, ParamIds)> {
    let (d, f, v) = (cfg.d_model, cfg.frame_dim, cfg.vocab_size);
    let resid = Init::Normal(INIT_STD / (2.0 * cfg.n_layers.max(1) as f64).sqrt());
    let w = Init::Normal(INIT_STD);
    let mut store = ParamStore::new();
    let mut add = |name: &str, shape: Vec<usize>, init: Init, decay: bool| -> Result<ParamId> {
        let t = make(name, shape, init)?;
        Ok(store.insert(name, t, decay))
    };
    let tok_emb = add("tok_emb", vec![v, d], w, true)?;
    let pos_emb = add("pos_emb", vec![cfg.max_positions, d], w, true)?;
    let time_w = add("time_proj.w", vec![d, d], w, true)?;
    let time_b = add("time_proj.b", vec![d], Init::Zeros, false)?;
    let frame_w = add("frame_in.w", vec![2 * f, d], w, true)?;
    let frame_b = add("frame_in.b", vec![d], Init::Zeros, false)?;
    let adapter_w = add("adapter.w", vec![f, d], w, true)?;
    let adapter_b = add("adapter.b", vec![d], Init::Zeros, false)?;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        layers.push(LayerIds {
            ln1_g: add(&p("ln1.g"), vec![d], Init::Ones, false)?,
            ln1_b: add(&p("ln1.b"), vec![d], Init::Zeros, false)?,
            qkv_w: add(&p("attn.qkv.w"), vec![d, 3 * d], w, true)?,
            qkv_b: add(&p("attn.qkv.b"), vec![3 * d], Init::Zeros, false)?,
            out_w: add(&p("attn.out.w"), vec![d, d], resid, true)?,
            out_b: add(&p("attn.out.b"), vec![d], Init::Zeros, false)?,
            ln2_g: add(&p("ln2.g"), vec![d], Init::Ones, false)?,
            ln2_b: add(&p("ln2.b"), vec![d], Init::Zeros, false)?,
            fc1_w: add(&p("mlp.fc1.w"), vec![d, 4 * d], w, true)?,
            fc1_b: add(&p("mlp.fc1.b"), vec![4 * d], Init::Zeros, false)?,
            fc2_w: add(&p("mlp.fc2.w"), vec![4 * d, d], resid, true)?,
            fc2_b: add(&p("mlp.fc2.b"), vec![d], Init::Zeros, false)?,
        });
    }
    let lnf_g = add("ln_f.g", vec![d], Init::Ones, false)?;
    let lnf_b = add("ln_f.b", vec![d], Init::Zeros, false)?;
    let lm_w = if cfg.tie_embeddings { None } else { Some(add("lm_head.w", vec![d, v], w, true)?) };
    let vel_w = add("velocity_head.w", vec![d, f], w, true)?;
    let vel_b = add("velocity_head.b", vec![f], Init::Zeros, false)?;
    let ids = ParamIds {
        tok_emb,
        pos_emb,
        time_w,
        time_b,
        frame_w,
        frame_b,
        adapter_w,
        adapter_b,
        layers,
        lnf_g,
        lnf_b,
        lm_w,
        vel_w,
        vel_b,
    };
    Ok((store, ids))
}

/// Backbone weights plus the configuration they were built for.
#[derive(Clone, Debug)]
pub struct Model<T> {
    cfg: ModelConfig,
    store: ParamStore<T>,
    ids: ParamIds,
}

impl<T: Real> Model<T> {
    /// Scaled-normal initialization (std 0.02, residual projections further
    /// scaled by `1/sqrt(2·n_layers)`), zero biases, unit gains.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (store, ids) = build(&cfg, |_, shape, init| {
            Ok(match init {
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::from_fn(shape, |_| T::one()),
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("positive std");
                    Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(&mut rng)))
                }
            })
        })?;
        Ok(Self { cfg, store, ids })
    }

    /// Rebinds a loaded store; names and shapes must match `cfg` exactly.
    pub fn from_store(cfg: ModelConfig, loaded: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let (store, ids) = build(&cfg, |name, shape, _| {
            let id = loaded
                .find(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter `{name}`")))?;
            let t = &loaded.get(id).tensor;
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter `{name}` has shape {:?}, config expects {shape:?}",
                    t.shape()
                )));
            }
            Ok(t.clone())
        })?;
        if store.len() != loaded.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, config expects {}",
                loaded.len(),
                store.len()
            )));
        }
        Ok(Self { cfg, store, ids })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model { cfg: self.cfg.clone(), store: self.store.cast(), ids: self.ids.clone() }
    }

    pub fn session(&self) -> Session<'_, T> {
        Session::new(self)
    }

    pub(crate) fn ids(&self) -> &ParamIds {
        &self.ids
    }
}
