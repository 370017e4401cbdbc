use std::sync::Arc;

use super::{AttentionMask, Model, ParamId};
use crate::frames::FrameMatrix;
use crate::numerics::{Gradients, Real, Tape, Var};
use crate::{Error, Result};

/// Flow time is multiplied by this before entering the sinusoid ladder so that
/// `t ∈ [0, 1]` spreads over many periods of the fastest frequency.
pub const TIME_SCALE: f64 = 1000.0;

const BASE_PERIOD: f64 = 10000.0;

/// Kind of content at a packed position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Text,
    Time,
    Frame,
    Audio,
}

/// Role-tagged input embeddings for one forward pass.
#[derive(Clone, Debug)]
pub struct PackedSequence {
    pub embeddings: Var,
    pub roles: Vec<Role>,
    pub loss_positions: Vec<usize>,
}

impl PackedSequence {
    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn positions_of(&self, role: Role) -> Vec<usize> {
        self.roles.iter().enumerate().filter(|(_, &r)| r == role).map(|(i, _)| i).collect()
    }
}

/// Interleaved `[sin, cos]` pairs over a geometric ladder of frequencies.
pub fn sinusoidal_features(t: f64, dim: usize) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("flow time {t} outside [0, 1]")));
    }
    let arg = t * TIME_SCALE;
    Ok((0..dim)
        .map(|j| {
            let freq = BASE_PERIOD.powf(-((2 * (j / 2)) as f64) / dim as f64);
            if j % 2 == 0 {
                (arg * freq).sin()
            } else {
                (arg * freq).cos()
            }
        })
        .collect())
}

/// Non-overlapping temporal means with window `pool`; the last window may be
/// shorter.
pub fn pool_frames<T: Real>(frames: &FrameMatrix<T>, pool: usize) -> FrameMatrix<T> {
    let pool = pool.max(1);
    let out_rows = frames.rows().div_ceil(pool);
    let d = frames.cols();
    let mut out = FrameMatrix::zeros(out_rows, d);
    for r in 0..out_rows {
        let start = r * pool;
        let end = (start + pool).min(frames.rows());
        let n = T::from_usize(end - start).unwrap();
        let dst = out.row_mut(r);
        for i in start..end {
            for (o, &v) in dst.iter_mut().zip(frames.row(i)) {
                *o += v;
            }
        }
        dst.iter_mut().for_each(|o| *o /= n);
    }
    out
}

/// A forward pass in progress: the tape plus lazily bound parameter leaves.
pub struct Session<'m, T> {
    pub tape: Tape<T>,
    model: &'m Model<T>,
    bound: Vec<Option<Var>>,
}

impl<'m, T: Real> Session<'m, T> {
    pub fn new(model: &'m Model<T>) -> Self {
        Self { tape: Tape::new(), model, bound: vec![None; model.store().len()] }
    }

    pub fn model(&self) -> &'m Model<T> {
        self.model
    }

    /// Tape leaf for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(&self.model.store().get(id).tensor);
        self.bound[id.0] = Some(v);
        v
    }

    fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let w = self.param(w);
        let b = self.param(b);
        let y = self.tape.matmul(x, w)?;
        Ok(self.tape.add_row(y, b)?)
    }

    fn constant_frames(&mut self, m: &FrameMatrix<T>) -> Result<Var> {
        Ok(self.tape.constant(vec![m.rows(), m.cols()], m.data().to_vec())?)
    }

    /// Token embedding rows, `[n × d_model]`.
    pub fn tokens(&mut self, ids: &[u32]) -> Result<Var> {
        let v = self.model.cfg().vocab_size;
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= v) {
            return Err(Error::Domain(format!("token {bad} outside vocabulary of {v}")));
        }
        let rows: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        let table = self.param(self.model.ids().tok_emb);
        Ok(self.tape.gather_rows(table, &rows)?)
    }

    /// Sinusoidal features of `t` through the learned projection, `[1 × d_model]`.
    pub fn time_embedding(&mut self, t: f64) -> Result<Var> {
        let d = self.model.cfg().d_model;
        let feats: Vec<T> = sinusoidal_features(t, d)?.into_iter().map(T::from_f64_lossy).collect();
        let x = self.tape.constant(vec![1, d], feats)?;
        let ids = self.model.ids();
        self.linear(x, ids.time_w, ids.time_b)
    }

    /// Noisy and context frames concatenated along the feature axis, then
    /// projected, `[T × d_model]`.
    pub fn frame_input(&mut self, noisy: &FrameMatrix<T>, ctx: &FrameMatrix<T>) -> Result<Var> {
        let f = self.model.cfg().frame_dim;
        if !noisy.same_shape(ctx) || noisy.cols() != f || noisy.rows() == 0 {
            return Err(Error::Dimension(format!(
                "frame input expects matching T×{f} matrices, got {}x{} and {}x{}",
                noisy.rows(),
                noisy.cols(),
                ctx.rows(),
                ctx.cols()
            )));
        }
        let cat = FrameMatrix::from_fn(noisy.rows(), 2 * f, |i, j| if j < f { noisy.get(i, j) } else { ctx.get(i, j - f) });
        let x = self.constant_frames(&cat)?;
        let ids = self.model.ids();
        self.linear(x, ids.frame_w, ids.frame_b)
    }

    /// Mean-pooled frames projected to the model width, `[⌈T/pool⌉ × d_model]`.
    pub fn audio_adapter(&mut self, frames: &FrameMatrix<T>) -> Result<Var> {
        let cfg = self.model.cfg();
        if frames.cols() != cfg.frame_dim || frames.rows() == 0 {
            return Err(Error::Dimension(format!(
                "adapter expects T×{} frames with T ≥ 1, got {}x{}",
                cfg.frame_dim,
                frames.rows(),
                frames.cols()
            )));
        }
        let pooled = pool_frames(frames, cfg.adapter_pool);
        let x = self.constant_frames(&pooled)?;
        let ids = self.model.ids();
        self.linear(x, ids.adapter_w, ids.adapter_b)
    }

    /// Pre-norm attention block followed by a pre-norm GELU MLP block.
    pub fn attention_layer(&mut self, x: Var, layer: usize, mask: &Arc<AttentionMask>) -> Result<Var> {
        let cfg = self.model.cfg();
        let (d, nh, dh) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
        let len = self.tape.shape(x)[0];
        if mask.rows() != len || mask.cols() != len {
            return Err(Error::Dimension(format!("{}x{} mask for a sequence of {len}", mask.rows(), mask.cols())));
        }
        let ids = self.model.ids().layers[layer].clone();

        let g = self.param(ids.ln1_g);
        let b = self.param(ids.ln1_b);
        let h = self.tape.layer_norm(x, g, b)?;
        let qkv = self.linear(h, ids.qkv_w, ids.qkv_b)?;
        let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(nh);
        for head in 0..nh {
            let q = self.tape.slice_cols(qkv, head * dh, dh)?;
            let q = self.tape.scale(q, scale);
            let k = self.tape.slice_cols(qkv, d + head * dh, dh)?;
            let v = self.tape.slice_cols(qkv, 2 * d + head * dh, dh)?;
            let scores = self.tape.matmul_nt(q, k)?;
            let probs = self.tape.softmax_rows(scores, Some(mask))?;
            heads.push(self.tape.matmul(probs, v)?);
        }
        let merged = if nh == 1 { heads[0] } else { self.tape.concat_cols(&heads)? };
        let attn = self.linear(merged, ids.out_w, ids.out_b)?;
        let x = self.tape.add(x, attn)?;

        let g = self.param(ids.ln2_g);
        let b = self.param(ids.ln2_b);
        let h = self.tape.layer_norm(x, g, b)?;
        let h = self.linear(h, ids.fc1_w, ids.fc1_b)?;
        let h = self.tape.gelu(h);
        let h = self.linear(h, ids.fc2_w, ids.fc2_b)?;
        Ok(self.tape.add(x, h)?)
    }

    /// Positional embeddings added once, `n_layers` blocks, final norm.
    pub fn backbone(&mut self, pack: &PackedSequence, mask: &Arc<AttentionMask>) -> Result<Var> {
        let cfg = self.model.cfg();
        let len = pack.len();
        if len > cfg.max_positions {
            return Err(Error::Capacity { len, max: cfg.max_positions });
        }
        if self.tape.shape(pack.embeddings) != [len, cfg.d_model] {
            return Err(Error::Dimension(format!(
                "pack embeddings {:?} do not match {len} roles",
                self.tape.shape(pack.embeddings)
            )));
        }
        let positions: Vec<usize> = (0..len).collect();
        let pos_table = self.param(self.model.ids().pos_emb);
        let pos = self.tape.gather_rows(pos_table, &positions)?;
        let mut x = self.tape.add(pack.embeddings, pos)?;
        for layer in 0..cfg.n_layers {
            x = self.attention_layer(x, layer, mask)?;
        }
        let g = self.param(self.model.ids().lnf_g);
        let b = self.param(self.model.ids().lnf_b);
        Ok(self.tape.layer_norm(x, g, b)?)
    }

    /// Vocabulary logits; shares the token embedding unless untied.
    pub fn lm_head(&mut self, h: Var) -> Result<Var> {
        match self.model.ids().lm_w {
            Some(w) => {
                let w = self.param(w);
                Ok(self.tape.matmul(h, w)?)
            }
            None => {
                let e = self.param(self.model.ids().tok_emb);
                Ok(self.tape.matmul_nt(h, e)?)
            }
        }
    }

    /// Velocity prediction per position, `[L × D]`.
    pub fn velocity_head(&mut self, h: Var) -> Result<Var> {
        let ids = self.model.ids();
        self.linear(h, ids.vel_w, ids.vel_b)
    }

    /// Per-parameter gradients in store order. Parameters the forward pass
    /// never touched get explicit zeros.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<Vec<T>> {
        self.model
            .store()
            .iter()
            .zip(&self.bound)
            .map(|(p, b)| {
                b.and_then(|v| grads.get(v).map(<[T]>::to_vec)).unwrap_or_else(|| vec![T::zero(); p.tensor.numel()])
            })
            .collect()
    }
}
