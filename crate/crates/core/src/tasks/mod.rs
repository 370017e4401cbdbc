//! Recognition and generation built on the shared backbone.
//!
//! Recognition packs `[AUDIO × ⌈T/pool⌉][TEXT × n]` under a causal mask; the
//! hidden state at position `p − 1` predicts the token at TEXT position `p`.
//! Generation packs `[TEXT × n | NULL][TIME][FRAME × T]` under the model's
//! generation mask and reads velocities off the FRAME positions.

use std::sync::Arc;

use rand::Rng;

use crate::flow::{
    self, apply_cfg_dropout, cfm_infill_loss, make_flow_sample, sample_span_mask, FlowSample, InfillBatch,
    SamplerConfig, VelocityField,
};
use crate::frames::FrameMatrix;
use crate::model::{AttentionMask, Model, PackedSequence, Role, Session};
use crate::numerics::{Real, Var};
use crate::tokens::{END_TOKEN, NULL_TOKEN};
use crate::{Error, Result};

/// Frames paired with a transcript that ends in exactly one terminal token.
#[derive(Clone, Debug, PartialEq)]
pub struct AsrExample<T = f32> {
    pub frames: FrameMatrix<T>,
    pub transcript: Vec<u32>,
}

impl<T: Real> AsrExample<T> {
    pub fn new(frames: FrameMatrix<T>, transcript: Vec<u32>) -> Result<Self> {
        if frames.rows() == 0 {
            return Err(Error::Contract("recognition input has no frames".into()));
        }
        match transcript.iter().position(|&t| t == END_TOKEN) {
            Some(i) if i + 1 == transcript.len() => Ok(Self { frames, transcript }),
            _ => Err(Error::Contract("transcript must end with exactly one terminal token".into())),
        }
    }

    /// Content tokens followed by the terminal token.
    pub fn from_tokens(frames: FrameMatrix<T>, tokens: &[u32]) -> Result<Self> {
        let mut transcript = tokens.to_vec();
        transcript.push(END_TOKEN);
        Self::new(frames, transcript)
    }
}

/// Target frames with the text they render.
#[derive(Clone, Debug, PartialEq)]
pub struct TtsExample<T = f32> {
    pub frames: FrameMatrix<T>,
    pub text: Vec<u32>,
}

pub fn asr_pack_len(frames: usize, pool: usize, text: usize) -> usize {
    frames.div_ceil(pool.max(1)) + text
}

fn check_capacity(len: usize, max: usize) -> Result<()> {
    if len > max {
        return Err(Error::Capacity { len, max });
    }
    Ok(())
}

/// Audio prefix followed by `text`, all under a causal mask.
fn asr_prefix_pack<T: Real>(
    s: &mut Session<'_, T>,
    frames: &FrameMatrix<T>,
    text: &[u32],
) -> Result<(PackedSequence, Arc<AttentionMask>)> {
    let cfg = s.model().cfg();
    let len = asr_pack_len(frames.rows(), cfg.adapter_pool, text.len());
    check_capacity(len, cfg.max_positions)?;
    let audio = s.audio_adapter(frames)?;
    let a = s.tape.shape(audio)[0];
    let embeddings = if text.is_empty() {
        audio
    } else {
        let toks = s.tokens(text)?;
        s.tape.concat_rows(&[audio, toks])?
    };
    let mut roles = vec![Role::Audio; a];
    roles.extend(std::iter::repeat_n(Role::Text, text.len()));
    let loss_positions = (a..len).collect();
    Ok((PackedSequence { embeddings, roles, loss_positions }, Arc::new(AttentionMask::causal(len))))
}

pub fn build_asr_pack<T: Real>(s: &mut Session<'_, T>, ex: &AsrExample<T>) -> Result<(PackedSequence, Arc<AttentionMask>)> {
    asr_prefix_pack(s, &ex.frames, &ex.transcript)
}

/// Logits predicting each transcript token, `[n × vocab]`.
pub fn asr_logits<T: Real>(s: &mut Session<'_, T>, ex: &AsrExample<T>) -> Result<Var> {
    let (pack, mask) = build_asr_pack(s, ex)?;
    let h = s.backbone(&pack, &mask)?;
    let rows: Vec<usize> = pack.loss_positions.iter().map(|&p| p - 1).collect();
    let h = s.tape.gather_rows(h, &rows)?;
    s.lm_head(h)
}

/// Mean next-token cross-entropy over the transcript.
pub fn asr_loss<T: Real>(s: &mut Session<'_, T>, ex: &AsrExample<T>) -> Result<Var> {
    let logits = asr_logits(s, ex)?;
    let targets: Vec<usize> = ex.transcript.iter().map(|&t| t as usize).collect();
    Ok(s.tape.cross_entropy(logits, &targets, &[])?)
}

/// Index of the largest value; the first one wins ties.
pub fn argmax<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoded {
    /// Includes the terminal token when decoding stopped on it.
    pub tokens: Vec<u32>,
    /// Stopped by `max_len` or the position budget rather than the terminal.
    pub truncated: bool,
}

impl Decoded {
    /// Tokens with the terminal token removed.
    pub fn content(&self) -> &[u32] {
        crate::tokens::strip_terminal(&self.tokens)
    }
}

/// Argmax decoding, one TEXT position per step, until the terminal token.
pub fn greedy_decode<T: Real>(model: &Model<T>, frames: &FrameMatrix<T>, max_len: usize) -> Result<Decoded> {
    if max_len == 0 {
        return Err(Error::Contract("max_len must be at least 1".into()));
    }
    let cfg = model.cfg();
    let mut tokens = Vec::new();
    while tokens.len() < max_len {
        // Stop once the transcript so far plus the next token would no longer
        // fit in a teacher-forced pack.
        if asr_pack_len(frames.rows(), cfg.adapter_pool, tokens.len() + 1) > cfg.max_positions {
            break;
        }
        let mut s = model.session();
        let (pack, mask) = asr_prefix_pack(&mut s, frames, &tokens)?;
        let h = s.backbone(&pack, &mask)?;
        let last = s.tape.gather_rows(h, &[pack.len() - 1])?;
        let logits = s.lm_head(last)?;
        let next = argmax(s.tape.value(logits)) as u32;
        tokens.push(next);
        if next == END_TOKEN {
            return Ok(Decoded { tokens, truncated: false });
        }
    }
    Ok(Decoded { tokens, truncated: true })
}

pub fn tts_pack_len(text: usize, frames: usize) -> usize {
    text.max(1) + 1 + frames
}

/// Text (or the null token), the time slot, then one FRAME per row of `xt`.
pub fn tts_pack<T: Real>(
    s: &mut Session<'_, T>,
    text: &[u32],
    t: f64,
    xt: &FrameMatrix<T>,
    ctx: &FrameMatrix<T>,
) -> Result<(PackedSequence, Arc<AttentionMask>)> {
    let cfg = s.model().cfg();
    let len = tts_pack_len(text.len(), xt.rows());
    check_capacity(len, cfg.max_positions)?;
    let null = [NULL_TOKEN];
    let text = if text.is_empty() { &null[..] } else { text };
    let toks = s.tokens(text)?;
    let time = s.time_embedding(t)?;
    let frames = s.frame_input(xt, ctx)?;
    let embeddings = s.tape.concat_rows(&[toks, time, frames])?;
    let mut roles = vec![Role::Text; text.len()];
    roles.push(Role::Time);
    roles.extend(std::iter::repeat_n(Role::Frame, xt.rows()));
    let loss_positions = (text.len() + 1..len).collect();
    let mask = Arc::new(cfg.tts_mask.build(len));
    Ok((PackedSequence { embeddings, roles, loss_positions }, mask))
}

pub fn build_tts_pack<T: Real>(
    s: &mut Session<'_, T>,
    batch: &InfillBatch<T>,
    xt: &FrameMatrix<T>,
) -> Result<(PackedSequence, Arc<AttentionMask>)> {
    tts_pack(s, &batch.text, batch.t, xt, &batch.ctx)
}

/// Velocity predictions at the FRAME positions, `[T × D]`.
pub fn tts_velocity<T: Real>(
    s: &mut Session<'_, T>,
    text: &[u32],
    t: f64,
    xt: &FrameMatrix<T>,
    ctx: &FrameMatrix<T>,
) -> Result<Var> {
    let (pack, mask) = tts_pack(s, text, t, xt, ctx)?;
    let h = s.backbone(&pack, &mask)?;
    let frames = s.tape.gather_rows(h, &pack.loss_positions)?;
    s.velocity_head(frames)
}

/// Infilling loss for a fully specified batch and path sample.
pub fn tts_infill_loss<T: Real>(s: &mut Session<'_, T>, batch: &InfillBatch<T>, sample: &FlowSample<T>) -> Result<Var> {
    let pred = tts_velocity(s, &batch.text, sample.t, &sample.xt, &batch.ctx)?;
    cfm_infill_loss(&mut s.tape, pred, sample, &batch.mask)
}

/// Draws a span mask, condition dropout and a path sample from `rng` (in that
/// order), then evaluates the infilling loss.
pub fn tts_train_loss<T: Real>(
    s: &mut Session<'_, T>,
    x1: &FrameMatrix<T>,
    text: &[u32],
    rng: &mut impl Rng,
) -> Result<Var> {
    let mask = sample_span_mask(x1.rows(), rng);
    let batch = InfillBatch::new(x1.clone(), mask, text.to_vec(), 0.0)?;
    let mut batch = apply_cfg_dropout(batch, rng, flow::P_DROP_TEXT, flow::P_DROP_CTX)?;
    let sample = make_flow_sample(x1, rng);
    batch.t = sample.t;
    tts_infill_loss(s, &batch, &sample)
}

impl<T: Real> VelocityField<T> for Model<T> {
    fn velocity(&self, xt: &FrameMatrix<T>, ctx: &FrameMatrix<T>, text: &[u32], t: f64) -> Result<FrameMatrix<T>> {
        let mut s = self.session();
        let v = tts_velocity(&mut s, text, t, xt, ctx)?;
        FrameMatrix::new(xt.rows(), xt.cols(), s.tape.value(v).to_vec())
    }
}

/// `len(Y_gen) / len(Y_ref)`.
pub fn duration_ratio(ref_text: &[u32], gen_text: &[u32]) -> Result<f64> {
    if ref_text.is_empty() {
        return Err(Error::Contract("reference text is empty".into()));
    }
    Ok(gen_text.len() as f64 / ref_text.len() as f64)
}

/// `round(T_ref · len(Y_gen) / len(Y_ref))`, halves rounded away from zero,
/// at least one frame. Computed in integers so exact halves are exact.
pub fn generated_frames(ref_frames: usize, ref_text: &[u32], gen_text: &[u32]) -> Result<usize> {
    duration_ratio(ref_text, gen_text)?;
    let (num, den) = (ref_frames * gen_text.len(), ref_text.len());
    Ok(((2 * num + den) / (2 * den)).max(1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TtsInferenceRequest<T = f32> {
    pub ref_frames: FrameMatrix<T>,
    pub ref_text: Vec<u32>,
    pub gen_text: Vec<u32>,
    pub sampler: SamplerConfig,
}

impl<T: Real> TtsInferenceRequest<T> {
    pub fn validate(&self) -> Result<()> {
        if self.ref_frames.rows() == 0 {
            return Err(Error::Contract("reference has no frames".into()));
        }
        if self.ref_text.is_empty() || self.gen_text.is_empty() {
            return Err(Error::Contract("reference and target text must be nonempty".into()));
        }
        self.sampler.validate()
    }

    /// `(T_gen, T_total)`.
    pub fn lengths(&self) -> Result<(usize, usize)> {
        let t_gen = generated_frames(self.ref_frames.rows(), &self.ref_text, &self.gen_text)?;
        Ok((t_gen, self.ref_frames.rows() + t_gen))
    }

    /// `Y_ref ++ Y_gen`.
    pub fn condition(&self) -> Vec<u32> {
        self.ref_text.iter().chain(&self.gen_text).copied().collect()
    }
}

/// Prefix infilling with any velocity field; returns only the generated tail.
pub fn synthesize_with<T: Real, F: VelocityField<T> + ?Sized>(field: &F, req: &TtsInferenceRequest<T>) -> Result<FrameMatrix<T>> {
    req.validate()?;
    let (_, total) = req.lengths()?;
    let ctx = req.ref_frames.zero_padded(total);
    let out = flow::ode_sample(field, &ctx, &req.condition(), &req.sampler)?;
    Ok(out.slice_rows(req.ref_frames.rows(), total))
}

/// [`synthesize_with`] on the model, with the position budget checked up
/// front.
pub fn synthesize<T: Real>(model: &Model<T>, req: &TtsInferenceRequest<T>) -> Result<FrameMatrix<T>> {
    req.validate()?;
    let (_, total) = req.lengths()?;
    if req.ref_frames.cols() != model.cfg().frame_dim {
        return Err(Error::Dimension(format!(
            "reference frames have {} columns, model expects {}",
            req.ref_frames.cols(),
            model.cfg().frame_dim
        )));
    }
    check_capacity(tts_pack_len(req.ref_text.len() + req.gen_text.len(), total), model.cfg().max_positions)?;
    synthesize_with(model, req)
}
