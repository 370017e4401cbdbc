//! Joint optimization: the weighted two-task objective, AdamW with warmup and
//! cosine decay, binary checkpoints and a deterministic, resumable run loop.

mod checkpoint;
mod optim;
mod run;

pub use checkpoint::{LossStats, TrainState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{clip_and_check, optimizer_step, AdamState, StepStats};
pub use run::{parse_log, train_run, LogRecord, RunOptions, RunSummary, CHECKPOINT_FILE, LOG_FILE, TRAIN_CONFIG_FILE};

use std::str::FromStr;

use rand::Rng;

use crate::model::{parse_kv, Model, Session};
use crate::numerics::{Real, Tape, Var};
use crate::tasks::{asr_loss, tts_train_loss, AsrExample, TtsExample};
use crate::{Error, Result};

/// Which objectives a run optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TaskMix {
    #[default]
    Joint,
    AsrOnly,
    TtsOnly,
}

impl TaskMix {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskMix::Joint => "joint",
            TaskMix::AsrOnly => "asr_only",
            TaskMix::TtsOnly => "tts_only",
        }
    }

    pub fn asr(self) -> bool {
        self != TaskMix::TtsOnly
    }

    pub fn tts(self) -> bool {
        self != TaskMix::AsrOnly
    }
}

impl FromStr for TaskMix {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "joint" => Ok(TaskMix::Joint),
            "asr_only" => Ok(TaskMix::AsrOnly),
            "tts_only" => Ok(TaskMix::TtsOnly),
            other => Err(format!("unknown task mix `{other}` (expected joint, asr_only or tts_only)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Weight of the recognition loss.
    pub lambda_lm: f64,
    pub lr_peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    /// Examples per task per step.
    pub batch_items: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; zero disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub task_mix: TaskMix,
    pub checkpoint_every: u64,
    /// Periodic evaluation interval; zero disables it.
    pub eval_every: u64,
    /// Items per evaluation (recognition items and cloning items per group).
    pub eval_items: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_lm: 0.005,
            lr_peak: 3e-4,
            warmup_steps: 1000,
            total_steps: 20_000,
            batch_items: 8,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed: 0,
            task_mix: TaskMix::Joint,
            checkpoint_every: 500,
            eval_every: 0,
            eval_items: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.warmup_steps > self.total_steps {
            return bad("warmup_steps exceeds total_steps");
        }
        if !(self.lambda_lm >= 0.0 && self.lambda_lm.is_finite()) {
            return bad("lambda must be finite and non-negative");
        }
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            return bad("lr_peak must be positive");
        }
        if self.batch_items == 0 {
            return bad("batch_items must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return bad("eps must be positive; weight_decay and grad_clip non-negative");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be at least 1");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        format!(
            "lambda_lm={}\nlr_peak={}\nwarmup_steps={}\ntotal_steps={}\nbatch_items={}\nbeta1={}\nbeta2={}\neps={}\nweight_decay={}\ngrad_clip={}\nseed={}\ntask_mix={}\ncheckpoint_every={}\neval_every={}\neval_items={}\n",
            self.lambda_lm,
            self.lr_peak,
            self.warmup_steps,
            self.total_steps,
            self.batch_items,
            self.beta1,
            self.beta2,
            self.eps,
            self.weight_decay,
            self.grad_clip,
            self.seed,
            self.task_mix.as_str(),
            self.checkpoint_every,
            self.eval_every,
            self.eval_items
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let map = parse_kv(text)?;
        fn field<V: FromStr>(map: &std::collections::BTreeMap<String, String>, k: &str) -> Result<V>
        where
            V::Err: std::fmt::Display,
        {
            let raw = map.get(k).ok_or_else(|| Error::Format(format!("train config is missing `{k}`")))?;
            raw.parse().map_err(|e| Error::Format(format!("train config `{k}`: {e}")))
        }
        let cfg = Self {
            lambda_lm: field(&map, "lambda_lm")?,
            lr_peak: field(&map, "lr_peak")?,
            warmup_steps: field(&map, "warmup_steps")?,
            total_steps: field(&map, "total_steps")?,
            batch_items: field(&map, "batch_items")?,
            beta1: field(&map, "beta1")?,
            beta2: field(&map, "beta2")?,
            eps: field(&map, "eps")?,
            weight_decay: field(&map, "weight_decay")?,
            grad_clip: field(&map, "grad_clip")?,
            seed: field(&map, "seed")?,
            task_mix: field(&map, "task_mix")?,
            checkpoint_every: field(&map, "checkpoint_every")?,
            eval_every: field(&map, "eval_every")?,
            eval_items: field(&map, "eval_items")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Linear warmup from 0 to `lr_peak`, then cosine decay to `lr_peak / 100`
/// at `total_steps`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let peak = cfg.lr_peak;
    if step <= cfg.warmup_steps {
        return if cfg.warmup_steps == 0 { peak } else { peak * step as f64 / cfg.warmup_steps as f64 };
    }
    let floor = peak / 100.0;
    let span = (cfg.total_steps - cfg.warmup_steps) as f64;
    let progress = ((step - cfg.warmup_steps) as f64 / span).min(1.0);
    floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// `λ·asr + tts`, with an absent term treated as zero.
pub fn combine_objectives<T: Real>(tape: &mut Tape<T>, asr: Option<Var>, tts: Option<Var>, lambda: f64) -> Result<Var> {
    match (asr, tts) {
        (Some(a), Some(t)) => Ok(tape.combine(&[(a, T::from_f64_lossy(lambda)), (t, T::one())])?),
        (Some(a), None) => Ok(tape.scale(a, T::from_f64_lossy(lambda))),
        (None, Some(t)) => Ok(t),
        (None, None) => Err(Error::Contract("joint loss needs at least one nonempty batch".into())),
    }
}

/// Total objective plus the unweighted per-task means.
#[derive(Clone, Copy, Debug)]
pub struct JointLoss {
    pub total: Var,
    pub asr: Option<f64>,
    pub tts: Option<f64>,
}

fn batch_mean<T: Real>(tape: &mut Tape<T>, terms: &[Var]) -> Result<Option<Var>> {
    if terms.is_empty() {
        return Ok(None);
    }
    let w = T::one() / T::from_usize(terms.len()).unwrap();
    let weighted: Vec<(Var, T)> = terms.iter().map(|&v| (v, w)).collect();
    Ok(Some(tape.combine(&weighted)?))
}

/// `λ·mean(asr_loss) + mean(tts_train_loss)` on one tape. Each generation
/// item draws its span mask, dropout and path sample from `rng` in order.
pub fn joint_loss<T: Real>(
    s: &mut Session<'_, T>,
    asr: &[AsrExample<T>],
    tts: &[TtsExample<T>],
    lambda: f64,
    rng: &mut impl Rng,
) -> Result<JointLoss> {
    let asr_terms = asr.iter().map(|ex| asr_loss(s, ex)).collect::<Result<Vec<_>>>()?;
    let tts_terms = tts.iter().map(|ex| tts_train_loss(s, &ex.frames, &ex.text, rng)).collect::<Result<Vec<_>>>()?;
    let a = batch_mean(&mut s.tape, &asr_terms)?;
    let t = batch_mean(&mut s.tape, &tts_terms)?;
    let total = combine_objectives(&mut s.tape, a, t, lambda)?;
    Ok(JointLoss {
        total,
        asr: a.map(|v| s.tape.scalar(v).as_f64()),
        tts: t.map(|v| s.tape.scalar(v).as_f64()),
    })
}

/// Per-parameter gradients of the joint loss, in store order.
pub fn joint_gradients<T: Real>(
    model: &Model<T>,
    asr: &[AsrExample<T>],
    tts: &[TtsExample<T>],
    lambda: f64,
    rng: &mut impl Rng,
) -> Result<(Vec<Vec<T>>, JointLoss, f64)> {
    let mut s = model.session();
    let loss = joint_loss(&mut s, asr, tts, lambda, rng)?;
    let value = s.tape.scalar(loss.total).as_f64();
    let g = s.tape.backward(loss.total)?;
    Ok((s.param_grads(&g), loss, value))
}

#[cfg(test)]
mod tests;
