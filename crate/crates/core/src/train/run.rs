use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{write_atomic, LossStats, TrainState};
use super::{joint_gradients, lr_at, optimizer_step, TrainConfig};
use crate::data::{derive_seed, Corpus};
use crate::eval::{evaluate, EvalConfig, EvalReport};
use crate::model::{Model, ModelConfig};
use crate::tasks::{AsrExample, TtsExample};
use crate::{Error, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "metrics.log";
pub const TRAIN_CONFIG_FILE: &str = "train.txt";

const STREAM_INIT: u64 = 20;
const STREAM_STEP: u64 = 21;

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions<'a> {
    /// Continue from the run directory's checkpoint.
    pub resume: bool,
    /// Polled before every step; when set the run checkpoints and returns
    /// [`Error::Interrupted`].
    pub stop: Option<&'a AtomicBool>,
    /// Checkpoint and return normally once this many steps are done.
    pub stop_at: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub step: u64,
    /// `total_steps` was reached.
    pub completed: bool,
    pub stats: LossStats,
    pub last_eval: Option<EvalReport>,
}

/// One parsed metrics-log line.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub fields: BTreeMap<String, String>,
}

impl LogRecord {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.get(key).map(String::as_str)
    }

    pub fn f64(&self, key: &str) -> Option<f64> {
        self.get(key)?.parse().ok()
    }

    pub fn step(&self) -> Option<u64> {
        self.get("step")?.parse().ok()
    }

    pub fn event(&self) -> Option<&str> {
        self.get("event")
    }
}

pub fn parse_log(text: &str) -> Result<Vec<LogRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let fields = line
                .split_whitespace()
                .map(|kv| {
                    kv.split_once('=')
                        .map(|(k, v)| (k.to_string(), v.to_string()))
                        .ok_or_else(|| Error::Format(format!("log line {}: `{kv}` is not key=value", i + 1)))
                })
                .collect::<Result<_>>()?;
            Ok(LogRecord { fields })
        })
        .collect()
}

fn eval_fields(report: &EvalReport) -> String {
    let mut s = String::new();
    if let Some(a) = &report.asr {
        s += &format!(" asr_ter={} asr_truncated={}", a.token_error_rate, a.truncated);
    }
    for (tag, m) in [("seen", &report.tts_seen), ("unseen", &report.tts_unseen)] {
        if let Some(m) = m {
            s += &format!(
                " {tag}_ter={} {tag}_sim={} {tag}_mse={} {tag}_count={}",
                m.token_error_rate, m.speaker_similarity, m.masked_mse, m.count
            );
        }
    }
    s
}

fn check_compatible(corpus: &Corpus, model_cfg: &ModelConfig) -> Result<()> {
    if corpus.spec.frame_dim != model_cfg.frame_dim {
        return Err(Error::Config(format!(
            "corpus frame_dim {} does not match model frame_dim {}",
            corpus.spec.frame_dim, model_cfg.frame_dim
        )));
    }
    if corpus.spec.vocab_size > model_cfg.vocab_size {
        return Err(Error::Config(format!(
            "corpus vocab_size {} exceeds model vocab_size {}",
            corpus.spec.vocab_size, model_cfg.vocab_size
        )));
    }
    if corpus.train.is_empty() {
        return Err(Error::Config("corpus has no training examples".into()));
    }
    Ok(())
}

/// Keeps only log lines at or before `step`, so a resumed run appends exactly
/// what the uninterrupted run would have written.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(e.into()),
    };
    let mut kept = String::new();
    for (line, rec) in text.lines().filter(|l| !l.trim().is_empty()).zip(parse_log(&text)?) {
        if rec.step().is_some_and(|s| s <= step) {
            kept += line;
            kept.push('\n');
        }
    }
    write_atomic(path, kept.as_bytes())
}

struct Run<'a> {
    cfg: &'a TrainConfig,
    corpus: &'a Corpus,
    ckpt_path: PathBuf,
    log: BufWriter<fs::File>,
}

impl Run<'_> {
    fn checkpoint(&mut self, state: &TrainState) -> Result<()> {
        self.log.flush()?;
        state.save(&self.ckpt_path)
    }

    fn eval(&mut self, state: &TrainState) -> Result<EvalReport> {
        let ecfg = EvalConfig {
            asr_items: Some(self.cfg.eval_items),
            tts_items_per_group: self.cfg.eval_items,
            seed: self.cfg.seed,
            ..EvalConfig::default()
        };
        let report = evaluate(&state.model, self.corpus, &ecfg, self.cfg.task_mix.asr(), self.cfg.task_mix.tts())?;
        writeln!(self.log, "event=eval step={}{}", state.opt.step, eval_fields(&report))?;
        Ok(report)
    }

    fn step(&mut self, state: &mut TrainState) -> Result<()> {
        let step = state.opt.step;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(state.seed, STREAM_STEP, step));
        let n = self.corpus.train.len();
        let mix = self.cfg.task_mix;
        let asr: Vec<AsrExample> = if mix.asr() {
            (0..self.cfg.batch_items).map(|_| self.corpus.train[rng.random_range(0..n)].asr()).collect()
        } else {
            Vec::new()
        };
        let tts: Vec<TtsExample> = if mix.tts() {
            (0..self.cfg.batch_items).map(|_| self.corpus.train[rng.random_range(0..n)].tts()).collect()
        } else {
            Vec::new()
        };
        let (mut grads, loss, total) = joint_gradients(&state.model, &asr, &tts, self.cfg.lambda_lm, &mut rng)?;
        let lr = lr_at(step + 1, self.cfg);
        let stats = optimizer_step(state.model.store_mut(), &mut state.opt, &mut grads, self.cfg, lr)?;
        state.stats.update(loss.asr, loss.tts, step == 0);

        let mut line = format!("event=step step={} task={} lr={lr} loss={total}", step + 1, mix.as_str());
        if let Some(a) = loss.asr {
            line += &format!(" asr_loss={a}");
        }
        if let Some(t) = loss.tts {
            line += &format!(" tts_loss={t}");
        }
        line += &format!(" grad_norm={}", stats.grad_norm);
        writeln!(self.log, "{line}")?;
        Ok(())
    }
}

/// Trains from scratch (or from the run directory's checkpoint with
/// `opts.resume`) until `total_steps`, writing `metrics.log`, periodic
/// evaluations and checkpoints into `run_dir`. Identical inputs give
/// identical logs, and resuming reproduces the uninterrupted run exactly.
pub fn train_run(
    cfg: &TrainConfig,
    corpus: &Corpus,
    model_cfg: &ModelConfig,
    run_dir: &Path,
    opts: RunOptions<'_>,
) -> Result<RunSummary> {
    cfg.validate()?;
    model_cfg.validate()?;
    check_compatible(corpus, model_cfg)?;
    fs::create_dir_all(run_dir)?;
    let ckpt_path = run_dir.join(CHECKPOINT_FILE);
    let log_path = run_dir.join(LOG_FILE);
    let cfg_path = run_dir.join(TRAIN_CONFIG_FILE);

    let mut state = if opts.resume {
        let saved = fs::read_to_string(&cfg_path)
            .map_err(|e| Error::Config(format!("cannot resume: {} unreadable ({e})", cfg_path.display())))?;
        if TrainConfig::from_kv(&saved)? != *cfg {
            return Err(Error::Config("cannot resume: training config differs from the saved run".into()));
        }
        let state = TrainState::load(&ckpt_path)?;
        if state.model.cfg() != model_cfg {
            return Err(Error::Config("cannot resume: model config differs from the checkpoint".into()));
        }
        truncate_log(&log_path, state.opt.step)?;
        state
    } else {
        write_atomic(&cfg_path, cfg.to_kv().as_bytes())?;
        write_atomic(&log_path, b"")?;
        let model = Model::init(model_cfg.clone(), derive_seed(cfg.seed, STREAM_INIT, 0))?;
        TrainState::new(model, cfg.seed)
    };

    let log = BufWriter::new(fs::OpenOptions::new().append(true).open(&log_path)?);
    let mut run = Run { cfg, corpus, ckpt_path, log };
    let mut last_eval = None;
    while state.opt.step < cfg.total_steps {
        if opts.stop.is_some_and(|f| f.load(Ordering::SeqCst)) {
            run.checkpoint(&state)?;
            return Err(Error::Interrupted { step: state.opt.step });
        }
        if opts.stop_at.is_some_and(|k| state.opt.step >= k) {
            run.checkpoint(&state)?;
            return Ok(RunSummary { step: state.opt.step, completed: false, stats: state.stats, last_eval });
        }
        run.step(&mut state)?;
        let step = state.opt.step;
        if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
            last_eval = Some(run.eval(&state)?);
        }
        if step % cfg.checkpoint_every == 0 || step == cfg.total_steps {
            run.checkpoint(&state)?;
        }
    }
    run.checkpoint(&state)?;
    Ok(RunSummary { step: state.opt.step, completed: true, stats: state.stats, last_eval })
}
