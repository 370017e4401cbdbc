use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use flowlm::data::{
    generate_corpus, oracle_decode, read_frames, write_frames, Codebook, Corpus, SynthSpec, CORPUS_FILE, SPEC_FILE,
};
use flowlm::eval::{evaluate, EvalConfig, EvalReport};
use flowlm::flow::SamplerConfig;
use flowlm::model::{parse_kv, Model, ModelConfig};
use flowlm::tasks::{asr_pack_len, synthesize, tts_pack_len, TtsInferenceRequest};
use flowlm::train::{
    parse_log, train_run, RunOptions, TaskMix, TrainConfig, TrainState, CHECKPOINT_FILE, LOG_FILE, TRAIN_CONFIG_FILE,
};
use serde::Serialize;

use crate::manifest::{content_hash, file_hash, is_nonempty_dir, DirLock, RunManifest};
use crate::{EvalArgs, EvalTask, GenDataArgs, SamplerArgs, SynthArgs, TrainArgs, UsageError};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Creates `dir` for a fresh output, refusing to reuse a non-empty one
/// unless `force` is set.
fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if is_nonempty_dir(dir)? && !force {
        return Err(usage(format!("{} exists and is not empty (pass --force to overwrite)", dir.display())));
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn prefixed(prefix: &str, kv: &str) -> Result<BTreeMap<String, String>> {
    Ok(parse_kv(kv)?.into_iter().map(|(k, v)| (format!("{prefix}.{k}"), v)).collect())
}

fn sampler_config(a: &SamplerArgs, seed: u64) -> SamplerConfig {
    SamplerConfig { nfe: a.nfe, cfg_weight: a.cfg_weight, scheme: a.scheme, seed }
}

fn sampler_kv(s: &SamplerConfig) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("sampler.nfe".into(), s.nfe.to_string()),
        ("sampler.cfg_weight".into(), s.cfg_weight.to_string()),
        ("sampler.scheme".into(), s.scheme.as_str().into()),
        ("sampler.seed".into(), s.seed.to_string()),
    ])
}

fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(CHECKPOINT_FILE)
    } else {
        p.to_path_buf()
    }
}

fn load_checkpoint(p: &Path) -> Result<(PathBuf, TrainState)> {
    let path = checkpoint_path(p);
    let state = TrainState::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok((path, state))
}

fn load_corpus(dir: &Path) -> Result<Corpus> {
    Corpus::load(dir).with_context(|| format!("loading corpus {}", dir.display()))
}

fn check_model_fits_corpus(model: &ModelConfig, spec: &SynthSpec) -> Result<()> {
    if model.frame_dim != spec.frame_dim {
        return Err(flowlm::Error::Config(format!(
            "checkpoint frame_dim {} does not match corpus frame_dim {}",
            model.frame_dim, spec.frame_dim
        ))
        .into());
    }
    if model.vocab_size < spec.vocab_size {
        return Err(flowlm::Error::Config(format!(
            "checkpoint vocab_size {} is smaller than corpus vocab_size {}",
            model.vocab_size, spec.vocab_size
        ))
        .into());
    }
    Ok(())
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let spec = SynthSpec {
        vocab_size: a.vocab,
        frames_per_token: a.frames_per_token,
        frame_dim: a.frame_dim,
        n_speakers: a.speakers,
        noise_std: a.sigma,
        seed: a.seed,
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    if a.train == 0 || a.test == 0 {
        return Err(usage("--train and --test must be at least 1"));
    }
    prepare_out(&a.out, a.force)?;
    let _lock = DirLock::acquire(&a.out)?;
    let mut config = prefixed("data", &spec.to_kv())?;
    config.insert("data.n_train".into(), a.train.to_string());
    config.insert("data.n_test".into(), a.test.to_string());
    let mut manifest = RunManifest::new("gen-data", config);
    manifest.save(&a.out)?;

    let corpus = generate_corpus(&spec, a.train, a.test)?;
    corpus.save(&a.out)?;
    println!(
        "corpus: V={} D={} r={} S={} ({} seen) sigma={} seed={} train={} test={}",
        spec.vocab_size,
        spec.frame_dim,
        spec.frames_per_token,
        spec.n_speakers,
        spec.seen_speakers(),
        spec.noise_std,
        spec.seed,
        corpus.train.len(),
        corpus.test.len()
    );

    // Invertibility self-check on the test split and up to 1000 training items.
    let book = Codebook::new(&spec)?;
    let (mut tok_ok, mut tok_total, mut seq_ok, mut seqs) = (0usize, 0usize, 0usize, 0usize);
    for ex in corpus.test.iter().chain(corpus.train.iter().take(1000)) {
        let d = oracle_decode(&ex.frames, &book)?;
        tok_ok += d.tokens.iter().zip(&ex.tokens).filter(|(x, y)| x == y).count();
        tok_total += ex.tokens.len();
        seq_ok += usize::from(d.tokens == ex.tokens);
        seqs += 1;
    }
    let tok_acc = tok_ok as f64 / tok_total as f64;
    let seq_acc = seq_ok as f64 / seqs as f64;
    println!(
        "oracle self-check: token accuracy {:.2}% ({tok_total} tokens), sequence accuracy {:.2}% ({seqs} sequences)",
        100.0 * tok_acc,
        100.0 * seq_acc
    );

    manifest.outputs.insert("spec_sha256".into(), file_hash(&a.out.join(SPEC_FILE))?);
    manifest.outputs.insert("corpus_sha256".into(), file_hash(&a.out.join(CORPUS_FILE))?);
    manifest.outputs.insert("self_check_token_accuracy".into(), tok_acc.to_string());
    manifest.outputs.insert("self_check_sequence_accuracy".into(), seq_acc.to_string());
    manifest.finish(&a.out, "complete")?;
    println!("corpus hash {}", manifest.outputs["corpus_sha256"]);
    Ok(())
}

fn resolve_train(a: &TrainArgs, saved: Option<(TrainConfig, ModelConfig)>, spec: &SynthSpec) -> Result<(TrainConfig, ModelConfig)> {
    let fresh = saved.is_none();
    let (mut t, mut m) = saved.unwrap_or_else(|| {
        let m = ModelConfig { vocab_size: spec.vocab_size, frame_dim: spec.frame_dim, ..ModelConfig::default() };
        (TrainConfig::default(), m)
    });
    macro_rules! set {
        ($dst:expr, $src:expr) => {
            if let Some(v) = $src {
                $dst = v;
            }
        };
    }
    set!(t.seed, a.seed);
    set!(t.task_mix, a.task_mix);
    set!(t.lambda_lm, a.lambda);
    set!(t.total_steps, a.steps);
    if fresh && a.warmup.is_none() {
        t.warmup_steps = t.total_steps / 20;
    }
    set!(t.warmup_steps, a.warmup);
    set!(t.lr_peak, a.lr);
    set!(t.batch_items, a.batch);
    set!(t.weight_decay, a.weight_decay);
    set!(t.grad_clip, a.grad_clip);
    set!(t.checkpoint_every, a.checkpoint_every);
    set!(t.eval_every, a.eval_every);
    set!(t.eval_items, a.eval_items);
    set!(m.tts_mask, a.tts_mask);
    set!(m.d_model, a.d_model);
    set!(m.n_layers, a.layers);
    set!(m.n_heads, a.heads);
    set!(m.max_positions, a.max_positions);
    set!(m.adapter_pool, a.adapter_pool);
    t.validate().map_err(|e| usage(e.to_string()))?;
    m.validate().map_err(|e| usage(e.to_string()))?;
    Ok((t, m))
}

/// Longest packed sequence either task can build from `corpus`.
fn longest_pack(corpus: &Corpus, m: &ModelConfig) -> usize {
    corpus
        .train
        .iter()
        .map(|ex| {
            let asr = asr_pack_len(ex.frames.rows(), m.adapter_pool, ex.tokens.len() + 1);
            asr.max(tts_pack_len(ex.tokens.len(), ex.frames.rows()))
        })
        .max()
        .unwrap_or(0)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    if a.resume && a.force {
        return Err(usage("--resume and --force are mutually exclusive"));
    }
    let mix = a.task_mix.unwrap_or_default();
    if mix == TaskMix::AsrOnly && a.tts_mask.is_some() {
        return Err(usage("--tts-mask has no effect with --task-mix asr_only"));
    }
    if mix == TaskMix::TtsOnly && a.lambda.is_some() {
        return Err(usage("--lambda has no effect with --task-mix tts_only"));
    }
    let ckpt = a.out.join(CHECKPOINT_FILE);
    if a.resume {
        if !ckpt.exists() {
            return Err(usage(format!("nothing to resume: {} does not exist", ckpt.display())));
        }
    } else {
        prepare_out(&a.out, a.force)?;
    }
    let _lock = DirLock::acquire(&a.out)?;
    let corpus = load_corpus(&a.corpus)?;

    let saved = if a.resume {
        let text = fs::read_to_string(a.out.join(TRAIN_CONFIG_FILE)).context("reading saved training config")?;
        let state = TrainState::<f32>::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
        Some((TrainConfig::from_kv(&text)?, state.model.cfg().clone()))
    } else {
        None
    };
    let (tcfg, mcfg) = resolve_train(a, saved, &corpus.spec)?;
    check_model_fits_corpus(&mcfg, &corpus.spec)?;
    let need = longest_pack(&corpus, &mcfg);
    if need > mcfg.max_positions {
        return Err(flowlm::Error::Capacity { len: need, max: mcfg.max_positions }).context("corpus does not fit the model");
    }

    let mut manifest = if a.resume {
        let mut m = RunManifest::load(&a.out)?;
        m.resumed.push(std::env::args().collect());
        m.status = "running".into();
        m.finished_unix = None;
        m
    } else {
        let mut config = prefixed("train", &tcfg.to_kv())?;
        config.extend(prefixed("model", &mcfg.to_kv())?);
        let mut m = RunManifest::new("train", config);
        m.inputs.insert("corpus_spec_sha256".into(), file_hash(&a.corpus.join(SPEC_FILE))?);
        m.inputs.insert("corpus_sha256".into(), file_hash(&a.corpus.join(CORPUS_FILE))?);
        m
    };
    manifest.save(&a.out)?;

    let stop = Arc::new(AtomicBool::new(false));
    {
        let stop = Arc::clone(&stop);
        ctrlc::set_handler(move || stop.store(true, Ordering::SeqCst)).context("installing ctrl-c handler")?;
    }
    let params = Model::<f32>::init(mcfg.clone(), 0)?.param_count();
    println!(
        "training {params} parameters for {} steps (task_mix={} lambda={} tts_mask={} batch={} lr_peak={})",
        tcfg.total_steps,
        tcfg.task_mix.as_str(),
        tcfg.lambda_lm,
        mcfg.tts_mask.as_str(),
        tcfg.batch_items,
        tcfg.lr_peak
    );
    let opts = RunOptions { resume: a.resume, stop: Some(&stop), stop_at: None };
    match train_run(&tcfg, &corpus, &mcfg, &a.out, opts) {
        Ok(summary) => {
            manifest.outputs.insert("checkpoint_sha256".into(), file_hash(&ckpt)?);
            manifest.outputs.insert("metrics_log_sha256".into(), file_hash(&a.out.join(LOG_FILE))?);
            manifest.finish(&a.out, "complete")?;
            println!(
                "done at step {}: running asr loss {:.4}, tts loss {:.4}",
                summary.step, summary.stats.asr, summary.stats.tts
            );
            Ok(())
        }
        Err(flowlm::Error::Interrupted { step }) => {
            manifest.finish(&a.out, "interrupted")?;
            eprintln!("checkpoint saved at step {step}; continue with --resume");
            Err(flowlm::Error::Interrupted { step }.into())
        }
        Err(e) => {
            manifest.finish(&a.out, "failed")?;
            Err(e.into())
        }
    }
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    checkpoint: String,
    checkpoint_sha256: String,
    checkpoint_step: u64,
    seed: u64,
    #[serde(flatten)]
    report: &'a EvalReport,
}

fn write_curves(run_dir: &Path, out: &Path) -> Result<()> {
    let log = run_dir.join(LOG_FILE);
    let text = fs::read_to_string(&log).with_context(|| format!("reading {}", log.display()))?;
    let records = parse_log(&text)?;
    let write = |name: &str, event: &str, cols: &[&str]| -> Result<()> {
        let mut csv = cols.join(",") + "\n";
        for r in records.iter().filter(|r| r.event() == Some(event)) {
            let row: Vec<&str> = cols.iter().map(|c| r.get(c).unwrap_or("")).collect();
            csv += &row.join(",");
            csv.push('\n');
        }
        Ok(fs::write(out.join(name), csv)?)
    };
    write("train_curve.csv", "step", &["step", "lr", "loss", "asr_loss", "tts_loss", "grad_norm"])?;
    write(
        "eval_curve.csv",
        "eval",
        &["step", "asr_ter", "seen_ter", "seen_sim", "seen_mse", "unseen_ter", "unseen_sim", "unseen_mse"],
    )
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    if a.curves && a.out.is_none() {
        return Err(usage("--curves needs --out"));
    }
    let sampler = sampler_config(&a.sampler, a.seed);
    sampler.validate().map_err(|e| usage(e.to_string()))?;
    let cfg = EvalConfig {
        asr_items: a.asr_items,
        tts_items_per_group: a.tts_items,
        sampler,
        max_decode: a.max_decode,
        seed: a.seed,
    };
    let lock = match &a.out {
        Some(dir) => {
            prepare_out(dir, a.force)?;
            Some(DirLock::acquire(dir)?)
        }
        None => None,
    };
    let path = checkpoint_path(&a.checkpoint);
    let ckpt_hash = file_hash(&path)?;
    let mut manifest = None;
    if let Some(dir) = &a.out {
        let mut config = sampler_kv(&cfg.sampler);
        config.insert("eval.task".into(), format!("{:?}", a.task).to_lowercase());
        config.insert("eval.asr_items".into(), a.asr_items.map_or("all".into(), |n| n.to_string()));
        config.insert("eval.tts_items".into(), a.tts_items.to_string());
        config.insert("eval.max_decode".into(), a.max_decode.to_string());
        config.insert("eval.seed".into(), a.seed.to_string());
        let mut m = RunManifest::new("eval", config);
        m.inputs.insert("checkpoint_sha256".into(), ckpt_hash.clone());
        m.inputs.insert("corpus_spec_sha256".into(), file_hash(&a.corpus.join(SPEC_FILE))?);
        m.save(dir)?;
        manifest = Some(m);
    }

    let (_, state) = load_checkpoint(&path)?;
    let corpus = load_corpus(&a.corpus)?;
    check_model_fits_corpus(state.model.cfg(), &corpus.spec)?;
    let (asr, tts) = (a.task != EvalTask::Tts, a.task != EvalTask::Asr);
    let report = evaluate(&state.model, &corpus, &cfg, asr, tts)?;
    let out = EvalOutput {
        checkpoint: path.display().to_string(),
        checkpoint_sha256: ckpt_hash,
        checkpoint_step: state.opt.step,
        seed: a.seed,
        report: &report,
    };
    let json = serde_json::to_string_pretty(&out)?;
    println!("{json}");
    if let (Some(dir), Some(mut m)) = (&a.out, manifest) {
        fs::write(dir.join("report.json"), format!("{json}\n"))?;
        if a.curves {
            let run_dir = path.parent().unwrap_or(Path::new("."));
            write_curves(run_dir, dir)?;
        }
        m.outputs.insert("report_sha256".into(), content_hash(format!("{json}\n").as_bytes()));
        m.finish(dir, "complete")?;
    }
    drop(lock);
    Ok(())
}

pub const SYNTH_FILE: &str = "synth.frames";

pub fn synth(a: &SynthArgs) -> Result<()> {
    let sampler = sampler_config(&a.sampler, a.seed);
    sampler.validate().map_err(|e| usage(e.to_string()))?;
    if a.ref_tokens.is_empty() || a.gen_tokens.is_empty() {
        bail!(UsageError("--ref-tokens and --gen-tokens must be nonempty".into()));
    }
    prepare_out(&a.out, a.force)?;
    let _lock = DirLock::acquire(&a.out)?;
    let path = checkpoint_path(&a.checkpoint);
    let mut config = sampler_kv(&sampler);
    let join = |t: &[u32]| t.iter().map(u32::to_string).collect::<Vec<_>>().join(",");
    config.insert("synth.ref_tokens".into(), join(&a.ref_tokens));
    config.insert("synth.gen_tokens".into(), join(&a.gen_tokens));
    let mut manifest = RunManifest::new("synth", config);
    manifest.inputs.insert("checkpoint_sha256".into(), file_hash(&path)?);
    manifest.inputs.insert("ref_frames_sha256".into(), file_hash(&a.ref_frames)?);
    manifest.save(&a.out)?;

    let (_, state) = load_checkpoint(&path)?;
    let ref_frames = read_frames(&a.ref_frames).with_context(|| format!("reading {}", a.ref_frames.display()))?;
    let req = TtsInferenceRequest { ref_frames, ref_text: a.ref_tokens.clone(), gen_text: a.gen_tokens.clone(), sampler };
    let out = synthesize(&state.model, &req)?;
    let file = a.out.join(SYNTH_FILE);
    write_frames(&file, &out)?;
    manifest.outputs.insert("synth_sha256".into(), file_hash(&file)?);
    manifest.finish(&a.out, "complete")?;
    println!(
        "wrote {} frames x {} dims to {} (reference {} frames, {} -> {} tokens)",
        out.rows(),
        out.cols(),
        file.display(),
        req.ref_frames.rows(),
        a.ref_tokens.len(),
        a.gen_tokens.len()
    );
    Ok(())
}
