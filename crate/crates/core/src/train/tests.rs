use std::sync::atomic::AtomicBool;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{generate_corpus, Corpus, SynthSpec};
use crate::model::{ModelConfig, ParamStore, GENERATION_ONLY_PARAMS, RECOGNITION_ONLY_PARAMS};
use crate::numerics::Tensor;

fn small_model_cfg() -> ModelConfig {
    ModelConfig { vocab_size: 8, frame_dim: 4, max_positions: 128, ..ModelConfig::tiny() }
}

fn small_corpus(seed: u64) -> Corpus {
    let spec = SynthSpec { vocab_size: 8, frames_per_token: 2, frame_dim: 4, n_speakers: 4, noise_std: 0.05, seed };
    generate_corpus(&spec, 12, 6).unwrap()
}

fn small_train_cfg() -> TrainConfig {
    TrainConfig {
        lr_peak: 1e-3,
        warmup_steps: 4,
        total_steps: 16,
        batch_items: 2,
        checkpoint_every: 5,
        seed: 9,
        ..TrainConfig::default()
    }
}

#[test]
fn lr_schedule_examples() {
    let cfg = TrainConfig { lr_peak: 3e-4, warmup_steps: 100, total_steps: 1000, ..TrainConfig::default() };
    assert_eq!(lr_at(0, &cfg), 0.0);
    assert_eq!(lr_at(50, &cfg), 1.5e-4);
    assert_eq!(lr_at(100, &cfg), 3e-4);
    assert!((lr_at(1000, &cfg) - 3e-6).abs() < 1e-18);
    // Halfway through the decay the cosine sits at the midpoint.
    assert!((lr_at(550, &cfg) - (3e-6 + 0.5 * (3e-4 - 3e-6))).abs() < 1e-15);
    let no_warmup = TrainConfig { warmup_steps: 0, ..cfg };
    assert_eq!(lr_at(0, &no_warmup), 3e-4);
}

proptest! {
    #[test]
    fn lr_is_monotone_around_the_peak(warmup in 0u64..50, extra in 1u64..200, peak in 1e-5f64..1e-2) {
        let cfg = TrainConfig { lr_peak: peak, warmup_steps: warmup, total_steps: warmup + extra, ..TrainConfig::default() };
        for s in 0..warmup {
            prop_assert!(lr_at(s, &cfg) <= lr_at(s + 1, &cfg));
        }
        for s in warmup..cfg.total_steps {
            prop_assert!(lr_at(s, &cfg) >= lr_at(s + 1, &cfg));
        }
        prop_assert!(lr_at(cfg.total_steps, &cfg) >= peak / 100.0 * (1.0 - 1e-12));
    }
}

#[test]
fn train_config_kv_roundtrip_and_validation() {
    let cfg = TrainConfig { lambda_lm: 0.05, task_mix: TaskMix::TtsOnly, seed: 123, eval_every: 7, ..TrainConfig::default() };
    assert_eq!(TrainConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
    let bad = TrainConfig { warmup_steps: 10, total_steps: 5, ..TrainConfig::default() };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let bad = TrainConfig { lambda_lm: -0.1, ..TrainConfig::default() };
    assert!(bad.validate().is_err());
    assert!("both".parse::<TaskMix>().is_err());
    assert_eq!("asr_only".parse::<TaskMix>().unwrap(), TaskMix::AsrOnly);
}

#[test]
fn combine_examples() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(vec![], vec![2.0]).unwrap();
    let t = tape.constant(vec![], vec![1.0]).unwrap();
    let v = combine_objectives(&mut tape, Some(a), Some(t), 0.005).unwrap();
    assert!((tape.scalar(v) - 1.01).abs() < 1e-15);
    let v = combine_objectives(&mut tape, Some(a), Some(t), 0.0).unwrap();
    assert_eq!(tape.scalar(v), 1.0);
    assert!(matches!(combine_objectives(&mut tape, None, None, 1.0), Err(Error::Contract(_))));
}

fn tiny_batches(corpus: &Corpus) -> (Vec<AsrExample<f64>>, Vec<TtsExample<f64>>) {
    let asr = corpus.train[..2]
        .iter()
        .map(|e| AsrExample::from_tokens(e.frames.cast(), &e.tokens).unwrap())
        .collect();
    let tts = corpus.train[2..4].iter().map(|e| TtsExample { frames: e.frames.cast(), text: e.tokens.clone() }).collect();
    (asr, tts)
}

#[test]
fn lambda_zero_reports_exactly_the_generation_loss() {
    let corpus = small_corpus(1);
    let model = Model::<f64>::init(small_model_cfg(), 3).unwrap();
    let (asr, tts) = tiny_batches(&corpus);
    let mut s = model.session();
    let joint = joint_loss(&mut s, &asr, &tts, 0.0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(s.tape.scalar(joint.total), joint.tts.unwrap());
    assert!(joint.asr.unwrap() > 0.0);

    let mut s = model.session();
    assert!(matches!(joint_loss(&mut s, &[], &[], 0.5, &mut ChaCha8Rng::seed_from_u64(5)), Err(Error::Contract(_))));
}

#[test]
fn joint_gradient_is_linear_in_lambda() {
    let corpus = small_corpus(2);
    let model = Model::<f64>::init(small_model_cfg(), 4).unwrap();
    let (asr, tts) = tiny_batches(&corpus);
    let rng = || ChaCha8Rng::seed_from_u64(17);
    let (g_asr, ..) = joint_gradients(&model, &asr, &[], 1.0, &mut rng()).unwrap();
    let (g_tts, ..) = joint_gradients(&model, &[], &tts, 1.0, &mut rng()).unwrap();
    for lambda in [0.0, 0.005, 0.05, 1.0, 3.5] {
        let (g, loss, _) = joint_gradients(&model, &asr, &tts, lambda, &mut rng()).unwrap();
        assert!(loss.asr.is_some() && loss.tts.is_some());
        for ((g, a), t) in g.iter().zip(&g_asr).zip(&g_tts) {
            for ((g, a), t) in g.iter().zip(a).zip(t) {
                let expect = lambda * a + t;
                assert!((g - expect).abs() <= 1e-10 * (1.0 + expect.abs()), "λ={lambda}: {g} vs {expect}");
            }
        }
    }
}

#[test]
fn single_task_mixes_leave_disjoint_parameters_untouched() {
    let corpus = small_corpus(3);
    let model = Model::<f64>::init(small_model_cfg(), 5).unwrap();
    let (asr, tts) = tiny_batches(&corpus);
    let grad_of = |g: &[Vec<f64>], name: &str| g[model.store().find(name).unwrap().index()].clone();
    let (g, ..) = joint_gradients(&model, &asr, &[], 0.005, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for name in GENERATION_ONLY_PARAMS {
        assert!(grad_of(&g, name).iter().all(|&x| x == 0.0), "{name}");
    }
    assert!(grad_of(&g, "adapter.w").iter().any(|&x| x != 0.0));
    let (g, ..) = joint_gradients(&model, &[], &tts, 0.005, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for name in RECOGNITION_ONLY_PARAMS {
        assert!(grad_of(&g, name).iter().all(|&x| x == 0.0), "{name}");
    }
    assert!(grad_of(&g, "velocity_head.w").iter().any(|&x| x != 0.0));
}

fn scalar_store(value: f64, decay: bool) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    store.insert("p", Tensor::new(vec![1], vec![value]).unwrap(), decay);
    store
}

#[test]
fn adamw_single_step_closed_forms() {
    let cfg = TrainConfig { weight_decay: 0.0, grad_clip: 0.0, ..TrainConfig::default() };
    let mut store = scalar_store(1.0, true);
    let mut state = AdamState::new(&store);
    optimizer_step(&mut store, &mut state, &mut [vec![1.0]], &cfg, 0.1).unwrap();
    // m̂ = g, v̂ = g², so the first step moves by lr·g/(|g| + eps).
    let p = store.iter().next().unwrap().tensor.data()[0];
    assert!((p - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15, "{p}");
    assert_eq!(state.step, 1);

    let mut store = scalar_store(1.0, true);
    let mut state = AdamState::new(&store);
    optimizer_step(&mut store, &mut state, &mut [vec![0.0]], &cfg, 0.1).unwrap();
    assert_eq!(store.iter().next().unwrap().tensor.data()[0], 1.0);

    let decay = TrainConfig { weight_decay: 0.2, ..cfg.clone() };
    let mut store = scalar_store(2.0, true);
    let mut state = AdamState::new(&store);
    optimizer_step(&mut store, &mut state, &mut [vec![0.0]], &decay, 0.1).unwrap();
    assert!((store.iter().next().unwrap().tensor.data()[0] - 2.0 * (1.0 - 0.1 * 0.2)).abs() < 1e-15);

    let mut store = scalar_store(2.0, false);
    let mut state = AdamState::new(&store);
    optimizer_step(&mut store, &mut state, &mut [vec![0.0]], &decay, 0.1).unwrap();
    assert_eq!(store.iter().next().unwrap().tensor.data()[0], 2.0);
}

#[test]
fn clipping_bounds_the_global_norm() {
    let mut store = ParamStore::<f64>::new();
    store.insert("a", Tensor::new(vec![2], vec![0.0, 0.0]).unwrap(), true);
    store.insert("b", Tensor::new(vec![1], vec![0.0]).unwrap(), false);
    let mut grads = vec![vec![3.0, 0.0], vec![4.0]];
    let stats = clip_and_check(&store, &mut grads, 1.0, 0).unwrap();
    assert_eq!(stats.grad_norm, 5.0);
    assert!(stats.clipped);
    assert!((grads[0][0] - 0.6).abs() < 1e-15 && (grads[1][0] - 0.8).abs() < 1e-15);
    let mut small = vec![vec![0.3, 0.0], vec![0.4]];
    assert!(!clip_and_check(&store, &mut small, 1.0, 0).unwrap().clipped);
    assert_eq!(small[1][0], 0.4);
    assert!(matches!(clip_and_check(&store, &mut [vec![1.0]], 1.0, 0), Err(Error::Dimension(_))));
}

#[test]
fn non_finite_gradient_aborts_with_diagnostics() {
    let mut store = ParamStore::<f64>::new();
    store.insert("a", Tensor::new(vec![1], vec![1.0]).unwrap(), true);
    store.insert("b", Tensor::new(vec![2], vec![1.0, 1.0]).unwrap(), true);
    let mut state = AdamState::new(&store);
    state.step = 41;
    let before = store.clone();
    let err = optimizer_step(&mut store, &mut state, &mut [vec![0.5], vec![1.0, f64::NAN]], &TrainConfig::default(), 0.1)
        .unwrap_err();
    match err {
        Error::NonFinite { step, param, norm } => {
            assert_eq!((step, param.as_str()), (41, "b"));
            assert!(norm.is_nan());
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(store, before);
    assert_eq!(state.step, 41);
}

#[test]
fn checkpoint_roundtrip_is_byte_identical() {
    let model = Model::<f32>::init(small_model_cfg(), 8).unwrap();
    let mut state = TrainState::new(model, 77);
    state.opt.step = 12;
    state.stats = LossStats { asr: 1.25, tts: 0.5 };
    for (i, m) in state.opt.m.iter_mut().flatten().enumerate() {
        *m = (i as f32 * 0.37).sin();
    }
    for (i, v) in state.opt.v.iter_mut().flatten().enumerate() {
        *v = (i as f32 * 0.11).cos().abs();
    }
    let bytes = state.to_bytes();
    assert_eq!(&bytes[..4], b"UVCK");
    assert_eq!(&bytes[4..8], &CHECKPOINT_VERSION.to_le_bytes());
    let back = TrainState::<f32>::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.opt, state.opt);
    assert_eq!(back.model.store().flatten(), state.model.store().flatten());
    assert_eq!(back.model.cfg(), state.model.cfg());
    // Decay flags come from the architecture, not the file.
    for (a, b) in back.model.store().iter().zip(state.model.store().iter()) {
        assert_eq!(a.decay, b.decay);
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bin");
    state.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert!(!dir.path().join("c.bin.tmp").exists());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let state = TrainState::new(Model::<f32>::init(small_model_cfg(), 1).unwrap(), 0);
    let bytes = state.to_bytes();
    for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(TrainState::<f32>::from_bytes(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(TrainState::<f32>::from_bytes(&bad), Err(Error::Format(_))));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(TrainState::<f32>::from_bytes(&extra).is_err());
    assert!(matches!(TrainState::<f64>::from_bytes(&bytes), Err(Error::Format(_))));
}

#[test]
fn failed_checkpoint_write_leaves_no_partial_file() {
    let dir = tempfile::tempdir().unwrap();
    let state = TrainState::new(Model::<f32>::init(small_model_cfg(), 1).unwrap(), 0);
    let target = dir.path().join("missing").join("c.bin");
    assert!(matches!(state.save(&target), Err(Error::Io(_))));
    // A directory in the way makes the final rename fail after the temp file is written.
    let blocked = dir.path().join("blocked");
    std::fs::create_dir_all(blocked.join("inner")).unwrap();
    assert!(state.save(&blocked).is_err());
    assert!(!dir.path().join("blocked.tmp").exists());
}

fn read_log(dir: &std::path::Path) -> String {
    std::fs::read_to_string(dir.join(LOG_FILE)).unwrap()
}

#[test]
fn runs_are_deterministic_and_logged() {
    let corpus = small_corpus(4);
    let cfg = small_train_cfg();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let sa = train_run(&cfg, &corpus, &small_model_cfg(), a.path(), RunOptions::default()).unwrap();
    let sb = train_run(&cfg, &corpus, &small_model_cfg(), b.path(), RunOptions::default()).unwrap();
    assert_eq!(sa, sb);
    assert!(sa.completed && sa.step == 16);
    assert_eq!(read_log(a.path()), read_log(b.path()));
    assert_eq!(std::fs::read(a.path().join(CHECKPOINT_FILE)).unwrap(), std::fs::read(b.path().join(CHECKPOINT_FILE)).unwrap());

    let records = parse_log(&read_log(a.path())).unwrap();
    assert_eq!(records.len(), 16);
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r.event(), Some("step"));
        assert_eq!(r.step(), Some(i as u64 + 1));
        assert_eq!(r.get("task"), Some("joint"));
        let (asr, tts, loss) = (r.f64("asr_loss").unwrap(), r.f64("tts_loss").unwrap(), r.f64("loss").unwrap());
        assert!((loss - (0.005 * asr + tts)).abs() < 1e-5 * loss.abs().max(1.0));
        assert_eq!(r.f64("lr").unwrap(), lr_at(i as u64 + 1, &cfg));
    }

    let other = TrainConfig { seed: 10, ..cfg };
    let c = tempfile::tempdir().unwrap();
    train_run(&other, &corpus, &small_model_cfg(), c.path(), RunOptions::default()).unwrap();
    assert_ne!(read_log(a.path()), read_log(c.path()));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let corpus = small_corpus(5);
    let cfg = small_train_cfg();
    let full = tempfile::tempdir().unwrap();
    train_run(&cfg, &corpus, &small_model_cfg(), full.path(), RunOptions::default()).unwrap();

    let split = tempfile::tempdir().unwrap();
    let s = train_run(&cfg, &corpus, &small_model_cfg(), split.path(), RunOptions { stop_at: Some(6), ..Default::default() })
        .unwrap();
    assert_eq!((s.step, s.completed), (6, false));
    // Stale lines past the checkpoint (as after a crash) are discarded on resume.
    let mut log = read_log(split.path());
    log += "event=step step=7 task=joint lr=0 loss=99\n";
    std::fs::write(split.path().join(LOG_FILE), log).unwrap();
    let s = train_run(&cfg, &corpus, &small_model_cfg(), split.path(), RunOptions { resume: true, ..Default::default() }).unwrap();
    assert!(s.completed);
    assert_eq!(read_log(split.path()), read_log(full.path()));
    assert_eq!(
        std::fs::read(split.path().join(CHECKPOINT_FILE)).unwrap(),
        std::fs::read(full.path().join(CHECKPOINT_FILE)).unwrap()
    );
}

#[test]
fn stop_flag_checkpoints_and_reports_interruption() {
    let corpus = small_corpus(6);
    let cfg = small_train_cfg();
    let dir = tempfile::tempdir().unwrap();
    let stop = AtomicBool::new(true);
    let err = train_run(&cfg, &corpus, &small_model_cfg(), dir.path(), RunOptions { stop: Some(&stop), ..Default::default() })
        .unwrap_err();
    assert!(matches!(err, Error::Interrupted { step: 0 }));
    assert_eq!(TrainState::<f32>::load(&dir.path().join(CHECKPOINT_FILE)).unwrap().opt.step, 0);
    let resumed = train_run(&cfg, &corpus, &small_model_cfg(), dir.path(), RunOptions { resume: true, ..Default::default() });
    assert!(resumed.unwrap().completed);
}

#[test]
fn resume_rejects_changed_configuration() {
    let corpus = small_corpus(7);
    let cfg = small_train_cfg();
    let dir = tempfile::tempdir().unwrap();
    train_run(&cfg, &corpus, &small_model_cfg(), dir.path(), RunOptions { stop_at: Some(2), ..Default::default() }).unwrap();
    let changed = TrainConfig { lambda_lm: 0.5, ..cfg.clone() };
    let opts = RunOptions { resume: true, ..Default::default() };
    assert!(matches!(train_run(&changed, &corpus, &small_model_cfg(), dir.path(), opts), Err(Error::Config(_))));
    let wider = ModelConfig { d_model: 32, ..small_model_cfg() };
    assert!(matches!(train_run(&cfg, &corpus, &wider, dir.path(), opts), Err(Error::Config(_))));
    let empty = tempfile::tempdir().unwrap();
    assert!(train_run(&cfg, &corpus, &small_model_cfg(), empty.path(), opts).is_err());
}

#[test]
fn run_rejects_incompatible_corpus() {
    let corpus = small_corpus(8);
    let dir = tempfile::tempdir().unwrap();
    let wrong = ModelConfig { frame_dim: 6, ..small_model_cfg() };
    assert!(matches!(
        train_run(&small_train_cfg(), &corpus, &wrong, dir.path(), RunOptions::default()),
        Err(Error::Config(_))
    ));
}

#[test]
fn single_task_runs_log_only_their_loss() {
    let corpus = small_corpus(9);
    for mix in [TaskMix::AsrOnly, TaskMix::TtsOnly] {
        let cfg = TrainConfig { task_mix: mix, total_steps: 3, warmup_steps: 1, ..small_train_cfg() };
        let dir = tempfile::tempdir().unwrap();
        train_run(&cfg, &corpus, &small_model_cfg(), dir.path(), RunOptions::default()).unwrap();
        let recs = parse_log(&read_log(dir.path())).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[0].get("asr_loss").is_some(), mix.asr());
        assert_eq!(recs[0].get("tts_loss").is_some(), mix.tts());
        let state = TrainState::<f32>::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
        let untouched = if mix == TaskMix::AsrOnly { GENERATION_ONLY_PARAMS } else { RECOGNITION_ONLY_PARAMS };
        let init = Model::<f32>::init(small_model_cfg(), crate::data::derive_seed(cfg.seed, 20, 0)).unwrap();
        for name in untouched {
            let id = state.model.store().find(name).unwrap();
            let (now, before) = (&state.model.store().get(id), &init.store().get(id));
            // Only decoupled weight decay may move parameters that receive no gradient.
            for (a, b) in now.tensor.data().iter().zip(before.tensor.data()) {
                if now.decay {
                    assert!((a.abs() <= b.abs()) && a.signum() * b.signum() >= 0.0, "{name}");
                } else {
                    assert_eq!(a, b, "{name}");
                }
            }
        }
    }
}

#[test]
fn periodic_eval_is_logged() {
    let corpus = small_corpus(10);
    let cfg = TrainConfig { total_steps: 4, warmup_steps: 1, eval_every: 2, eval_items: 2, ..small_train_cfg() };
    let dir = tempfile::tempdir().unwrap();
    let s = train_run(&cfg, &corpus, &small_model_cfg(), dir.path(), RunOptions::default()).unwrap();
    let report = s.last_eval.unwrap();
    assert_eq!(report.asr.unwrap().count, 2);
    assert_eq!(report.tts_seen.unwrap().count, 2);
    let evals: Vec<_> = parse_log(&read_log(dir.path())).unwrap().into_iter().filter(|r| r.event() == Some("eval")).collect();
    assert_eq!(evals.iter().map(|r| r.step().unwrap()).collect::<Vec<_>>(), vec![2, 4]);
    assert!(evals[0].f64("asr_ter").is_some() && evals[0].f64("unseen_sim").is_some());
}
