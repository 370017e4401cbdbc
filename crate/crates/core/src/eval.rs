//! Test-split evaluation: recognition error rate and voice-cloning quality.

use serde::Serialize;

use crate::data::{derive_seed, oracle_decode, speaker_similarity, Codebook, Corpus, SynthExample};
use crate::flow::SamplerConfig;
use crate::model::Model;
use crate::tasks::{greedy_decode, synthesize, TtsInferenceRequest};
use crate::Result;

const STREAM_EVAL: u64 = 11;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// Recognition items taken from the start of the test split (`None` = all).
    pub asr_items: Option<usize>,
    /// Cloning items per speaker group (seen and unseen).
    pub tts_items_per_group: usize,
    pub sampler: SamplerConfig,
    pub max_decode: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            asr_items: None,
            tts_items_per_group: 100,
            sampler: SamplerConfig::default(),
            max_decode: 2 * crate::data::MAX_LEN,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AsrMetrics {
    pub count: usize,
    /// Total edit distance over total reference length.
    pub token_error_rate: f64,
    /// Items whose decoding hit the length limit.
    pub truncated: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CloningMetrics {
    pub count: usize,
    /// Oracle-decoded output against the requested text, corpus level.
    pub token_error_rate: f64,
    /// Mean cosine between output and reference speaker estimates.
    pub speaker_similarity: f64,
    /// Mean squared error against the held-out ground truth frames.
    pub masked_mse: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub asr: Option<AsrMetrics>,
    pub tts_seen: Option<CloningMetrics>,
    pub tts_unseen: Option<CloningMetrics>,
}

pub fn evaluate_asr(model: &Model<f32>, items: &[SynthExample], max_decode: usize) -> Result<AsrMetrics> {
    let (mut errors, mut total, mut truncated) = (0, 0, 0);
    for ex in items {
        let d = greedy_decode(model, &ex.frames, max_decode)?;
        errors += crate::data::levenshtein(d.content(), &ex.tokens);
        total += ex.tokens.len();
        truncated += usize::from(d.truncated);
    }
    Ok(AsrMetrics {
        count: items.len(),
        token_error_rate: if total == 0 { 0.0 } else { errors as f64 / total as f64 },
        truncated,
    })
}

/// Index of the next test item (cyclically) with the same speaker.
fn reference_for(test: &[SynthExample], i: usize) -> Option<usize> {
    (1..test.len()).map(|k| (i + k) % test.len()).find(|&j| test[j].speaker == test[i].speaker)
}

/// Clones each item's voice from another test utterance of the same speaker
/// and scores the generated frames.
pub fn evaluate_cloning(
    model: &Model<f32>,
    book: &Codebook,
    test: &[SynthExample],
    indices: &[usize],
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<CloningMetrics> {
    let mut m = CloningMetrics::default();
    let (mut errors, mut total) = (0, 0);
    for &i in indices {
        let Some(j) = reference_for(test, i) else { continue };
        let (item, reference) = (&test[i], &test[j]);
        let req = TtsInferenceRequest {
            ref_frames: reference.frames.clone(),
            ref_text: reference.tokens.clone(),
            gen_text: item.tokens.clone(),
            sampler: SamplerConfig { seed: derive_seed(seed, STREAM_EVAL, i as u64), ..sampler.clone() },
        };
        let out = synthesize(model, &req)?;
        let decoded = oracle_decode(&out, book)?;
        errors += crate::data::levenshtein(&decoded.tokens, &item.tokens);
        total += item.tokens.len();
        // A zero speaker estimate cannot be scored; count it as dissimilar.
        m.speaker_similarity += speaker_similarity(&out, &reference.frames, book).unwrap_or(0.0);
        let n = out.rows().min(item.frames.rows()) * out.cols();
        let mse = out.data()[..n]
            .iter()
            .zip(&item.frames.data()[..n])
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / n as f64;
        m.masked_mse += mse;
        m.count += 1;
    }
    if m.count > 0 {
        m.speaker_similarity /= m.count as f64;
        m.masked_mse /= m.count as f64;
        m.token_error_rate = errors as f64 / total as f64;
    }
    Ok(m)
}

/// Test indices of the first `per_group` seen-speaker and unseen-speaker items.
pub fn cloning_indices(corpus: &Corpus, per_group: usize) -> (Vec<usize>, Vec<usize>) {
    let pick = |seen: bool| -> Vec<usize> {
        (0..corpus.test.len()).filter(|&i| corpus.spec.is_seen(corpus.test[i].speaker) == seen).take(per_group).collect()
    };
    (pick(true), pick(false))
}

pub fn evaluate(model: &Model<f32>, corpus: &Corpus, cfg: &EvalConfig, asr: bool, tts: bool) -> Result<EvalReport> {
    let book = Codebook::new(&corpus.spec)?;
    let mut report = EvalReport::default();
    if asr {
        let n = cfg.asr_items.unwrap_or(corpus.test.len()).min(corpus.test.len());
        report.asr = Some(evaluate_asr(model, &corpus.test[..n], cfg.max_decode)?);
    }
    if tts && cfg.tts_items_per_group > 0 {
        let (seen, unseen) = cloning_indices(corpus, cfg.tts_items_per_group);
        report.tts_seen = Some(evaluate_cloning(model, &book, &corpus.test, &seen, &cfg.sampler, cfg.seed)?);
        report.tts_unseen = Some(evaluate_cloning(model, &book, &corpus.test, &unseen, &cfg.sampler, cfg.seed)?);
    }
    Ok(report)
}
