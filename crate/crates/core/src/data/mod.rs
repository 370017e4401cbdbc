//! Synthetic paired corpus: token sequences rendered as frame sequences.
//!
//! Each content token owns `r` fixed unit-norm prototype rows. A speaker adds
//! one constant unit-norm offset to every frame, and iid Gaussian noise is
//! added on top. The oracle decoder inverts this exactly up to noise.

mod io;

pub use io::{read_frames, write_frames, CORPUS_FILE, SPEC_FILE};

use std::collections::HashSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::frames::FrameMatrix;
use crate::model::parse_kv;
use crate::numerics::Real;
use crate::tasks::{AsrExample, TtsExample};
use crate::tokens::FIRST_CONTENT_TOKEN;
use crate::{Error, Result};

pub const MIN_LEN: usize = 4;
pub const MAX_LEN: usize = 16;
/// Largest allowed `|cos|` between two speaker offsets.
pub const MAX_OFFSET_COSINE: f64 = 0.5;
const OFFSET_ATTEMPTS: u64 = 10_000;
const DECODE_ITERATIONS: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub vocab_size: usize,
    pub frames_per_token: usize,
    pub frame_dim: usize,
    pub n_speakers: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { vocab_size: 32, frames_per_token: 4, frame_dim: 16, n_speakers: 8, noise_std: 0.05, seed: 0 }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.vocab_size > FIRST_CONTENT_TOKEN as usize, "vocab_size must be at least 3"),
            (self.frames_per_token >= 1, "frames_per_token must be at least 1"),
            (self.frame_dim >= 4, "frame_dim must be at least 4"),
            (self.n_speakers >= 2, "n_speakers must be at least 2"),
            (self.noise_std >= 0.0 && self.noise_std.is_finite(), "noise_std must be finite and non-negative"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config((*msg).into())),
            None => Ok(()),
        }
    }

    /// Speakers `0..seen_speakers()` appear in training; the rest only in test.
    pub fn seen_speakers(&self) -> usize {
        self.n_speakers / 2
    }

    pub fn is_seen(&self, speaker: usize) -> bool {
        speaker < self.seen_speakers()
    }

    pub fn content_tokens(&self) -> std::ops::Range<u32> {
        FIRST_CONTENT_TOKEN..self.vocab_size as u32
    }

    pub fn to_kv(&self) -> String {
        format!(
            "vocab_size={}\nframes_per_token={}\nframe_dim={}\nn_speakers={}\nnoise_std={}\nseed={}\n",
            self.vocab_size, self.frames_per_token, self.frame_dim, self.n_speakers, self.noise_std, self.seed
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let map = parse_kv(text)?;
        fn field<V: std::str::FromStr>(map: &std::collections::BTreeMap<String, String>, k: &str) -> Result<V>
        where
            V::Err: std::fmt::Display,
        {
            let raw = map.get(k).ok_or_else(|| Error::Format(format!("corpus spec is missing `{k}`")))?;
            raw.parse().map_err(|e| Error::Format(format!("corpus spec `{k}`: {e}")))
        }
        let spec = Self {
            vocab_size: field(&map, "vocab_size")?,
            frames_per_token: field(&map, "frames_per_token")?,
            frame_dim: field(&map, "frame_dim")?,
            n_speakers: field(&map, "n_speakers")?,
            noise_std: field(&map, "noise_std")?,
            seed: field(&map, "seed")?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Mixes a seed with a stream label and an index into an independent seed.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    for _ in 0..2 {
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

const STREAM_CODEBOOK: u64 = 1;
const STREAM_OFFSETS: u64 = 2;
const STREAM_TRAIN: u64 = 3;
const STREAM_TEST: u64 = 4;

fn unit_vector(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn max_abs_cosine(vs: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..vs.len() {
        for j in 0..i {
            worst = worst.max(cosine(&vs[i], &vs[j]).abs());
        }
    }
    worst
}

/// Prototype rows and speaker offsets implied by a spec.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    spec: SynthSpec,
    /// `vocab × r × D`, row-major; rows of non-content tokens are unused.
    prototypes: Vec<f64>,
    offsets: Vec<Vec<f64>>,
}

impl Codebook {
    pub fn new(spec: &SynthSpec) -> Result<Self> {
        spec.validate()?;
        let (v, r, d) = (spec.vocab_size, spec.frames_per_token, spec.frame_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, STREAM_CODEBOOK, 0));
        let prototypes = (0..v * r).flat_map(|_| unit_vector(d, &mut rng)).collect();
        // Redraw the whole offset set until every pair is separated enough,
        // keeping the best draw if the dimension makes that unreachable.
        let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
        for attempt in 0..OFFSET_ATTEMPTS {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, STREAM_OFFSETS, attempt));
            let offsets: Vec<Vec<f64>> = (0..spec.n_speakers).map(|_| unit_vector(d, &mut rng)).collect();
            let worst = max_abs_cosine(&offsets);
            if best.as_ref().is_none_or(|(b, _)| worst < *b) {
                best = Some((worst, offsets));
            }
            if worst <= MAX_OFFSET_COSINE {
                break;
            }
        }
        let offsets = best.expect("at least one attempt").1;
        Ok(Self { spec: spec.clone(), prototypes, offsets })
    }

    pub fn spec(&self) -> &SynthSpec {
        &self.spec
    }

    /// Row `k` of token `token`'s prototype block.
    pub fn prototype(&self, token: u32, k: usize) -> &[f64] {
        let (r, d) = (self.spec.frames_per_token, self.spec.frame_dim);
        let start = (token as usize * r + k) * d;
        &self.prototypes[start..start + d]
    }

    pub fn offset(&self, speaker: usize) -> &[f64] {
        &self.offsets[speaker]
    }

    pub fn offsets(&self) -> &[Vec<f64>] {
        &self.offsets
    }

    /// Frames for `tokens` spoken by `speaker`, with noise drawn from `rng`.
    pub fn render(&self, tokens: &[u32], speaker: usize, rng: &mut impl Rng) -> FrameMatrix<f32> {
        let (r, d, sigma) = (self.spec.frames_per_token, self.spec.frame_dim, self.spec.noise_std);
        let offset = self.offset(speaker);
        let mut data = Vec::with_capacity(tokens.len() * r * d);
        for &tok in tokens {
            for k in 0..r {
                for (p, o) in self.prototype(tok, k).iter().zip(offset) {
                    let noise = if sigma > 0.0 { sigma * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
                    data.push((p + o + noise) as f32);
                }
            }
        }
        FrameMatrix::new(tokens.len() * r, d, data).expect("rendered shape")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthExample {
    pub tokens: Vec<u32>,
    pub speaker: usize,
    pub frames: FrameMatrix<f32>,
}

impl SynthExample {
    pub fn asr(&self) -> AsrExample<f32> {
        AsrExample::from_tokens(self.frames.clone(), &self.tokens).expect("content tokens only")
    }

    pub fn tts(&self) -> TtsExample<f32> {
        TtsExample { frames: self.frames.clone(), text: self.tokens.clone() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: SynthSpec,
    pub train: Vec<SynthExample>,
    pub test: Vec<SynthExample>,
}

fn draw_tokens(spec: &SynthSpec, rng: &mut impl Rng) -> Vec<u32> {
    let n = rng.random_range(MIN_LEN..=MAX_LEN);
    (0..n).map(|_| rng.random_range(spec.content_tokens())).collect()
}

/// Test sequences are drawn first; training sequences that collide with any
/// test sequence are redrawn. Training uses seen speakers only, test examples
/// alternate between seen (even index) and unseen (odd index) speakers.
pub fn generate_corpus(spec: &SynthSpec, n_train: usize, n_test: usize) -> Result<Corpus> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::Config("corpus needs at least one train and one test example".into()));
    }
    let book = Codebook::new(spec)?;
    let seen = spec.seen_speakers();
    let unseen = spec.n_speakers - seen;
    let mut test_seqs = HashSet::new();
    let test: Vec<SynthExample> = (0..n_test)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, STREAM_TEST, i as u64));
            let tokens = draw_tokens(spec, &mut rng);
            let speaker = if i % 2 == 0 { rng.random_range(0..seen) } else { seen + rng.random_range(0..unseen) };
            let frames = book.render(&tokens, speaker, &mut rng);
            test_seqs.insert(tokens.clone());
            SynthExample { tokens, speaker, frames }
        })
        .collect();
    let train = (0..n_train)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, STREAM_TRAIN, i as u64));
            let tokens = loop {
                let t = draw_tokens(spec, &mut rng);
                if !test_seqs.contains(&t) {
                    break t;
                }
            };
            let speaker = rng.random_range(0..seen);
            let frames = book.render(&tokens, speaker, &mut rng);
            SynthExample { tokens, speaker, frames }
        })
        .collect();
    Ok(Corpus { spec: spec.clone(), train, test })
}

impl Corpus {
    pub fn save(&self, dir: &Path) -> Result<()> {
        io::save_corpus(self, dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        io::load_corpus(dir)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleDecoding {
    pub tokens: Vec<u32>,
    pub speaker: Vec<f64>,
    /// Trailing frames that did not fill a whole token block and were ignored.
    pub dropped_frames: usize,
}

fn decode_blocks(frames: &[Vec<f64>], book: &Codebook, speaker: &[f64]) -> Vec<u32> {
    let r = book.spec.frames_per_token;
    frames
        .chunks(r)
        .map(|block| {
            let mut best = (f64::INFINITY, FIRST_CONTENT_TOKEN);
            for tok in book.spec.content_tokens() {
                let mut dist = 0.0;
                for (k, row) in block.iter().enumerate() {
                    for ((x, p), s) in row.iter().zip(book.prototype(tok, k)).zip(speaker) {
                        let e = x - s - p;
                        dist += e * e;
                    }
                }
                if dist < best.0 {
                    best = (dist, tok);
                }
            }
            best.1
        })
        .collect()
}

fn mean_residual(frames: &[Vec<f64>], book: &Codebook, tokens: &[u32]) -> Vec<f64> {
    let r = book.spec.frames_per_token;
    let mut acc = vec![0.0; book.spec.frame_dim];
    for (i, row) in frames.iter().enumerate() {
        for ((a, x), p) in acc.iter_mut().zip(row).zip(book.prototype(tokens[i / r], i % r)) {
            *a += x - p;
        }
    }
    acc.iter_mut().for_each(|a| *a /= frames.len() as f64);
    acc
}

/// Nearest-prototype decoding per block of `r` frames, alternated with a
/// speaker estimate (mean residual) until the tokens stop changing. The first
/// pass assumes a zero speaker. Ties go to the lowest token id.
pub fn oracle_decode<T: Real>(frames: &FrameMatrix<T>, book: &Codebook) -> Result<OracleDecoding> {
    let spec = &book.spec;
    if frames.cols() != spec.frame_dim {
        return Err(Error::Dimension(format!("{} frame columns, corpus has {}", frames.cols(), spec.frame_dim)));
    }
    let r = spec.frames_per_token;
    let usable = frames.rows() / r * r;
    let dropped_frames = frames.rows() - usable;
    let rows: Vec<Vec<f64>> = (0..usable).map(|i| frames.row(i).iter().map(|v| v.as_f64()).collect()).collect();
    if rows.is_empty() {
        return Ok(OracleDecoding { tokens: Vec::new(), speaker: vec![0.0; spec.frame_dim], dropped_frames });
    }
    let mut speaker = vec![0.0; spec.frame_dim];
    let mut tokens = decode_blocks(&rows, book, &speaker);
    for _ in 0..DECODE_ITERATIONS {
        speaker = mean_residual(&rows, book, &tokens);
        let next = decode_blocks(&rows, book, &speaker);
        if next == tokens {
            break;
        }
        tokens = next;
    }
    let speaker = mean_residual(&rows, book, &tokens);
    Ok(OracleDecoding { tokens, speaker, dropped_frames })
}

pub fn levenshtein(a: &[u32], b: &[u32]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance normalized by the reference length.
pub fn token_error_rate(hyp: &[u32], reference: &[u32]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Contract("token error rate needs a nonempty reference".into()));
    }
    Ok(levenshtein(hyp, reference) as f64 / reference.len() as f64)
}

/// Cosine between the oracle speaker estimates of two frame sequences.
pub fn speaker_similarity<T: Real>(a: &FrameMatrix<T>, b: &FrameMatrix<T>, book: &Codebook) -> Result<f64> {
    let ea = oracle_decode(a, book)?.speaker;
    let eb = oracle_decode(b, book)?.speaker;
    let zero = |v: &[f64]| v.iter().all(|&x| x == 0.0);
    if zero(&ea) || zero(&eb) {
        return Err(Error::Contract("speaker estimate has zero norm".into()));
    }
    Ok(cosine(&ea, &eb))
}
