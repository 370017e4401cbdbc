use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Corpus, SynthExample, SynthSpec};
use crate::frames::FrameMatrix;
use crate::{Error, Result};

pub const SPEC_FILE: &str = "spec.txt";
pub const CORPUS_FILE: &str = "corpus.bin";
const MAGIC: &[u8; 4] = b"SYNC";
const VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in 32 bits")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("file ends early".into())
    } else {
        Error::Io(e)
    }
}

/// `rows: u32, cols: u32`, then `rows·cols` little-endian `f32`.
pub fn encode_frames(w: &mut impl Write, m: &FrameMatrix<f32>) -> Result<()> {
    put_u32(w, m.rows())?;
    put_u32(w, m.cols())?;
    for v in m.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn decode_frames(r: &mut impl Read) -> Result<FrameMatrix<f32>> {
    let rows = get_u32(r)?;
    let cols = get_u32(r)?;
    let n = rows.checked_mul(cols).ok_or_else(|| Error::Format("frame matrix too large".into()))?;
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes).map_err(truncated)?;
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    FrameMatrix::new(rows, cols, data)
}

pub fn write_frames(path: &Path, m: &FrameMatrix<f32>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    encode_frames(&mut w, m)?;
    w.flush()?;
    Ok(())
}

pub fn read_frames(path: &Path) -> Result<FrameMatrix<f32>> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let m = decode_frames(&mut r)?;
    if r.read(&mut [0u8])? != 0 {
        return Err(Error::Format(format!("{} has trailing bytes", path.display())));
    }
    Ok(m)
}

fn encode_example(w: &mut impl Write, ex: &SynthExample) -> Result<()> {
    put_u32(w, ex.tokens.len())?;
    for &t in &ex.tokens {
        put_u32(w, t as usize)?;
    }
    put_u32(w, ex.speaker)?;
    encode_frames(w, &ex.frames)
}

fn decode_example(r: &mut impl Read, spec: &SynthSpec) -> Result<SynthExample> {
    let n = get_u32(r)?;
    let tokens = (0..n).map(|_| get_u32(r).map(|t| t as u32)).collect::<Result<Vec<_>>>()?;
    if let Some(&t) = tokens.iter().find(|&&t| !spec.content_tokens().contains(&t)) {
        return Err(Error::Format(format!("token {t} is not a content token of this corpus")));
    }
    let speaker = get_u32(r)?;
    if speaker >= spec.n_speakers {
        return Err(Error::Format(format!("speaker {speaker} outside {} speakers", spec.n_speakers)));
    }
    let frames = decode_frames(r)?;
    if frames.cols() != spec.frame_dim || frames.rows() != n * spec.frames_per_token {
        return Err(Error::Format(format!(
            "{}x{} frames for {n} tokens (expected {}x{})",
            frames.rows(),
            frames.cols(),
            n * spec.frames_per_token,
            spec.frame_dim
        )));
    }
    Ok(SynthExample { tokens, speaker, frames })
}

pub(super) fn save_corpus(c: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(SPEC_FILE), c.spec.to_kv())?;
    let tmp = dir.join(format!("{CORPUS_FILE}.tmp"));
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        w.write_all(MAGIC)?;
        put_u32(&mut w, VERSION as usize)?;
        put_u32(&mut w, c.train.len())?;
        put_u32(&mut w, c.test.len())?;
        for ex in c.train.iter().chain(&c.test) {
            encode_example(&mut w, ex)?;
        }
        w.flush()?;
    }
    fs::rename(&tmp, dir.join(CORPUS_FILE))?;
    Ok(())
}

pub(super) fn load_corpus(dir: &Path) -> Result<Corpus> {
    let spec = SynthSpec::from_kv(&fs::read_to_string(dir.join(SPEC_FILE))?)?;
    let mut r = BufReader::new(fs::File::open(dir.join(CORPUS_FILE))?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a corpus file".into()));
    }
    let version = get_u32(&mut r)?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported corpus version {version}")));
    }
    let n_train = get_u32(&mut r)?;
    let n_test = get_u32(&mut r)?;
    let train = (0..n_train).map(|_| decode_example(&mut r, &spec)).collect::<Result<_>>()?;
    let test = (0..n_test).map(|_| decode_example(&mut r, &spec)).collect::<Result<_>>()?;
    if r.read(&mut [0u8])? != 0 {
        return Err(Error::Format("corpus file has trailing bytes".into()));
    }
    Ok(Corpus { spec, train, test })
}
