//! Binary persistence for policy parameters and trainer state.
//!
//! Checkpoint layout: the magic string `MFRL1`, the vocab listing, V, then
//! row-major little-endian f64 for `w_trans` ((V+1)·V values, last row is the
//! begin-of-sequence row) followed by `w_ctx` (V·V values). Round-trips are
//! bit-exact. Writes go through a temp file and rename, so a crash never
//! leaves a half-written checkpoint behind.

use crate::policy::{Mat, PolicyParams};
use crate::vocab::{Vocab, VocabError};
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 5] = b"MFRL1";
const STATE_MAGIC: &[u8; 6] = b"MFRL1S";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: not a policy checkpoint")]
    BadMagic,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("invalid vocab in checkpoint: {0}")]
    Vocab(#[from] VocabError),
    #[error("checkpoint vocab does not match the expected vocab")]
    VocabMismatch,
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn write_mat<W: Write>(w: &mut W, m: &Mat) -> io::Result<()> {
    for v in m.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_mat<R: Read>(r: &mut R, rows: usize, cols: usize) -> io::Result<Mat> {
    let mut m = Mat::zeros(rows, cols);
    let mut b = [0u8; 8];
    for v in m.as_mut_slice() {
        r.read_exact(&mut b)?;
        *v = f64::from_le_bytes(b);
    }
    Ok(m)
}

fn write_vocab<W: Write>(w: &mut W, vocab: &Vocab) -> io::Result<()> {
    write_u32(w, vocab.size() as u32)?;
    for t in vocab.tokens() {
        let bytes = t.as_bytes();
        write_u32(w, bytes.len() as u32)?;
        w.write_all(bytes)?;
    }
    Ok(())
}

fn read_vocab<R: Read>(r: &mut R) -> Result<Vocab, CheckpointError> {
    let v = read_u32(r)? as usize;
    if v == 0 || v > 1 << 20 {
        return Err(CheckpointError::Corrupt(format!("vocab size {v}")));
    }
    let mut tokens = Vec::with_capacity(v);
    for _ in 0..v {
        let len = read_u32(r)? as usize;
        if len > 1 << 16 {
            return Err(CheckpointError::Corrupt(format!("token length {len}")));
        }
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)?;
        let s = String::from_utf8(buf)
            .map_err(|_| CheckpointError::Corrupt("non-utf8 token".into()))?;
        tokens.push(s);
    }
    Ok(Vocab::new(tokens)?)
}

/// Atomically writes `bytes`-producing content via temp file + rename.
fn atomic_write(
    path: &Path,
    write_fn: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>,
) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write_fn(&mut w)?;
        w.flush()?;
        w.get_ref().sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub fn save_params(
    path: &Path,
    vocab: &Vocab,
    params: &PolicyParams,
) -> Result<(), CheckpointError> {
    assert_eq!(params.vocab_size(), vocab.size());
    atomic_write(path, |w| {
        w.write_all(MAGIC)?;
        write_vocab(w, vocab)?;
        write_mat(w, &params.w_trans)?;
        write_mat(w, &params.w_ctx)
    })?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<(Vocab, PolicyParams), CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let vocab = read_vocab(&mut r)?;
    let v = vocab.size();
    let w_trans = read_mat(&mut r, v + 1, v)?;
    let w_ctx = read_mat(&mut r, v, v)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }
    Ok((vocab, PolicyParams { w_trans, w_ctx }))
}

/// Loads a checkpoint and rejects it when its vocab differs from `expected`.
pub fn load_params_checked(path: &Path, expected: &Vocab) -> Result<PolicyParams, CheckpointError> {
    let (vocab, params) = load_params(path)?;
    if &vocab != expected {
        return Err(CheckpointError::VocabMismatch);
    }
    Ok(params)
}

/// Trainer state needed to resume a run: step counter, reference policy and
/// optimizer moments. Policy params live in the sibling `MFRL1` checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub ref_params: PolicyParams,
    pub opt_step: u64,
    pub opt_m: Option<(Mat, Mat)>,
    pub opt_v: Option<(Mat, Mat)>,
}

pub fn save_state(path: &Path, vocab: &Vocab, state: &TrainState) -> Result<(), CheckpointError> {
    atomic_write(path, |w| {
        w.write_all(STATE_MAGIC)?;
        write_vocab(w, vocab)?;
        write_u64(w, state.step)?;
        write_u64(w, state.opt_step)?;
        write_mat(w, &state.ref_params.w_trans)?;
        write_mat(w, &state.ref_params.w_ctx)?;
        let has_moments = state.opt_m.is_some() && state.opt_v.is_some();
        write_u32(w, has_moments as u32)?;
        if has_moments {
            let (mt, mc) = state.opt_m.as_ref().unwrap();
            let (vt, vc) = state.opt_v.as_ref().unwrap();
            write_mat(w, mt)?;
            write_mat(w, mc)?;
            write_mat(w, vt)?;
            write_mat(w, vc)?;
        }
        Ok(())
    })?;
    Ok(())
}

pub fn load_state(path: &Path, expected: &Vocab) -> Result<TrainState, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)?;
    if &magic != STATE_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let vocab = read_vocab(&mut r)?;
    if &vocab != expected {
        return Err(CheckpointError::VocabMismatch);
    }
    let v = vocab.size();
    let step = read_u64(&mut r)?;
    let opt_step = read_u64(&mut r)?;
    let ref_params = PolicyParams {
        w_trans: read_mat(&mut r, v + 1, v)?,
        w_ctx: read_mat(&mut r, v, v)?,
    };
    let has_moments = read_u32(&mut r)? != 0;
    let (opt_m, opt_v) = if has_moments {
        let mt = read_mat(&mut r, v + 1, v)?;
        let mc = read_mat(&mut r, v, v)?;
        let vt = read_mat(&mut r, v + 1, v)?;
        let vc = read_mat(&mut r, v, v)?;
        (Some((mt, mc)), Some((vt, vc)))
    } else {
        (None, None)
    };
    Ok(TrainState {
        step,
        ref_params,
        opt_step,
        opt_m,
        opt_v,
    })
}
