//! Versioned binary snapshots of a model: magic string, config block,
//! vocabularies, then every parameter tensor in declared order as
//! shape-prefixed little-endian f64. Save → load → save is byte-identical.

use std::io::{Read, Write};
use std::path::Path;

use crate::data::Vocab;
use crate::error::{GgdError, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::rng::RngHandle;

pub const MAGIC: &[u8; 8] = b"GGDCKPT1";

#[derive(Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
    pub seed: u64,
}

impl Checkpoint {
    pub fn new(params: ModelParams, src_vocab: Vocab, tgt_vocab: Vocab, seed: u64) -> Result<Self> {
        if src_vocab.size() != params.cfg.src_vocab || tgt_vocab.size() != params.cfg.tgt_vocab {
            return Err(GgdError::Checkpoint(
                "vocabulary sizes do not match the model configuration".into(),
            ));
        }
        Ok(Checkpoint { params, src_vocab, tgt_vocab, seed })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        let cfg = &self.params.cfg;
        for v in [
            cfg.embed_dim as u32,
            cfg.hidden_dim as u32,
            cfg.attn_dim as u32,
            cfg.src_vocab as u32,
            cfg.tgt_vocab as u32,
            cfg.eos,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.seed.to_le_bytes())?;
        for vocab in [&self.src_vocab, &self.tgt_vocab] {
            let toks = vocab.content_tokens();
            w.write_all(&(toks.len() as u32).to_le_bytes())?;
            for t in toks {
                let bytes = t.as_bytes();
                w.write_all(&(bytes.len() as u32).to_le_bytes())?;
                w.write_all(bytes)?;
            }
        }
        let tensors = self.params.tensors();
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for t in tensors {
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(GgdError::Checkpoint(format!(
                "unknown magic/version {:?}",
                String::from_utf8_lossy(&magic)
            )));
        }
        let embed_dim = read_u32(r)? as usize;
        let hidden_dim = read_u32(r)? as usize;
        let attn_dim = read_u32(r)? as usize;
        let src_vocab_size = read_u32(r)? as usize;
        let tgt_vocab_size = read_u32(r)? as usize;
        let eos = read_u32(r)?;
        let seed = read_u64(r)?;
        let cfg = ModelConfig {
            src_vocab: src_vocab_size,
            tgt_vocab: tgt_vocab_size,
            embed_dim,
            hidden_dim,
            attn_dim,
            eos,
        };
        cfg.validate()
            .map_err(|e| GgdError::Checkpoint(format!("bad config block: {e}")))?;

        let mut read_vocab = |expected: usize| -> Result<Vocab> {
            let n = read_u32(r)? as usize;
            let mut tokens = Vec::with_capacity(n);
            for _ in 0..n {
                let len = read_u32(r)? as usize;
                if len > 1 << 20 {
                    return Err(GgdError::Checkpoint("vocabulary token too long".into()));
                }
                let mut buf = vec![0u8; len];
                read_exact(r, &mut buf)?;
                tokens.push(String::from_utf8(buf).map_err(|_| {
                    GgdError::Checkpoint("vocabulary token is not valid UTF-8".into())
                })?);
            }
            let v = Vocab::from_tokens(tokens)
                .map_err(|e| GgdError::Checkpoint(format!("bad vocabulary: {e}")))?;
            if v.size() != expected {
                return Err(GgdError::Checkpoint(format!(
                    "vocabulary size {} does not match config {expected}",
                    v.size()
                )));
            }
            Ok(v)
        };
        let src_vocab = read_vocab(src_vocab_size)?;
        let tgt_vocab = read_vocab(tgt_vocab_size)?;

        // Template parameters give the expected tensor count and shapes.
        let mut params = ModelParams::init(cfg, &mut RngHandle::new(0))
            .map_err(|e| GgdError::Checkpoint(format!("bad config block: {e}")))?;
        let n = read_u32(r)? as usize;
        if n != params.n_tensors() {
            return Err(GgdError::Checkpoint(format!(
                "expected {} tensors, found {n}",
                params.n_tensors()
            )));
        }
        for slot in params.tensors_mut() {
            let rank = read_u32(r)? as usize;
            if rank != slot.rank() {
                return Err(GgdError::Checkpoint("tensor rank mismatch".into()));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(r)? as usize);
            }
            if shape != slot.shape() {
                return Err(GgdError::Checkpoint(format!(
                    "tensor shape {:?} does not match expected {:?}",
                    shape,
                    slot.shape()
                )));
            }
            for x in slot.data_mut() {
                *x = read_f64(r)?;
            }
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(GgdError::Checkpoint("trailing bytes after tensors".into()));
        }
        Checkpoint::new(params, src_vocab, tgt_vocab, seed)
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| GgdError::Checkpoint("truncated checkpoint".into()))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}
