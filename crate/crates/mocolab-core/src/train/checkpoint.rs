//! Versioned checkpoint container. Serialization is fully deterministic
//! (ordered maps, no timestamps), so identical training runs produce
//! byte-identical checkpoint files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::{Dtype, Scalar};
use crate::train::queue::NegativeQueue;
use crate::train::sgd::Sgd;
use crate::train::TrainConfig;

const CKPT_MAGIC: &[u8; 4] = b"MLCK";
const CKPT_VERSION: u16 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint<T: Scalar> {
    pub config: TrainConfig,
    /// Encoder + projection head of the query model.
    pub query: ParamSet<T>,
    /// EMA key copy, structurally identical to `query`.
    pub key: ParamSet<T>,
    /// Auxiliary trainable state (per-block Barlow projectors); empty
    /// unless the mode uses them.
    pub aux: ParamSet<T>,
    pub optimizer: Sgd<T>,
    pub queue: NegativeQueue<T>,
    pub epoch: usize,
    pub global_step: u64,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let cfg = serde_json::to_vec(&self.config)
            .map_err(|e| Error::Data(format!("config serialization failed: {e}")))?;
        let io = |e: std::io::Error| Error::Data(format!("checkpoint write failed: {e}"));
        w.write_all(CKPT_MAGIC).map_err(io)?;
        w.write_all(&CKPT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&[T::DTYPE.tag()]).map_err(io)?;
        w.write_all(&(cfg.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&cfg).map_err(io)?;
        w.write_all(&(self.epoch as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&self.global_step.to_le_bytes()).map_err(io)?;
        self.query.write_to(w).map_err(io)?;
        self.key.write_to(w).map_err(io)?;
        self.aux.write_to(w).map_err(io)?;
        self.optimizer.write_to(w).map_err(io)?;
        self.queue.write_to(w).map_err(io)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let io = |e: std::io::Error| Error::Data(format!("checkpoint read failed: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CKPT_MAGIC {
            return Err(Error::Data("not a checkpoint file (bad magic)".into()));
        }
        let mut v2 = [0u8; 2];
        r.read_exact(&mut v2).map_err(io)?;
        let version = u16::from_le_bytes(v2);
        if version != CKPT_VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {version}")));
        }
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag).map_err(io)?;
        let dtype = Dtype::from_tag(tag[0])?;
        if dtype != T::DTYPE {
            return Err(Error::Data(format!(
                "checkpoint dtype is {dtype}, requested {}",
                T::DTYPE
            )));
        }
        let mut n4 = [0u8; 4];
        r.read_exact(&mut n4).map_err(io)?;
        let mut cfg = vec![0u8; u32::from_le_bytes(n4) as usize];
        r.read_exact(&mut cfg).map_err(io)?;
        let config: TrainConfig = serde_json::from_slice(&cfg)
            .map_err(|e| Error::Data(format!("config deserialization failed: {e}")))?;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(io)?;
        let epoch = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b8).map_err(io)?;
        let global_step = u64::from_le_bytes(b8);
        let query = ParamSet::read_from(r)?;
        let key = ParamSet::read_from(r)?;
        let aux = ParamSet::read_from(r)?;
        let optimizer = Sgd::read_from(r)?;
        let queue = NegativeQueue::read_from(r)?;
        Ok(Checkpoint {
            config,
            query,
            key,
            aux,
            optimizer,
            queue,
            epoch,
            global_step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file))
    }

    /// Stable digest over everything the file stores.
    pub fn digest(&self) -> u64 {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("in-memory write");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in buf {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

/// Peek the dtype tag of a checkpoint file without loading it.
pub fn peek_dtype(path: &Path) -> Result<Dtype> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut head = [0u8; 7];
    r.read_exact(&mut head)
        .map_err(|e| Error::Data(format!("checkpoint read failed: {e}")))?;
    if &head[..4] != CKPT_MAGIC {
        return Err(Error::Data("not a checkpoint file (bad magic)".into()));
    }
    Dtype::from_tag(head[6])
}
