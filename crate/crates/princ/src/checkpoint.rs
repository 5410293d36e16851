//! Bit-exact binary checkpoints.
//!
//! Layout, all integers little-endian, all floats 64-bit IEEE-754:
//!
//! ```text
//! magic            8 bytes  "PRINC1\0\0"
//! version          u32      currently 1
//! tensor block     u32 count, then per tensor:
//!                  name (u32 len + utf-8), rank u32, dims (u64 each),
//!                  data (f64 each)
//! prototypes       u32 count, then per entry:
//!                  intent (u32 len + utf-8), stage u8 (0 seen, 1 novel),
//!                  rank u32 + dims + data
//! vocab            u32 count, then per token: u32 len + utf-8 (id order)
//! snapshot         u8 presence flag; if 1, a tensor block followed by the
//!                  penalty-exempt embedding rows (u32 count, u64 each)
//! replay memory    u8 presence flag; if 1: capacity u64, u32 item count,
//!                  per item text + label (u32 len + utf-8 each), then a
//!                  u8 soft-label flag followed by one tensor per item
//! train config     fixed-order scalar fields
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::preservation::{ParameterSnapshot, ReplayMemory};
use crate::prototypes::{PrototypeStore, Stage, PARAM_PROJECTION};
use crate::tensor::{ModelParams, Tensor};
use crate::text::{EncoderConfig, Utterance, Vocab, PARAM_EMBED, PARAM_W1};
use crate::training::{Preservation, TrainConfig};

pub const MAGIC: &[u8; 8] = b"PRINC1\0\0";
pub const FORMAT_VERSION: u32 = 1;

/// Everything a later phase or an evaluation run needs to resume.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub snapshot: Option<ParameterSnapshot>,
    pub memory: Option<ReplayMemory>,
    pub config: TrainConfig,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(ckpt))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    from_bytes(&fs::read(path)?)
}

pub fn to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);

    w.u32(ckpt.model.params.len() as u32);
    for p in ckpt.model.params.iter() {
        w.str(&p.name);
        w.tensor(&p.value);
    }

    w.u32(ckpt.model.store.len() as u32);
    for e in ckpt.model.store.entries() {
        w.str(&e.intent);
        w.bytes.push(match e.stage {
            Stage::Seen => 0,
            Stage::Novel => 1,
        });
        w.tensor(&e.param.value);
    }

    w.u32(ckpt.model.vocab.len() as u32);
    for token in ckpt.model.vocab.tokens() {
        w.str(token);
    }

    match &ckpt.snapshot {
        None => w.bytes.push(0),
        Some(snapshot) => {
            w.bytes.push(1);
            w.u32(snapshot.entries().len() as u32);
            for (name, tensor) in snapshot.entries() {
                w.str(name);
                w.tensor(tensor);
            }
            w.u32(snapshot.free_embed_rows().len() as u32);
            for &row in snapshot.free_embed_rows() {
                w.u64(row as u64);
            }
        }
    }

    match &ckpt.memory {
        None => w.bytes.push(0),
        Some(memory) => {
            w.bytes.push(1);
            w.u64(memory.capacity as u64);
            w.u32(memory.len() as u32);
            for item in memory.items() {
                w.str(&item.text);
                w.str(&item.label);
            }
            match memory.soft_labels() {
                None => w.bytes.push(0),
                Some(labels) => {
                    w.bytes.push(1);
                    for label in labels {
                        w.tensor(label);
                    }
                }
            }
        }
    }

    let cfg = &ckpt.config;
    w.f64(cfg.phase1_lr);
    w.f64(cfg.phase2_lr);
    w.u32(cfg.phase1_epochs as u32);
    w.u32(cfg.phase2_epochs as u32);
    w.u32(cfg.batch_size as u32);
    w.f64(cfg.lambda);
    w.bytes.push(match cfg.preservation {
        Preservation::None => 0,
        Preservation::Dakp => 1,
        Preservation::Ddkp => 2,
    });
    w.f64(cfg.memory_ratio);
    w.f64(cfg.tau);
    w.f64(cfg.tau_kd);
    w.u64(cfg.seed);

    w.bytes
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(8)?;
    if magic != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
        )));
    }

    let mut params = ModelParams::new();
    let tensor_count = r.u32()?;
    for _ in 0..tensor_count {
        let name = r.str()?;
        let tensor = r.tensor()?;
        params.insert(name, tensor)?;
    }

    let proto_count = r.u32()?;
    let mut proto_parts = Vec::with_capacity(proto_count as usize);
    for _ in 0..proto_count {
        let intent = r.str()?;
        let stage = match r.u8()? {
            0 => Stage::Seen,
            1 => Stage::Novel,
            other => return Err(Error::Format(format!("bad stage tag {other}"))),
        };
        let tensor = r.tensor()?;
        proto_parts.push((intent, stage, tensor));
    }
    let store = PrototypeStore::from_parts(proto_parts)?;

    let token_count = r.u32()?;
    let mut tokens = Vec::with_capacity(token_count as usize);
    for _ in 0..token_count {
        tokens.push(r.str()?);
    }
    let vocab = Vocab::from_tokens(tokens)?;

    let snapshot = match r.u8()? {
        0 => None,
        1 => {
            let count = r.u32()?;
            let mut entries = Vec::with_capacity(count as usize);
            for _ in 0..count {
                let name = r.str()?;
                let tensor = r.tensor()?;
                entries.push((name, tensor));
            }
            let free_count = r.u32()? as usize;
            let mut free_rows = Vec::with_capacity(free_count.min(1 << 20));
            for _ in 0..free_count {
                free_rows.push(r.u64()? as usize);
            }
            Some(ParameterSnapshot::from_entries(entries, free_rows))
        }
        other => return Err(Error::Format(format!("bad snapshot flag {other}"))),
    };

    let memory = match r.u8()? {
        0 => None,
        1 => {
            let capacity = r.u64()? as usize;
            let count = r.u32()?;
            let mut items = Vec::with_capacity(count as usize);
            for _ in 0..count {
                let text = r.str()?;
                let label = r.str()?;
                items.push(
                    Utterance::new(text, label).map_err(|e| Error::Format(e.to_string()))?,
                );
            }
            let soft_labels = match r.u8()? {
                0 => None,
                1 => {
                    let mut labels = Vec::with_capacity(count as usize);
                    for _ in 0..count {
                        labels.push(r.tensor()?);
                    }
                    Some(labels)
                }
                other => return Err(Error::Format(format!("bad soft-label flag {other}"))),
            };
            Some(ReplayMemory::from_parts(capacity, items, soft_labels)?)
        }
        other => return Err(Error::Format(format!("bad memory flag {other}"))),
    };

    let config = TrainConfig {
        phase1_lr: r.f64()?,
        phase2_lr: r.f64()?,
        phase1_epochs: r.u32()? as usize,
        phase2_epochs: r.u32()? as usize,
        batch_size: r.u32()? as usize,
        lambda: r.f64()?,
        preservation: match r.u8()? {
            0 => Preservation::None,
            1 => Preservation::Dakp,
            2 => Preservation::Ddkp,
            other => return Err(Error::Format(format!("bad preservation tag {other}"))),
        },
        memory_ratio: r.f64()?,
        tau: r.f64()?,
        tau_kd: r.f64()?,
        seed: r.u64()?,
    };

    if r.pos != r.bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint payload",
            r.bytes.len() - r.pos
        )));
    }

    // model dims are implied by the stored tensor shapes
    let embed = params.get(PARAM_EMBED)?.value.dims().to_vec();
    let w1 = params.get(PARAM_W1)?.value.dims().to_vec();
    let proj = params.get(PARAM_PROJECTION)?.value.dims().to_vec();
    if embed.len() != 2 || w1.len() != 2 || proj.len() != 2 {
        return Err(Error::Format("malformed parameter shapes".into()));
    }
    if embed[0] != vocab.len() {
        return Err(Error::Format(format!(
            "embedding table has {} rows but the vocab has {} tokens",
            embed[0],
            vocab.len()
        )));
    }
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            embedding_dim: embed[1],
            hidden_dim: w1[0],
        },
        prototype_dim: proj[0],
    };

    Ok(Checkpoint {
        model: Model {
            cfg,
            vocab,
            params,
            store,
        },
        snapshot,
        memory,
        config,
    })
}

#[derive(Default)]
struct Writer {
    bytes: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes.extend_from_slice(s.as_bytes());
    }

    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.dims().len() as u32);
        for &d in t.dims() {
            self.u64(d as u64);
        }
        for &x in t.data() {
            self.f64(x);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(self.u64()? as usize);
        }
        let len: usize = dims.iter().product();
        // bounds-check before allocating so a corrupt header cannot OOM
        if len > (self.bytes.len() - self.pos) / 8 {
            return Err(Error::Format(format!(
                "truncated checkpoint: tensor claims {len} values"
            )));
        }
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(self.f64()?);
        }
        Tensor::new(dims, data).map_err(|e| Error::Format(e.to_string()))
    }
}
