//! `DVCK` checkpoint.
//!
//! Little-endian layout:
//!
//! ```text
//! magic     4 bytes "DVCK"
//! version   u16     1
//! config    u32 length + UTF-8 TOML (resolved training config)
//! stage     u8      0 init, 1 stage1, 2 stage2, 3 joint
//! classes   u32
//! seed      u64
//! text      u32 length + hex SHA-256 of the frozen text encoder
//! progress  u8 flag; when 1: phase u8, epoch u32, batch u32, step u64, adam_step u64
//! tensors   u32 count, then per tensor:
//!           u16 name length, name, u8 rank, rank × u32 dims, numel × f64
//! crc       u32     CRC-32 (IEEE) of every preceding byte
//! ```
//!
//! Tensor names: image parameters (`vit.*`, `head.*`), prompt vectors
//! (`prompt.global`, `prompt.local`) and optimizer moments (`adam.m.<name>`,
//! `adam.v.<name>`). Values are stored as `f64`, which is lossless for both
//! scalar types. The text encoder is rebuilt from its seed and checked
//! against the stored hash.

use std::path::Path;

use super::config::TrainConfig;
use super::model::{Model, StageTag};
use super::optimizer::AdamW;
use super::trainer::{Phase, Progress};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::prompts::{GLOBAL_PROMPT, LOCAL_PROMPT};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DVCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// A model plus, when saved mid-phase, the state needed to resume it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub model: Model<T>,
    pub progress: Option<Progress<T>>,
}

fn put_tensor<T: Scalar>(buf: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    buf.extend((name.len() as u16).to_le_bytes());
    buf.extend(name.as_bytes());
    buf.push(t.rank() as u8);
    for &d in t.shape() {
        buf.extend((d as u32).to_le_bytes());
    }
    for x in t.data() {
        buf.extend(x.as_f64().to_le_bytes());
    }
}

pub fn write_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>) -> Vec<u8> {
    let m = &ckpt.model;
    let mut buf = Vec::new();
    buf.extend(CHECKPOINT_MAGIC);
    buf.extend(CHECKPOINT_VERSION.to_le_bytes());
    let cfg = m.config.to_toml();
    buf.extend((cfg.len() as u32).to_le_bytes());
    buf.extend(cfg.as_bytes());
    buf.push(m.stage.code());
    buf.extend((m.classes() as u32).to_le_bytes());
    buf.extend(m.config.seed.to_le_bytes());
    let text_hash = m.text().params().content_hash();
    buf.extend((text_hash.len() as u32).to_le_bytes());
    buf.extend(text_hash.as_bytes());
    let mut tensors: Vec<(String, &Tensor<T>)> = m.image.iter().map(|(k, v)| (k.clone(), v)).collect();
    if let Some(p) = &m.prompts {
        tensors.push((GLOBAL_PROMPT.to_string(), &p.global));
        tensors.push((LOCAL_PROMPT.to_string(), &p.local));
    }
    match &ckpt.progress {
        None => buf.push(0),
        Some(p) => {
            buf.push(1);
            buf.push(p.phase.code());
            buf.extend((p.epoch as u32).to_le_bytes());
            buf.extend((p.batch as u32).to_le_bytes());
            buf.extend(p.step.to_le_bytes());
            buf.extend(p.optimizer.step.to_le_bytes());
            for (k, v) in &p.optimizer.m {
                tensors.push((format!("adam.m.{k}"), v));
            }
            for (k, v) in &p.optimizer.v {
                tensors.push((format!("adam.v.{k}"), v));
            }
        }
    }
    buf.extend((tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        put_tensor(&mut buf, name, t);
    }
    let crc = crc32fast::hash(&buf);
    buf.extend(crc.to_le_bytes());
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format("truncated checkpoint"));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::format("checkpoint string is not UTF-8"))
    }
}

pub fn read_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::format("not a DVCK checkpoint (bad magic)"));
    }
    if bytes.len() < 10 {
        return Err(Error::format("truncated checkpoint"));
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().unwrap()) {
        return Err(Error::format("checkpoint CRC mismatch (corrupted or truncated file)"));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!("unsupported DVCK version {version}")));
    }
    let cfg_len = r.u32()? as usize;
    let config = TrainConfig::from_toml(&r.string(cfg_len)?)?;
    let stage = StageTag::from_code(r.u8()?).ok_or_else(|| Error::format("unknown stage marker"))?;
    let classes = r.u32()? as usize;
    let seed = r.u64()?;
    if seed != config.seed {
        return Err(Error::format("checkpoint seed disagrees with its config echo"));
    }
    let hash_len = r.u32()? as usize;
    let text_hash = r.string(hash_len)?;
    let progress_head = match r.u8()? {
        0 => None,
        1 => {
            let phase = Phase::from_code(r.u8()?).ok_or_else(|| Error::format("unknown phase marker"))?;
            Some((phase, r.u32()? as usize, r.u32()? as usize, r.u64()?, r.u64()?))
        }
        f => return Err(Error::format(format!("bad progress flag {f}"))),
    };
    let count = r.u32()? as usize;
    let mut image = ParamStore::new();
    let mut prompts = ParamStore::new();
    let mut opt = AdamW::new();
    let mut seen = std::collections::HashSet::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = r.string(name_len)?;
        if !seen.insert(name.clone()) {
            return Err(Error::format(format!("duplicate tensor {name}")));
        }
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = r
            .take(numel * 8)?
            .chunks_exact(8)
            .map(|b| T::lit(f64::from_le_bytes(b.try_into().unwrap())))
            .collect();
        let t = Tensor::new(shape, data)?;
        if let Some(k) = name.strip_prefix("adam.m.") {
            opt.m.insert(k.to_string(), t);
        } else if let Some(k) = name.strip_prefix("adam.v.") {
            opt.v.insert(k.to_string(), t);
        } else if name.starts_with("prompt.") {
            prompts.insert(name, t);
        } else {
            image.insert(name, t);
        }
    }
    if r.pos != body.len() {
        return Err(Error::format("trailing bytes before checkpoint CRC"));
    }
    let prompts = if prompts.is_empty() { None } else { Some(prompts) };
    let model = Model::from_parts(config, classes, image, prompts, stage)?;
    if model.text().params().content_hash() != text_hash {
        return Err(Error::format(
            "text encoder rebuilt from the config differs from the one the checkpoint was trained with",
        ));
    }
    let progress = progress_head.map(|(phase, epoch, batch, step, adam_step)| {
        opt.step = adam_step;
        Progress {
            phase,
            epoch,
            batch,
            step,
            optimizer: opt,
        }
    });
    Ok(Checkpoint { model, progress })
}

pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_checkpoint(ckpt))?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("checkpoint {}: {e}", path.display()))))?;
    read_checkpoint(&bytes)
}
