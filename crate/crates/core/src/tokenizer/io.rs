//! On-disk formats owned by the tokenizer. All integers little-endian.
//!
//! Token map (`V2LT`): magic, `K_g`, `h`, `w` as u32, then `K_g` global ids
//! and `h*w` row-major local ids, all u32.
//!
//! Image (`V2LI`): magic, width u32, height u32, channels u8 (always 3),
//! then `height*width*3` bytes of interleaved RGB, row-major.
//!
//! Checkpoint (`V2LM`): magic, version u16, section count u16, then sections
//! of `tag[4] + u64 length + payload`, then an FNV-1a 64 checksum of every
//! preceding byte. Sections: `CONF` (JSON), `PARM` (named f64 tensors) and
//! optionally `OPTM` (Adam step counter and moments).

use std::fs;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use super::model::{ParamStore, TokenizerModel};
use super::{ModelConfig, TokenMap, TokenizerError, TrainConfig};
use crate::codebook::io::write_atomic;
use crate::codebook::EmbeddingTable;
use crate::numerics::{Adam, AdamConfig, LrSchedule, Tensor};

const MAP_MAGIC: &[u8; 4] = b"V2LT";
const IMAGE_MAGIC: &[u8; 4] = b"V2LI";
const CKPT_MAGIC: &[u8; 4] = b"V2LM";
const CKPT_VERSION: u16 = 1;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], TokenizerError> {
        if self.bytes.len() - self.pos < n {
            return Err(TokenizerError::Format(format!("{}: truncated", self.what)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, TokenizerError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, TokenizerError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, TokenizerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, TokenizerError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<(), TokenizerError> {
        if self.take(4)? != want {
            return Err(TokenizerError::Format(format!("{}: bad magic", self.what)));
        }
        Ok(())
    }

    fn done(&self) -> Result<(), TokenizerError> {
        if self.pos != self.bytes.len() {
            return Err(TokenizerError::Format(format!(
                "{}: {} trailing bytes",
                self.what,
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn encode_token_map(map: &TokenMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * map.len());
    out.extend_from_slice(MAP_MAGIC);
    for v in [map.k_g(), map.height, map.width] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for id in map.global_ids.iter().chain(&map.local_ids) {
        out.extend_from_slice(&id.to_le_bytes());
    }
    out
}

pub fn decode_token_map(bytes: &[u8]) -> Result<TokenMap, TokenizerError> {
    let mut c = Cursor::new(bytes, "token map");
    c.magic(MAP_MAGIC)?;
    let (k_g, h, w) = (c.u32()? as usize, c.u32()? as usize, c.u32()? as usize);
    let expected = k_g
        .checked_add(h.checked_mul(w).unwrap_or(usize::MAX))
        .and_then(|n| n.checked_mul(4));
    if expected != Some(bytes.len().saturating_sub(16)) {
        return Err(TokenizerError::Format(format!(
            "token map: header {k_g} + {h}x{w} ids does not match {} payload bytes",
            bytes.len().saturating_sub(16)
        )));
    }
    let global = (0..k_g).map(|_| c.u32()).collect::<Result<Vec<_>, _>>()?;
    let local = (0..h * w).map(|_| c.u32()).collect::<Result<Vec<_>, _>>()?;
    c.done()?;
    TokenMap::new(global, h, w, local)
}

pub fn save_token_map(path: &Path, map: &TokenMap) -> Result<(), TokenizerError> {
    Ok(write_atomic(path, &encode_token_map(map))?)
}

pub fn load_token_map(path: &Path) -> Result<TokenMap, TokenizerError> {
    decode_token_map(&fs::read(path)?)
}

/// `[3, H, W]` in `[0, 1]` to the byte image format; values are clamped and
/// rounded.
pub fn encode_image(image: &Tensor) -> Result<Vec<u8>, TokenizerError> {
    let (h, w) = match *image.shape() {
        [3, h, w] => (h, w),
        _ => {
            return Err(TokenizerError::Shape(format!(
                "expected [3, H, W], got {:?}",
                image.shape()
            )))
        }
    };
    let mut out = Vec::with_capacity(13 + 3 * h * w);
    out.extend_from_slice(IMAGE_MAGIC);
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.push(3);
    let d = image.data();
    for p in 0..h * w {
        for c in 0..3 {
            out.push((d[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn decode_image(bytes: &[u8]) -> Result<Tensor, TokenizerError> {
    let mut c = Cursor::new(bytes, "image");
    c.magic(IMAGE_MAGIC)?;
    let (w, h) = (c.u32()? as usize, c.u32()? as usize);
    let channels = c.u8()?;
    if channels != 3 {
        return Err(TokenizerError::Format(format!(
            "image: {channels} channels, only RGB is supported"
        )));
    }
    if w == 0 || h == 0 {
        return Err(TokenizerError::Format("image: zero size".into()));
    }
    let px = c.take(3 * h * w)?;
    c.done()?;
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (ch, p) = (i / (h * w), i % (h * w));
        px[p * 3 + ch] as f64 / 255.0
    }))
}

pub fn save_image(path: &Path, image: &Tensor) -> Result<(), TokenizerError> {
    Ok(write_atomic(path, &encode_image(image)?)?)
}

pub fn load_image(path: &Path) -> Result<Tensor, TokenizerError> {
    decode_image(&fs::read(path)?)
}

/// FNV-1a 64 over a table's shape and `f64` values; ties a checkpoint to
/// the codebooks it was trained against.
pub fn table_fingerprint(table: &EmbeddingTable) -> u64 {
    let mut h = FnvHasher::default();
    h.write(&(table.rows() as u64).to_le_bytes());
    h.write(&(table.dim() as u64).to_le_bytes());
    for v in table.data() {
        h.write(&v.to_le_bytes());
    }
    h.finish()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfSection {
    model: ModelConfig,
    train: Option<TrainConfig>,
    local_fingerprint: u64,
    global_fingerprint: u64,
}

/// Adam state as stored in a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl OptimizerState {
    /// Rebuilds the optimizer; the trainer installs its own schedule.
    pub fn into_adam(self, config: AdamConfig) -> Result<Adam, TokenizerError> {
        Ok(Adam::from_parts(
            config,
            LrSchedule::Constant { lr: 0.0 },
            self.first,
            self.second,
            self.step,
        )?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub params: ParamStore,
    pub optimizer: Option<OptimizerState>,
    pub local_fingerprint: u64,
    pub global_fingerprint: u64,
}

impl Checkpoint {
    pub fn from_model(model: &TokenizerModel, train: Option<(&TrainConfig, &Adam)>) -> Self {
        Self {
            model: model.config.clone(),
            train: train.map(|(c, _)| c.clone()),
            params: model.params.clone(),
            optimizer: train.map(|(_, a)| {
                let (m1, m2) = a.moments();
                OptimizerState {
                    step: a.step_count(),
                    first: m1.to_vec(),
                    second: m2.to_vec(),
                }
            }),
            local_fingerprint: table_fingerprint(model.local_codebook()),
            global_fingerprint: table_fingerprint(model.global_codebook()),
        }
    }

    /// Reattaches the codebooks, refusing ones the checkpoint was not
    /// trained with.
    pub fn into_model(self, local: EmbeddingTable, global: EmbeddingTable) -> Result<TokenizerModel, TokenizerError> {
        if table_fingerprint(&local) != self.local_fingerprint {
            return Err(TokenizerError::Config(
                "local codebook differs from the one in the checkpoint".into(),
            ));
        }
        if table_fingerprint(&global) != self.global_fingerprint {
            return Err(TokenizerError::Config(
                "global codebook differs from the one in the checkpoint".into(),
            ));
        }
        TokenizerModel::from_parts(self.model, self.params, local, global)
    }
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn get_tensor(c: &mut Cursor) -> Result<(String, Tensor), TokenizerError> {
    let len = c.u32()? as usize;
    let name = String::from_utf8(c.take(len)?.to_vec())
        .map_err(|_| TokenizerError::Format("checkpoint: tensor name is not UTF-8".into()))?;
    let ndim = c.u8()? as usize;
    let shape = (0..ndim)
        .map(|_| c.u32().map(|d| d as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let numel: usize = shape.iter().product();
    if numel.checked_mul(8).map_or(true, |n| n > c.bytes.len() - c.pos) {
        return Err(TokenizerError::Format(format!(
            "checkpoint: tensor {name} runs past the section"
        )));
    }
    let raw = c.take(numel * 8)?;
    let data = raw
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let t = Tensor::new(shape, data).map_err(|e| TokenizerError::Format(format!("checkpoint: tensor {name}: {e}")))?;
    Ok((name, t))
}

fn put_tensor_list<'a>(out: &mut Vec<u8>, items: impl ExactSizeIterator<Item = (&'a str, &'a Tensor)>) {
    out.extend_from_slice(&(items.len() as u32).to_le_bytes());
    for (n, t) in items {
        put_tensor(out, n, t);
    }
}

fn get_tensor_list(c: &mut Cursor) -> Result<Vec<(String, Tensor)>, TokenizerError> {
    let n = c.u32()? as usize;
    (0..n).map(|_| get_tensor(c)).collect()
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>, TokenizerError> {
    let conf = ConfSection {
        model: ck.model.clone(),
        train: ck.train.clone(),
        local_fingerprint: ck.local_fingerprint,
        global_fingerprint: ck.global_fingerprint,
    };
    let conf = serde_json::to_vec(&conf).map_err(|e| TokenizerError::Format(e.to_string()))?;
    let mut parm = Vec::new();
    put_tensor_list(&mut parm, ck.params.iter());
    let mut sections: Vec<(&[u8; 4], Vec<u8>)> = vec![(b"CONF", conf), (b"PARM", parm)];
    if let Some(opt) = &ck.optimizer {
        let mut o = Vec::new();
        o.extend_from_slice(&opt.step.to_le_bytes());
        put_tensor_list(&mut o, opt.first.iter().map(|t| ("m", t)));
        put_tensor_list(&mut o, opt.second.iter().map(|t| ("v", t)));
        sections.push((b"OPTM", o));
    }

    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(sections.len() as u16).to_le_bytes());
    for (tag, body) in sections {
        out.extend_from_slice(tag);
        out.extend_from_slice(&(body.len() as u64).to_le_bytes());
        out.extend_from_slice(&body);
    }
    let mut h = FnvHasher::default();
    h.write(&out);
    out.extend_from_slice(&h.finish().to_le_bytes());
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, TokenizerError> {
    if bytes.len() < 16 {
        return Err(TokenizerError::Format("checkpoint: truncated".into()));
    }
    let (body, sum) = bytes.split_at(bytes.len() - 8);
    let mut h = FnvHasher::default();
    h.write(body);
    if h.finish() != u64::from_le_bytes(sum.try_into().unwrap()) {
        return Err(TokenizerError::Checksum("checkpoint".into()));
    }
    let mut c = Cursor::new(body, "checkpoint");
    c.magic(CKPT_MAGIC)?;
    let version = c.u16()?;
    if version != CKPT_VERSION {
        return Err(TokenizerError::Format(format!(
            "checkpoint: unsupported version {version}"
        )));
    }
    let count = c.u16()?;
    let (mut conf, mut params, mut optimizer) = (None, None, None);
    for _ in 0..count {
        let tag: [u8; 4] = c.take(4)?.try_into().unwrap();
        let len = c.u64()? as usize;
        if len > body.len() - c.pos {
            return Err(TokenizerError::Format("checkpoint: section runs past the end".into()));
        }
        let mut s = Cursor::new(c.take(len)?, "checkpoint section");
        match &tag {
            b"CONF" => {
                let parsed: ConfSection = serde_json::from_slice(s.bytes)
                    .map_err(|e| TokenizerError::Format(format!("checkpoint CONF: {e}")))?;
                conf = Some(parsed);
            }
            b"PARM" => {
                params = Some(ParamStore::new(get_tensor_list(&mut s)?)?);
                s.done()?;
            }
            b"OPTM" => {
                let step = s.u64()?;
                let first = get_tensor_list(&mut s)?.into_iter().map(|(_, t)| t).collect();
                let second = get_tensor_list(&mut s)?.into_iter().map(|(_, t)| t).collect();
                s.done()?;
                optimizer = Some(OptimizerState { step, first, second });
            }
            other => {
                return Err(TokenizerError::Format(format!(
                    "checkpoint: unknown section {:?}",
                    String::from_utf8_lossy(other)
                )))
            }
        }
    }
    c.done()?;
    let conf = conf.ok_or_else(|| TokenizerError::Format("checkpoint: missing CONF".into()))?;
    let params = params.ok_or_else(|| TokenizerError::Format("checkpoint: missing PARM".into()))?;
    Ok(Checkpoint {
        model: conf.model,
        train: conf.train,
        params,
        optimizer,
        local_fingerprint: conf.local_fingerprint,
        global_fingerprint: conf.global_fingerprint,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), TokenizerError> {
    Ok(write_atomic(path, &encode_checkpoint(ck)?)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TokenizerError> {
    decode_checkpoint(&fs::read(path)?)
}
