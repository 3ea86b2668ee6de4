//! Checkpoint container, bit-exact.
//!
//! Layout (all integers little-endian, payloads little-endian `f32`):
//!
//! ```text
//! magic "TTRP" | version u32 | descriptor (u32 len + utf8)
//! | tensor count u32
//! | per tensor: name (u32 len + utf8), rank u32, extents u32×rank, payload
//! | key flag u8 (0/1), key record if 1
//! | threshold flag u8 (0/1), threshold record if 1
//! | crc32 (IEEE) over all preceding bytes
//! ```
//!
//! Key record: variant u8 (1 = max-percentile, 2 = interval-set), selector
//! (u32 count + u32×count layer indices), then percentile f32 (variant 1) or
//! per-layer interval lists (u32 count + f32 lo/hi pairs, variant 2).
//! Threshold record: u32 count + (u32 layer, f32 alpha)×count.
//!
//! A standalone key file is the same key/threshold records wrapped with
//! magic "TTKY", version, and trailing crc32.

use std::path::Path;

use crate::attack::{AdversarialBatch, AttackConfig, AttackMethod};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::taboo::{Interval, KeyKind, TabooKey};
use crate::tensor::Tensor;

const CKPT_MAGIC: &[u8; 4] = b"TTRP";
const KEY_MAGIC: &[u8; 4] = b"TTKY";
const BATCH_MAGIC: &[u8; 4] = b"TTAB";
const VERSION: u32 = 1;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(magic: &[u8; 4]) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        Self { buf }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.buf.extend_from_slice(b);
    }

    fn tensor(&mut self, name: &str, t: &Tensor) {
        self.str(name);
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        for &v in t.data() {
            self.f32(v);
        }
    }

    fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        self.buf
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::Truncated {
                needed: 12,
                available: bytes.len(),
            });
        }
        // verify the trailing checksum before trusting any field
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::ChecksumMismatch { stored, computed });
        }
        if &body[..4] != magic {
            return Err(Error::MalformedCheckpoint(format!(
                "bad magic {:?}",
                &body[..4]
            )));
        }
        let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        Ok(Self { bytes: body, pos: 8 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                needed: self.pos + n,
                available: self.bytes.len(),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::MalformedCheckpoint("non-utf8 string".into()))
    }

    fn bytes(&mut self) -> Result<Vec<u8>> {
        let len = self.u32()? as usize;
        Ok(self.take(len)?.to_vec())
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = self.str()?;
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(self.f32()?);
        }
        Ok((name, Tensor::new(shape, data)?))
    }
}

fn write_key_record(w: &mut Writer, key: &TabooKey) {
    w.u32(key.selector().len() as u32);
    for &l in key.selector() {
        w.u32(l as u32);
    }
    match key.kind() {
        KeyKind::MaxPercentile { percentile, .. } => {
            // variant tag written by caller
            w.f32(*percentile);
        }
        KeyKind::IntervalSet { intervals } => {
            for layer_intervals in intervals {
                w.u32(layer_intervals.len() as u32);
                for iv in layer_intervals {
                    w.f32(iv.lo);
                    w.f32(iv.hi);
                }
            }
        }
    }
}

fn write_key_block(w: &mut Writer, key: &TabooKey) {
    let variant = match key.kind() {
        KeyKind::MaxPercentile { .. } => 1u8,
        KeyKind::IntervalSet { .. } => 2u8,
    };
    w.u8(variant);
    write_key_record(w, key);
    // thresholds record
    match key.kind() {
        KeyKind::MaxPercentile {
            thresholds: Some(alphas),
            ..
        } => {
            w.u8(1);
            w.u32(alphas.len() as u32);
            for (&layer, &alpha) in key.selector().iter().zip(alphas) {
                w.u32(layer as u32);
                w.f32(alpha);
            }
        }
        _ => w.u8(0),
    }
}

fn read_key_block(r: &mut Reader) -> Result<TabooKey> {
    let variant = r.u8()?;
    let n_sel = r.u32()? as usize;
    let mut selector = Vec::with_capacity(n_sel);
    for _ in 0..n_sel {
        selector.push(r.u32()? as usize);
    }
    let kind = match variant {
        1 => KeyKind::MaxPercentile {
            percentile: r.f32()?,
            thresholds: None,
        },
        2 => {
            let mut intervals = Vec::with_capacity(n_sel);
            for _ in 0..n_sel {
                let count = r.u32()? as usize;
                let mut layer = Vec::with_capacity(count);
                for _ in 0..count {
                    layer.push(Interval {
                        lo: r.f32()?,
                        hi: r.f32()?,
                    });
                }
                intervals.push(layer);
            }
            KeyKind::IntervalSet { intervals }
        }
        other => {
            return Err(Error::MalformedCheckpoint(format!(
                "unknown key variant {other}"
            )))
        }
    };
    let mut key = TabooKey::from_parts(selector, kind)?;
    if r.u8()? == 1 {
        let count = r.u32()? as usize;
        let mut alphas = Vec::with_capacity(count);
        for _ in 0..count {
            let layer = r.u32()? as usize;
            let alpha = r.f32()?;
            alphas.push((layer, alpha));
        }
        key.attach_thresholds(&alphas)?;
    }
    Ok(key)
}

/// Serializes model parameters (and the key with its thresholds, when given)
/// to the container format.
pub fn checkpoint_bytes(model: &Model, key: Option<&TabooKey>) -> Vec<u8> {
    let mut w = Writer::new(CKPT_MAGIC);
    w.str(&model.descriptor);
    w.u32(model.params.len() as u32);
    for (i, p) in model.params.iter().enumerate() {
        w.tensor(&format!("param.{i}"), p);
    }
    match key {
        Some(k) => {
            w.u8(1);
            write_key_block(&mut w, k);
        }
        None => w.u8(0),
    }
    w.finish()
}

pub fn save_checkpoint(model: &Model, key: Option<&TabooKey>, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model, key))?;
    Ok(())
}

/// Parses container bytes back into a model and optional key. A checkpoint
/// without a key block loads with `None`, not an error.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(Model, Option<TabooKey>)> {
    let mut r = Reader::new(bytes, CKPT_MAGIC)?;
    let descriptor = r.str()?;
    let n_tensors = r.u32()? as usize;
    let mut params = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let (_name, t) = r.tensor()?;
        params.push(t);
    }
    let key = if r.u8()? == 1 {
        Some(read_key_block(&mut r)?)
    } else {
        None
    };
    let model = Model::from_descriptor(&descriptor, params)?;
    Ok((model, key))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Option<TabooKey>)> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}

/// Standalone key file with the same record layout as the checkpoint block.
pub fn key_bytes(key: &TabooKey) -> Vec<u8> {
    let mut w = Writer::new(KEY_MAGIC);
    write_key_block(&mut w, key);
    w.finish()
}

pub fn save_key(key: &TabooKey, path: &Path) -> Result<()> {
    std::fs::write(path, key_bytes(key))?;
    Ok(())
}

pub fn load_key(path: &Path) -> Result<TabooKey> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader::new(&bytes, KEY_MAGIC)?;
    read_key_block(&mut r)
}

/// Serializes an adversarial batch with the container's tensor records, for
/// reuse across runs.
pub fn batch_bytes(batch: &AdversarialBatch) -> Vec<u8> {
    let mut w = Writer::new(BATCH_MAGIC);
    let cfg = &batch.config;
    w.u8(match cfg.method {
        AttackMethod::Fgsm => 1,
        AttackMethod::Pgd => 2,
        AttackMethod::DeepFool => 3,
    });
    w.f32(cfg.eps);
    w.f32(cfg.step);
    w.u32(cfg.iters as u32);
    w.f32(cfg.overshoot);
    w.u8(cfg.random_start as u8);
    w.u64(cfg.seed);
    w.tensor("originals", &batch.originals);
    w.tensor("perturbed", &batch.perturbed);
    w.bytes(&batch.labels);
    w.bytes(&batch.clean_pred);
    w.bytes(&batch.adv_pred);
    w.u32(batch.linf.len() as u32);
    for &v in &batch.linf {
        w.f32(v);
    }
    let degenerate: Vec<u8> = batch.degenerate.iter().map(|&d| d as u8).collect();
    w.bytes(&degenerate);
    w.finish()
}

pub fn save_batch(batch: &AdversarialBatch, path: &Path) -> Result<()> {
    std::fs::write(path, batch_bytes(batch))?;
    Ok(())
}

pub fn batch_from_bytes(bytes: &[u8]) -> Result<AdversarialBatch> {
    let mut r = Reader::new(bytes, BATCH_MAGIC)?;
    let method = match r.u8()? {
        1 => AttackMethod::Fgsm,
        2 => AttackMethod::Pgd,
        3 => AttackMethod::DeepFool,
        other => {
            return Err(Error::MalformedCheckpoint(format!(
                "unknown attack method tag {other}"
            )))
        }
    };
    let config = AttackConfig {
        method,
        eps: r.f32()?,
        step: r.f32()?,
        iters: r.u32()? as usize,
        overshoot: r.f32()?,
        random_start: r.u8()? != 0,
        seed: r.u64()?,
    };
    let (_, originals) = r.tensor()?;
    let (_, perturbed) = r.tensor()?;
    let labels = r.bytes()?;
    let clean_pred = r.bytes()?;
    let adv_pred = r.bytes()?;
    let n = r.u32()? as usize;
    let mut linf = Vec::with_capacity(n);
    for _ in 0..n {
        linf.push(r.f32()?);
    }
    let degenerate: Vec<bool> = r.bytes()?.iter().map(|&b| b != 0).collect();
    Ok(AdversarialBatch {
        config,
        originals,
        perturbed,
        labels,
        clean_pred,
        adv_pred,
        linf,
        degenerate,
    })
}

pub fn load_batch(path: &Path) -> Result<AdversarialBatch> {
    batch_from_bytes(&std::fs::read(path)?)
}
