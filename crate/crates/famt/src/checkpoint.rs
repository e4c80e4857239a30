//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "FAMT" | version u32 = 1
//! config block: u32 length + UTF-8 key=value lines (train + vit config)
//! tensor directory: u32 count, then per entry
//!     u16 name length + name bytes | u8 rank | u32 dims… | f64 payload
//! weight store: u8 present flag, then generation u32, refresh_epoch u32,
//!     sample count u32, patch count u32, and per sample
//!     sample_id u32 + a_w/gamma/p_a payloads
//! progress: next_epoch u32 | global_step u64 | optimizer step u64
//! ```
//!
//! The directory holds every model parameter under its canonical name plus
//! the optimizer moments as `opt.m.<name>` / `opt.v.<name>`, so a round
//! trip restores training bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::trainer::{AdamW, TrainConfig, Trainer};
use crate::vit::{ViTConfig, ViTModel};
use crate::weights::{SampleWeights, WeightStore};

const MAGIC: &[u8; 4] = b"FAMT";
const VERSION: u32 = 1;

// ── key=value config block ───────────────────────────────────────────────

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Format(format!("config line {} is not key=value: '{line}'", lineno + 1))
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn get_parsed<T: FromStr>(map: &BTreeMap<String, String>, key: &str, default: T) -> Result<T> {
    match map.get(key) {
        None => Ok(default),
        Some(raw) => raw
            .parse::<T>()
            .map_err(|_| Error::Format(format!("config key '{key}' has invalid value '{raw}'"))),
    }
}

pub fn train_config_to_kv(cfg: &TrainConfig) -> String {
    format!(
        "strategy={}\nmask-ratio={}\nthrow-ratio={}\nsigma={}\nrefresh-interval={}\nwarmup={}\n\
         loss-p={}\nepochs={}\nbatch-size={}\nbase-lr={}\nmin-lr={}\nlr-warmup-steps={}\n\
         weight-decay={}\nseed={}\nthrow-mode={}\nnorm-pix={}\nworkers={}\n",
        cfg.strategy.name(),
        cfg.mask_ratio,
        cfg.throw_ratio,
        cfg.sigma,
        cfg.refresh_interval,
        cfg.warmup_epochs,
        cfg.loss_p,
        cfg.epochs,
        cfg.batch_size,
        cfg.base_lr,
        cfg.min_lr,
        cfg.lr_warmup_steps,
        cfg.weight_decay,
        cfg.seed,
        cfg.throw_mode.name(),
        cfg.norm_pix,
        cfg.workers,
    )
}

/// Builds a config from defaults overridden by `map` entries.
pub fn train_config_from_kv(map: &BTreeMap<String, String>) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    Ok(TrainConfig {
        strategy: match map.get("strategy") {
            Some(s) => s.parse()?,
            None => d.strategy,
        },
        mask_ratio: get_parsed(map, "mask-ratio", d.mask_ratio)?,
        throw_ratio: get_parsed(map, "throw-ratio", d.throw_ratio)?,
        sigma: get_parsed(map, "sigma", d.sigma)?,
        refresh_interval: get_parsed(map, "refresh-interval", d.refresh_interval)?,
        warmup_epochs: get_parsed(map, "warmup", d.warmup_epochs)?,
        loss_p: get_parsed(map, "loss-p", d.loss_p)?,
        epochs: get_parsed(map, "epochs", d.epochs)?,
        batch_size: get_parsed(map, "batch-size", d.batch_size)?,
        base_lr: get_parsed(map, "base-lr", d.base_lr)?,
        min_lr: get_parsed(map, "min-lr", d.min_lr)?,
        lr_warmup_steps: get_parsed(map, "lr-warmup-steps", d.lr_warmup_steps)?,
        weight_decay: get_parsed(map, "weight-decay", d.weight_decay)?,
        seed: get_parsed(map, "seed", d.seed)?,
        throw_mode: match map.get("throw-mode") {
            Some(s) => s.parse()?,
            None => d.throw_mode,
        },
        norm_pix: get_parsed(map, "norm-pix", d.norm_pix)?,
        workers: get_parsed(map, "workers", d.workers)?,
    })
}

pub fn vit_config_to_kv(cfg: &ViTConfig) -> String {
    format!(
        "vit.image-h={}\nvit.image-w={}\nvit.patch={}\nvit.channels={}\nvit.embed-dim={}\n\
         vit.heads={}\nvit.enc-depth={}\nvit.dec-depth={}\nvit.dec-dim={}\nvit.mlp-ratio={}\n",
        cfg.image_h,
        cfg.image_w,
        cfg.patch,
        cfg.channels,
        cfg.embed_dim,
        cfg.heads,
        cfg.enc_depth,
        cfg.dec_depth,
        cfg.dec_dim,
        cfg.mlp_ratio,
    )
}

pub fn vit_config_from_kv(map: &BTreeMap<String, String>) -> Result<ViTConfig> {
    let d = ViTConfig::desk();
    let cfg = ViTConfig {
        image_h: get_parsed(map, "vit.image-h", d.image_h)?,
        image_w: get_parsed(map, "vit.image-w", d.image_w)?,
        patch: get_parsed(map, "vit.patch", d.patch)?,
        channels: get_parsed(map, "vit.channels", d.channels)?,
        embed_dim: get_parsed(map, "vit.embed-dim", d.embed_dim)?,
        heads: get_parsed(map, "vit.heads", d.heads)?,
        enc_depth: get_parsed(map, "vit.enc-depth", d.enc_depth)?,
        dec_depth: get_parsed(map, "vit.dec-depth", d.dec_depth)?,
        dec_dim: get_parsed(map, "vit.dec-dim", d.dec_dim)?,
        mlp_ratio: get_parsed(map, "vit.mlp-ratio", d.mlp_ratio)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

// ── binary writer/reader ─────────────────────────────────────────────────

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, vs: &[f64]) {
        for &v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn bytes(&mut self, bs: &[u8]) {
        self.buf.extend_from_slice(bs);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
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

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn write_tensor_entry(w: &mut Writer, name: &str, dims: &[usize], data: &[f64]) {
    w.u16(name.len() as u16);
    w.bytes(name.as_bytes());
    w.u8(dims.len() as u8);
    for &d in dims {
        w.u32(d as u32);
    }
    w.f64s(data);
}

fn read_tensor_entry(r: &mut Reader) -> Result<(String, Vec<usize>, Vec<f64>)> {
    let name_len = r.u16()? as usize;
    let name = String::from_utf8(r.take(name_len)?.to_vec())
        .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
    let rank = r.u8()? as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(r.u32()? as usize);
    }
    let numel: usize = dims.iter().product();
    let data = r.f64s(numel)?;
    Ok((name, dims, data))
}

/// Serializes the full training state to bytes.
pub fn checkpoint_bytes(trainer: &Trainer) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(VERSION);

    let config = format!(
        "{}{}",
        train_config_to_kv(&trainer.cfg),
        vit_config_to_kv(&trainer.model.cfg)
    );
    w.u32(config.len() as u32);
    w.bytes(config.as_bytes());

    let names = trainer.model.param_names();
    let params = trainer.model.params();
    w.u32((names.len() * 3) as u32);
    for (name, p) in names.iter().zip(&params) {
        write_tensor_entry(&mut w, name, p.dims(), p.data());
    }
    for ((name, p), m) in names.iter().zip(&params).zip(&trainer.opt.first) {
        write_tensor_entry(&mut w, &format!("opt.m.{name}"), p.dims(), m);
    }
    for ((name, p), v) in names.iter().zip(&params).zip(&trainer.opt.second) {
        write_tensor_entry(&mut w, &format!("opt.v.{name}"), p.dims(), v);
    }

    match &trainer.weights {
        Some(store) if !store.is_empty() => {
            w.u8(1);
            w.u32(store.generation);
            w.u32(store.refresh_epoch);
            w.u32(store.len() as u32);
            w.u32(store.entries[0].a_w.len() as u32);
            for e in &store.entries {
                w.u32(e.sample_id as u32);
                w.f64s(&e.a_w);
                w.f64s(&e.gamma);
                w.f64s(&e.p_a);
            }
        }
        _ => w.u8(0),
    }

    w.u32(trainer.next_epoch);
    w.u64(trainer.global_step);
    w.u64(trainer.opt.step);
    Ok(w.buf)
}

pub fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(trainer)?)?;
    Ok(())
}

/// Restores a [`Trainer`] from bytes, validating magic, version, and every
/// payload length.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Trainer> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic (expected FAMT)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let config_len = r.u32()? as usize;
    let config_text = String::from_utf8(r.take(config_len)?.to_vec())
        .map_err(|_| Error::Format("config block is not UTF-8".into()))?;
    let kv = parse_kv(&config_text)?;
    let train_cfg = train_config_from_kv(&kv)?;
    let vit_cfg = vit_config_from_kv(&kv)?;

    let mut model = ViTModel::new(vit_cfg, train_cfg.seed)?;
    let mut opt = AdamW::new(&model.params());

    let entry_count = r.u32()? as usize;
    let names = model.param_names();
    let index: BTreeMap<&str, usize> =
        names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    for _ in 0..entry_count {
        let (name, dims, data) = read_tensor_entry(&mut r)?;
        let (target, slot) = if let Some(stripped) = name.strip_prefix("opt.m.") {
            (stripped, 1)
        } else if let Some(stripped) = name.strip_prefix("opt.v.") {
            (stripped, 2)
        } else {
            (name.as_str(), 0)
        };
        let &i = index
            .get(target)
            .ok_or_else(|| Error::Format(format!("unknown tensor '{name}' in checkpoint")))?;
        match slot {
            0 => {
                let mut params = model.params_mut();
                if params[i].dims() != dims {
                    return Err(Error::Format(format!(
                        "tensor '{name}' has dims {:?}, expected {:?}",
                        dims,
                        params[i].dims()
                    )));
                }
                params[i].data_mut().copy_from_slice(&data);
            }
            1 => opt.first[i].copy_from_slice(&data),
            _ => opt.second[i].copy_from_slice(&data),
        }
    }

    let weights = if r.u8()? == 1 {
        let generation = r.u32()?;
        let refresh_epoch = r.u32()?;
        let count = r.u32()? as usize;
        let n = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let sample_id = r.u32()? as usize;
            let a_w = r.f64s(n)?;
            let gamma = r.f64s(n)?;
            let p_a = r.f64s(n)?;
            entries.push(SampleWeights { sample_id, a_w, gamma, p_a, refresh_epoch });
        }
        Some(Arc::new(WeightStore { entries, generation, refresh_epoch }))
    } else {
        None
    };

    let next_epoch = r.u32()?;
    let global_step = r.u64()?;
    opt.step = r.u64()?;
    if !r.done() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint payload",
            bytes.len() - r.pos
        )));
    }
    Ok(Trainer { model, opt, weights, cfg: train_cfg, next_epoch, global_step })
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let bytes = fs::read(path)?;
    checkpoint_from_bytes(&bytes)
}
