//! Model checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "COSEGCKP"
//! version  u32      currently 1
//! config   u32 length + UTF-8 key=value lines (architecture, and
//!                   optimizer hyperparameters as adam.* keys when present)
//! params   u32 count, then per entry:
//!          u32 name length + name, u32 rank, u32 dims..., f32 payload
//!          (row-major)
//! state    u32 count, same entry encoding (batchnorm running stats)
//! opt      u8 flag; if 1: u64 step, u32 count, then per entry:
//!          u32 name length + name, u32 numel, f32 m payload, f32 v payload
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{CosegError, Result};
use crate::model::{CosegModel, ModelConfig};
use crate::tensor::adam::{Adam, AdamHyper, MomentSlot};
use crate::tensor::{Element, Tensor};

const MAGIC: &[u8; 8] = b"COSEGCKP";
const VERSION: u32 = 1;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn name(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn f32s<E: Element>(&mut self, values: &[E]) {
        for v in values {
            self.buf
                .extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> CosegError {
        CosegError::Checkpoint(format!("{} (at byte {})", msg.into(), self.pos))
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err(format!("truncated: wanted {} more bytes", n)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn name(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| self.err("name is not valid UTF-8"))
    }
    fn f32s<E: Element>(&mut self, n: usize) -> Result<Vec<E>> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| E::of_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect())
    }
}

fn write_entry<E: Element>(w: &mut Writer, name: &str, shape: &[usize], values: &[E]) {
    w.name(name);
    w.u32(shape.len() as u32);
    for &d in shape {
        w.u32(d as u32);
    }
    w.f32s(values);
}

pub fn encode<E: Element>(model: &CosegModel<E>, opt: Option<&Adam<E>>) -> Vec<u8> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);

    let mut config = model.config.to_kv();
    if let Some(opt) = opt {
        config.push_str(&format!(
            "adam.lr={}\nadam.beta1={}\nadam.beta2={}\nadam.eps={}\n",
            opt.hyper.lr, opt.hyper.beta1, opt.hyper.beta2, opt.hyper.eps
        ));
    }
    w.name(&config);

    let mut count = 0u32;
    model.visit_params(|_, _| count += 1);
    w.u32(count);
    model.visit_params(|name, t| write_entry(&mut w, name, t.shape(), t.data()));

    let mut count = 0u32;
    model.visit_running_stats(|_, _| count += 1);
    w.u32(count);
    model.visit_running_stats(|name, values| write_entry(&mut w, name, &[values.len()], values));

    match opt {
        Some(opt) => {
            w.buf.push(1);
            w.u64(opt.step_count());
            let mut named: Vec<String> = Vec::new();
            model.visit_params(|name, _| {
                if opt.slot(name).is_some() {
                    named.push(name.to_string());
                }
            });
            w.u32(named.len() as u32);
            for name in named {
                let slot = opt.slot(&name).expect("checked above");
                w.name(&name);
                w.u32(slot.m.len() as u32);
                w.f32s(&slot.m);
                w.f32s(&slot.v);
            }
        }
        None => w.buf.push(0),
    }
    w.buf
}

pub fn decode<E: Element>(bytes: &[u8]) -> Result<(CosegModel<E>, Option<Adam<E>>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(CosegError::Checkpoint("bad magic, not a checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CosegError::Checkpoint(format!(
            "unsupported version {} (expected {})",
            version, VERSION
        )));
    }
    let config_text = r.name()?;
    let mut model_lines = String::new();
    let mut adam_kv: HashMap<String, f64> = HashMap::new();
    for line in config_text.lines() {
        if let Some(rest) = line.strip_prefix("adam.") {
            if let Some((k, v)) = rest.split_once('=') {
                let value = v.trim().parse::<f64>().map_err(|_| {
                    CosegError::Checkpoint(format!("bad adam hyperparameter line '{}'", line))
                })?;
                adam_kv.insert(k.trim().to_string(), value);
            }
        } else {
            model_lines.push_str(line);
            model_lines.push('\n');
        }
    }
    let config = ModelConfig::from_kv(&model_lines)?;
    let mut model = CosegModel::<E>::init(config, 0)?;

    let param_count = r.u32()?;
    for _ in 0..param_count {
        let name = r.name()?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let values = r.f32s::<E>(numel)?;
        model.set_param(&name, Tensor::new(shape, values)?)?;
    }

    let state_count = r.u32()?;
    for _ in 0..state_count {
        let name = r.name()?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let values = r.f32s::<E>(numel)?;
        let mut found = false;
        let mut len_err = None;
        model.visit_running_stats_mut(|n, slot| {
            if n == name {
                found = true;
                if slot.len() != values.len() {
                    len_err = Some(CosegError::Checkpoint(format!(
                        "running stat {} has {} values, expected {}",
                        name,
                        values.len(),
                        slot.len()
                    )));
                } else {
                    *slot = values.clone();
                }
            }
        });
        if let Some(e) = len_err {
            return Err(e);
        }
        if !found {
            return Err(CosegError::Checkpoint(format!(
                "no running stat named '{}'",
                name
            )));
        }
    }

    let opt = if r.u8()? == 1 {
        let step = r.u64()?;
        let slot_count = r.u32()?;
        let mut slots = HashMap::new();
        for _ in 0..slot_count {
            let name = r.name()?;
            let numel = r.u32()? as usize;
            let m = r.f32s::<E>(numel)?;
            let v = r.f32s::<E>(numel)?;
            slots.insert(name, MomentSlot { m, v });
        }
        let hyper = AdamHyper {
            lr: *adam_kv.get("lr").unwrap_or(&AdamHyper::default().lr),
            beta1: *adam_kv.get("beta1").unwrap_or(&AdamHyper::default().beta1),
            beta2: *adam_kv.get("beta2").unwrap_or(&AdamHyper::default().beta2),
            eps: *adam_kv.get("eps").unwrap_or(&AdamHyper::default().eps),
        };
        Some(Adam::restore(hyper, step, slots))
    } else {
        None
    };
    Ok((model, opt))
}

pub fn save<E: Element>(
    model: &CosegModel<E>,
    opt: Option<&Adam<E>>,
    path: &Path,
) -> Result<()> {
    Ok(fs::write(path, encode(model, opt))?)
}

pub fn load<E: Element>(path: &Path) -> Result<(CosegModel<E>, Option<Adam<E>>)> {
    decode(&fs::read(path)?)
}
