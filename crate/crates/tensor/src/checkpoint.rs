//! Versioned binary checkpoint: magic, format version, named parameter
//! manifest, raw little-endian values, optimizer state. Round-trips are
//! bit-exact.

use crate::error::TensorError;
use crate::optim::{AdamW, LrSchedule};
use crate::params::ParamStore;
use crate::scalar::{Dtype, Scalar};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"GRIDHCKP";
const VERSION: u32 = 1;

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
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        let b = s.as_bytes();
        self.u32(b.len() as u32);
        self.buf.extend_from_slice(b);
    }
    fn values<S: Scalar>(&mut self, vals: &[S]) {
        self.buf.reserve(vals.len() * S::BYTES);
        for &v in vals {
            v.write_le(&mut self.buf);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TensorError> {
        if self.pos + n > self.buf.len() {
            return Err(TensorError::Format("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, TensorError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, TensorError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
    fn u64(&mut self) -> Result<u64, TensorError> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, TensorError> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String, TensorError> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| TensorError::Format("bad utf8 name".into()))
    }
    fn values<S: Scalar>(&mut self, n: usize) -> Result<Vec<S>, TensorError> {
        let b = self.take(n * S::BYTES)?;
        Ok((0..n).map(|i| S::read_le(&b[i * S::BYTES..])).collect())
    }
}

pub fn save<S: Scalar>(
    path: &Path,
    store: &ParamStore<S>,
    optimizer: Option<&AdamW<S>>,
) -> Result<(), TensorError> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u8(S::DTYPE.tag());
    w.u32(store.len() as u32);
    for (_, p) in store.iter() {
        w.str(&p.name);
        w.u8(p.shape.len() as u8);
        for &d in &p.shape {
            w.u32(d as u32);
        }
    }
    for (_, p) in store.iter() {
        w.values(&p.values);
    }
    match optimizer {
        None => w.u8(0),
        Some(opt) => {
            w.u8(1);
            w.u64(opt.step_count());
            w.f64(opt.lr_peak);
            w.f64(opt.weight_decay);
            w.f64(opt.beta1);
            w.f64(opt.beta2);
            w.f64(opt.eps);
            match opt.schedule {
                LrSchedule::Constant => {
                    w.u8(0);
                    w.u64(0);
                }
                LrSchedule::LinearToZero { total_steps } => {
                    w.u8(1);
                    w.u64(total_steps);
                }
            }
            let (m, v) = opt.moments();
            for mv in m {
                w.values(mv);
            }
            for vv in v {
                w.values(vv);
            }
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&w.buf)?;
    Ok(())
}

/// Load values into an existing store (shapes and names must match the
/// manifest exactly) and optionally restore optimizer moments.
pub fn load<S: Scalar>(
    path: &Path,
    store: &mut ParamStore<S>,
    optimizer: Option<&mut AdamW<S>>,
) -> Result<(), TensorError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(TensorError::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(TensorError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let dtype = Dtype::from_tag(r.u8()?).ok_or_else(|| TensorError::Format("bad dtype tag".into()))?;
    if dtype != S::DTYPE {
        return Err(TensorError::Format(format!(
            "checkpoint dtype {dtype:?} does not match runtime dtype {:?}",
            S::DTYPE
        )));
    }
    let count = r.u32()? as usize;
    if count != store.len() {
        return Err(TensorError::Format(format!(
            "checkpoint has {count} parameters, model has {}",
            store.len()
        )));
    }
    let mut shapes = Vec::with_capacity(count);
    for (_, p) in store.iter() {
        let name = r.str()?;
        if name != p.name {
            return Err(TensorError::Format(format!(
                "parameter name mismatch: checkpoint {name}, model {}",
                p.name
            )));
        }
        let nd = r.u8()? as usize;
        let mut shape = Vec::with_capacity(nd);
        for _ in 0..nd {
            shape.push(r.u32()? as usize);
        }
        if shape != p.shape {
            return Err(TensorError::Format(format!(
                "parameter {name} shape mismatch: checkpoint {shape:?}, model {:?}",
                p.shape
            )));
        }
        shapes.push(shape);
    }
    for (i, p) in store.iter_mut().enumerate() {
        let n: usize = shapes[i].iter().product();
        p.values = r.values(n)?;
    }
    let has_opt = r.u8()? == 1;
    if has_opt {
        let step = r.u64()?;
        let lr_peak = r.f64()?;
        let wd = r.f64()?;
        let beta1 = r.f64()?;
        let beta2 = r.f64()?;
        let eps = r.f64()?;
        let sched_tag = r.u8()?;
        let total = r.u64()?;
        let mut m = Vec::with_capacity(count);
        for shape in &shapes {
            m.push(r.values(shape.iter().product())?);
        }
        let mut v = Vec::with_capacity(count);
        for shape in &shapes {
            v.push(r.values(shape.iter().product())?);
        }
        if let Some(opt) = optimizer {
            opt.lr_peak = lr_peak;
            opt.weight_decay = wd;
            opt.beta1 = beta1;
            opt.beta2 = beta2;
            opt.eps = eps;
            opt.schedule = match sched_tag {
                0 => LrSchedule::Constant,
                1 => LrSchedule::LinearToZero { total_steps: total },
                _ => return Err(TensorError::Format("bad schedule tag".into())),
            };
            opt.restore(step, m, v);
        }
    }
    if r.pos != bytes.len() {
        return Err(TensorError::Format("trailing bytes in checkpoint".into()));
    }
    Ok(())
}
