//! Binary checkpoint of a `VNetModel<f32>`.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        8 bytes  "VNETCKPT"
//! version      u32      1
//! config       u32 levels, u32 base_channels, u32 convs_per_level,
//!              u32 in_channels, u32 out_classes, u8 residual,
//!              f32 input_offset, f32 input_scale
//! tensors      u32 count, then per tensor:
//!              u32 name length, UTF-8 name, u32 rank, u32 dims[rank],
//!              f32 values[product(dims)]
//! optimiser    f64 beta1, f64 beta2, f64 eps, u64 step,
//!              u32 count, then per parameter: u32 length,
//!              f32 first moment[length], f32 second moment[length]
//! ```
//!
//! Tensor names follow [`VNet::visit`](super::vnet::VNet::visit) and include
//! the batch-norm running statistics.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::adam::AdamState;
use super::vnet::{VNetConfig, VNetModel};
use super::NnError;

pub const MAGIC: &[u8; 8] = b"VNETCKPT";
pub const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| NnError::MalformedCheckpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, NnError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32, NnError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, NnError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, NnError> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| NnError::MalformedCheckpoint("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn to_bytes(model: &VNetModel<f32>) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    let c = &model.config;
    for v in [c.levels, c.base_channels, c.convs_per_level, c.in_channels, c.out_classes] {
        w.u32(v as u32);
    }
    w.0.push(c.residual as u8);
    w.f32s(&[c.input_offset, c.input_scale]);
    let mut entries: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    model
        .net
        .visit(&mut |name, shape, values| entries.push((name.to_string(), shape.to_vec(), values.to_vec())));
    w.u32(entries.len() as u32);
    for (name, shape, values) in &entries {
        w.u32(name.len() as u32);
        w.0.extend_from_slice(name.as_bytes());
        w.u32(shape.len() as u32);
        shape.iter().for_each(|&d| w.u32(d as u32));
        w.f32s(values);
    }
    let a = &model.adam;
    w.f64(a.beta1);
    w.f64(a.beta2);
    w.f64(a.eps);
    w.u64(a.t);
    w.u32(a.m.len() as u32);
    for (m, v) in a.m.iter().zip(&a.v) {
        w.u32(m.len() as u32);
        w.f32s(m);
        w.f32s(v);
    }
    w.0
}

pub fn from_bytes(buf: &[u8]) -> Result<VNetModel<f32>, NnError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(NnError::MalformedCheckpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(NnError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let mut ints = [0usize; 5];
    for v in &mut ints {
        *v = r.u32()? as usize;
    }
    let residual = match r.u8()? {
        0 => false,
        1 => true,
        b => return Err(NnError::MalformedCheckpoint(format!("bad residual flag {b}"))),
    };
    let config = VNetConfig {
        levels: ints[0],
        base_channels: ints[1],
        convs_per_level: ints[2],
        in_channels: ints[3],
        out_classes: ints[4],
        residual,
        input_offset: r.f32()?,
        input_scale: r.f32()?,
    };
    if config.levels > 12 || config.base_channels > 4096 || config.convs_per_level > 64 || config.in_channels > 4096 {
        return Err(NnError::MalformedCheckpoint("implausible network config".into()));
    }
    config.validate().map_err(|e| NnError::MalformedCheckpoint(e.to_string()))?;
    let count = r.u32()? as usize;
    let mut table: HashMap<String, (Vec<usize>, Vec<f32>)> = HashMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| NnError::MalformedCheckpoint("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(NnError::MalformedCheckpoint(format!("tensor '{name}' has rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let values = r.f32s(shape.iter().product())?;
        if table.insert(name.clone(), (shape, values)).is_some() {
            return Err(NnError::MalformedCheckpoint(format!("duplicate tensor '{name}'")));
        }
    }
    let mut model = VNetModel::<f32>::new(config, 0)?;
    let mut problem = None;
    model.net.visit_mut(&mut |name, shape, values| match table.remove(name) {
        Some((s, v)) if s == shape => *values = v,
        Some((s, _)) => problem = Some(format!("tensor '{name}' has shape {s:?}, expected {shape:?}")),
        None => problem = Some(format!("missing tensor '{name}'")),
    });
    if let Some(p) = problem {
        return Err(NnError::MalformedCheckpoint(p));
    }
    if let Some(extra) = table.keys().next() {
        return Err(NnError::MalformedCheckpoint(format!("unexpected tensor '{extra}'")));
    }
    let (beta1, beta2, eps, t) = (r.f64()?, r.f64()?, r.f64()?, r.u64()?);
    let sizes = model.net.param_sizes();
    let n = r.u32()? as usize;
    if n != sizes.len() {
        return Err(NnError::MalformedCheckpoint(format!("{n} optimiser slots for {} parameters", sizes.len())));
    }
    let mut adam = AdamState::with_hyper(&sizes, beta1, beta2, eps);
    adam.t = t;
    for (i, &size) in sizes.iter().enumerate() {
        if r.u32()? as usize != size {
            return Err(NnError::MalformedCheckpoint(format!("optimiser slot {i} has the wrong length")));
        }
        adam.m[i] = r.f32s(size)?;
        adam.v[i] = r.f32s(size)?;
    }
    if r.pos != buf.len() {
        return Err(NnError::MalformedCheckpoint("trailing bytes".into()));
    }
    model.adam = adam;
    Ok(model)
}

pub fn checkpoint_save(model: &VNetModel<f32>, path: &Path) -> Result<(), NnError> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn checkpoint_load(path: &Path) -> Result<VNetModel<f32>, NnError> {
    from_bytes(&fs::read(path)?)
}
