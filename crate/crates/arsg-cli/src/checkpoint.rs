//! Versioned binary checkpoints: config snapshot, parameters, optimizer
//! accumulators, epoch counter and the best dev error seen. Parameter
//! bytes are stored raw, so reloading reproduces the forward pass
//! bit-exactly at the same precision.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};

use arsg::nn::graph::{ParamKind, ParamStore};
use arsg::nn::tensor::{Real, Tensor};
use arsg::optim::AdaDelta;

use crate::config::RunConfig;

const MAGIC: &[u8; 8] = b"ARSGCKPT";
const VERSION: u32 = 1;

pub struct Checkpoint {
    pub config: RunConfig,
    pub epoch: usize,
    pub best_cer: Option<f64>,
    pub params: Vec<(String, u8, Vec<usize>, Vec<Real>)>,
    pub opt_rho: f64,
    pub opt_eps: f64,
    pub acc_grad: Vec<Vec<Real>>,
    pub acc_update: Vec<Vec<Real>>,
}

fn kind_code(kind: ParamKind) -> u8 {
    match kind {
        ParamKind::Weight => 0,
        ParamKind::ConvKernel => 1,
        ParamKind::Bias => 2,
        ParamKind::Embedding => 3,
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.buf.extend_from_slice(b);
    }
    fn reals(&mut self, vs: &[Real]) {
        self.u64(vs.len() as u64);
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            bail!("checkpoint truncated");
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
    fn reals(&mut self) -> Result<Vec<Real>> {
        let n = self.u64()? as usize;
        let width = std::mem::size_of::<Real>();
        let raw = self.take(n * width)?;
        Ok(raw
            .chunks_exact(width)
            .map(|c| Real::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn save(
    path: &Path,
    config: &RunConfig,
    store: &ParamStore,
    opt: &AdaDelta,
    epoch: usize,
    best_cer: Option<f64>,
) -> Result<()> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.buf.push(std::mem::size_of::<Real>() as u8);
    w.bytes(config.to_toml().as_bytes());
    w.u64(epoch as u64);
    w.f64(best_cer.unwrap_or(f64::NAN));
    w.u32(store.len() as u32);
    for p in store.iter() {
        w.bytes(p.name.as_bytes());
        w.buf.push(kind_code(p.kind));
        w.buf.push(p.value.shape().len() as u8);
        for &d in p.value.shape() {
            w.u32(d as u32);
        }
        w.reals(p.value.data());
    }
    w.f64(opt.rho() as f64);
    w.f64(opt.eps() as f64);
    let (acc_g, acc_dx) = opt.accumulators();
    for t in acc_g.iter().chain(acc_dx.iter()) {
        w.reals(t.data());
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)
        .with_context(|| format!("creating checkpoint {}", tmp.display()))?;
    f.write_all(&w.buf)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .with_context(|| format!("opening checkpoint {}", path.display()))?
        .read_to_end(&mut bytes)?;
    let mut r = Reader {
        buf: &bytes,
        pos: 0,
    };
    if r.take(8)? != MAGIC {
        bail!("not a checkpoint file: {}", path.display());
    }
    let version = r.u32()?;
    if version != VERSION {
        bail!("unsupported checkpoint version {version}");
    }
    let width = r.take(1)?[0] as usize;
    if width != std::mem::size_of::<Real>() {
        bail!(
            "checkpoint precision is {} bytes but this build uses {}",
            width,
            std::mem::size_of::<Real>()
        );
    }
    let config = RunConfig::from_toml(
        std::str::from_utf8(r.bytes()?).context("checkpoint config is not UTF-8")?,
    )?;
    let epoch = r.u64()? as usize;
    let best = r.f64()?;
    let best_cer = if best.is_nan() { None } else { Some(best) };
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name = String::from_utf8(r.bytes()?.to_vec()).context("parameter name")?;
        let kind = r.take(1)?[0];
        let ndim = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let data = r.reals()?;
        params.push((name, kind, shape, data));
    }
    let opt_rho = r.f64()?;
    let opt_eps = r.f64()?;
    let mut acc_grad = Vec::with_capacity(count);
    for _ in 0..count {
        acc_grad.push(r.reals()?);
    }
    let mut acc_update = Vec::with_capacity(count);
    for _ in 0..count {
        acc_update.push(r.reals()?);
    }
    Ok(Checkpoint {
        config,
        epoch,
        best_cer,
        params,
        opt_rho,
        opt_eps,
        acc_grad,
        acc_update,
    })
}

/// Copy checkpointed values into a freshly constructed parameter store.
/// Names, shapes and order must match the architecture exactly.
pub fn restore_params(ckpt: &Checkpoint, store: &mut ParamStore) -> Result<()> {
    if ckpt.params.len() != store.len() {
        bail!(
            "checkpoint has {} parameters but the model has {}",
            ckpt.params.len(),
            store.len()
        );
    }
    let ids: Vec<_> = store.ids().collect();
    for (id, (name, kind, shape, data)) in ids.into_iter().zip(&ckpt.params) {
        let p = store.get_mut(id);
        if &p.name != name || p.value.shape() != shape.as_slice() || kind_code(p.kind) != *kind {
            bail!(
                "checkpoint parameter {} does not match model parameter {}",
                name,
                p.name
            );
        }
        p.value.data_mut().copy_from_slice(data);
    }
    Ok(())
}

/// Rebuild the optimizer state recorded in a checkpoint.
pub fn restore_optimizer(ckpt: &Checkpoint, store: &ParamStore) -> Result<AdaDelta> {
    let mut opt = AdaDelta::new(store, ckpt.opt_rho as Real, ckpt.opt_eps as Real);
    let to_tensors = |flat: &[Vec<Real>]| -> Result<Vec<Tensor>> {
        store
            .iter()
            .zip(flat)
            .map(|(p, data)| {
                Tensor::from_vec(p.value.shape(), data.clone()).map_err(anyhow::Error::from)
            })
            .collect()
    };
    opt.restore_accumulators(to_tensors(&ckpt.acc_grad)?, to_tensors(&ckpt.acc_update)?)?;
    Ok(opt)
}
