use std::path::Path;

use sha2::{Digest, Sha256};

use super::{MetricsRecord, NetId, ReplayBuffer, Trainer, TrainingConfig};
use crate::bytes::{put_scalars, put_u32, put_u64, ByteReader};
use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::models::NetworkHandle;
use crate::nn::Tensor;
use crate::optim::OptimizerState;
use crate::scalar::{DType, Scalar};

const MAGIC: &[u8; 4] = b"MSCK";
const VERSION: u32 = 1;

// Layout: magic, version, dtype, config text, shape, counters, networks,
// optimizers, replay buffers, metrics, then an 8-byte sha256 prefix of
// everything before it.
fn encode<T: Scalar>(t: &Trainer<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, T::DTYPE.code());
    let cfg = t.cfg.to_kv();
    put_u64(&mut out, cfg.len() as u64);
    out.extend_from_slice(cfg.as_bytes());
    put_u32(&mut out, t.num_classes as u32);
    put_u32(&mut out, t.image_size as u32);
    for v in [t.epoch, t.iter_in_epoch, t.iteration, t.assistant_cursor] {
        put_u64(&mut out, v);
    }
    put_u64(&mut out, t.best_score.to_bits());
    put_u64(&mut out, t.epochs_since_best);
    put_u32(&mut out, t.stopped as u32);
    for net in &t.nets {
        out.extend_from_slice(&net.to_bytes());
    }
    for opt in &t.opts {
        opt.write(&mut out);
    }
    for pool in [&t.pool_t, &t.pool_a] {
        put_u64(&mut out, pool.capacity() as u64);
        put_u64(&mut out, pool.len() as u64);
        for img in pool.images() {
            put_scalars(&mut out, &img.data);
        }
    }
    put_u64(&mut out, t.metrics.len() as u64);
    for m in &t.metrics {
        put_u64(&mut out, m.iteration);
        put_u64(&mut out, m.epoch);
        for v in m.report.values() {
            put_u64(&mut out, v.to_bits());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest[..8]);
    out
}

fn decode<T: Scalar>(bytes: &[u8]) -> Result<Trainer<T>> {
    let bad = Error::Checkpoint;
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("not a trainer checkpoint".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let mut r = ByteReader::new(body);
    r.take(4).map_err(bad)?;
    let version = r.u32().map_err(bad)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    if Sha256::digest(body)[..8] != *tail {
        return Err(Error::Checkpoint("checksum mismatch (truncated or corrupted file)".into()));
    }
    let dtype = DType::from_code(r.u32().map_err(bad)?);
    if dtype != Some(T::DTYPE) {
        return Err(Error::Checkpoint(format!(
            "scalar type mismatch: file {dtype:?}, expected {:?}",
            T::DTYPE
        )));
    }
    let n = r.u64().map_err(bad)? as usize;
    let text = std::str::from_utf8(r.take(n).map_err(bad)?)
        .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
    let cfg = TrainingConfig::from_kv(text)?;
    let num_classes = r.u32().map_err(bad)? as usize;
    let image_size = r.u32().map_err(bad)? as usize;
    let mut t = Trainer::<T>::new(cfg, num_classes, image_size)?;
    let mut c = [0u64; 4];
    for v in &mut c {
        *v = r.u64().map_err(bad)?;
    }
    [t.epoch, t.iter_in_epoch, t.iteration, t.assistant_cursor] = c;
    t.best_score = f64::from_bits(r.u64().map_err(bad)?);
    t.epochs_since_best = r.u64().map_err(bad)?;
    t.stopped = r.u32().map_err(bad)? != 0;
    for id in NetId::ALL {
        let net = NetworkHandle::<T>::read_from(&mut r)?;
        if net.spec() != t.nets[id as usize].spec() {
            return Err(Error::Checkpoint(format!(
                "{} architecture does not match the stored config",
                id.as_str()
            )));
        }
        t.nets[id as usize] = net;
    }
    for id in NetId::ALL {
        t.opts[id as usize] = OptimizerState::read(&mut r, &t.nets[id as usize])?;
    }
    let mut pools = Vec::with_capacity(2);
    for _ in 0..2 {
        let cap = r.u64().map_err(bad)? as usize;
        let len = r.u64().map_err(bad)? as usize;
        if len > cap {
            return Err(Error::Checkpoint("replay buffer overfull".into()));
        }
        let mut images = Vec::with_capacity(len);
        for _ in 0..len {
            let data = r.scalars::<T>().map_err(bad)?;
            images.push(Tensor::from_vec(1, image_size, image_size, data).map_err(|e| bad(e.to_string()))?);
        }
        pools.push(ReplayBuffer::from_parts(cap, images));
    }
    t.pool_a = pools.pop().unwrap();
    t.pool_t = pools.pop().unwrap();
    let count = r.u64().map_err(bad)? as usize;
    let mut metrics = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let iteration = r.u64().map_err(bad)?;
        let epoch = r.u64().map_err(bad)?;
        let mut v = [0f64; 15];
        for x in &mut v {
            *x = f64::from_bits(r.u64().map_err(bad)?);
        }
        let mut report = LossReport::default();
        [
            report.adv_t,
            report.adv_a,
            report.cyc,
            report.idt,
            report.gan_a2t,
            report.gan_t2a,
            report.d_t,
            report.d_a,
            report.sup_syn,
            report.sup_real,
            report.kd_s2r,
            report.kd_r2s,
            report.seg_syn,
            report.seg_real,
            report.total,
        ] = v;
        metrics.push(MetricsRecord {
            iteration,
            epoch,
            report,
        });
    }
    t.metrics = metrics;
    if !r.is_at_end() {
        return Err(Error::Checkpoint("trailing bytes in checkpoint".into()));
    }
    Ok(t)
}

/// Writes the complete trainer state.
pub fn checkpoint_save<T: Scalar>(t: &Trainer<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

/// Restores a trainer written by [`checkpoint_save`]. Truncated or
/// tampered files, version and scalar-type mismatches are errors.
pub fn checkpoint_load<T: Scalar>(path: &Path) -> Result<Trainer<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

impl<T: Scalar> Trainer<T> {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        encode(self)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        decode(bytes)
    }
}
