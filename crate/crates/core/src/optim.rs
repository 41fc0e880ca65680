//! Adam with per-network state.

use crate::bytes::{put_scalars, put_u32, put_u64, ByteReader};
use crate::error::{Error, Result};
use crate::models::NetworkHandle;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    /// Standard moment coefficients.
    pub fn standard(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Lower first-moment coefficient customary for adversarial training.
    pub fn adversarial(lr: f64) -> Self {
        Self {
            beta1: 0.5,
            ..Self::standard(lr)
        }
    }
}

/// First/second moment accumulators shaped like the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub config: AdamConfig,
    /// Learning rate in effect; starts at `config.lr`.
    pub lr: f64,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(net: &NetworkHandle<T>, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<T>> = net.params().iter().map(|p| vec![T::zero(); p.len()]).collect();
        Self {
            config,
            lr: config.lr,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One Adam update of `net` with gradient `grads` (one buffer per
    /// parameter tensor).
    pub fn apply(&mut self, net: &mut NetworkHandle<T>, grads: &[Vec<T>]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Input(format!(
                "gradient has {} tensors, optimizer tracks {}",
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let b1 = T::lit(self.config.beta1);
        let b2 = T::lit(self.config.beta2);
        let one = T::one();
        let t = self.step as i32;
        let c1 = one - b1.powi(t);
        let c2 = one - b2.powi(t);
        let step_size = T::lit(self.lr) / c1;
        let c2_sqrt = c2.sqrt();
        let eps = T::lit(self.config.eps);
        for (((p, g), m), v) in net
            .params_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            if g.len() != p.len() {
                return Err(Error::Input("gradient tensor size mismatch".into()));
            }
            for (((w, &gi), mi), vi) in p.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                *w -= step_size * *mi / (vi.sqrt() / c2_sqrt + eps);
            }
        }
        Ok(())
    }

    pub(crate) fn write(&self, out: &mut Vec<u8>) {
        for v in [self.config.lr, self.config.beta1, self.config.beta2, self.config.eps, self.lr] {
            put_u64(out, v.to_bits());
        }
        put_u64(out, self.step);
        put_u32(out, self.m.len() as u32);
        for (m, v) in self.m.iter().zip(&self.v) {
            put_scalars(out, m);
            put_scalars(out, v);
        }
    }

    pub(crate) fn read(r: &mut ByteReader<'_>, net: &NetworkHandle<T>) -> Result<Self> {
        let bad = Error::Checkpoint;
        let mut f = [0f64; 5];
        for x in &mut f {
            *x = f64::from_bits(r.u64().map_err(bad)?);
        }
        let step = r.u64().map_err(bad)?;
        let n = r.u32().map_err(bad)? as usize;
        if n != net.params().len() {
            return Err(Error::Checkpoint("optimizer state does not match network".into()));
        }
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for p in net.params() {
            let mi = r.scalars::<T>().map_err(bad)?;
            let vi = r.scalars::<T>().map_err(bad)?;
            if mi.len() != p.len() || vi.len() != p.len() {
                return Err(Error::Checkpoint("optimizer moment size mismatch".into()));
            }
            m.push(mi);
            v.push(vi);
        }
        if !(f[4] > 0.0) {
            return Err(Error::Checkpoint("non-positive learning rate".into()));
        }
        Ok(Self {
            config: AdamConfig {
                lr: f[0],
                beta1: f[1],
                beta2: f[2],
                eps: f[3],
            },
            lr: f[4],
            step,
            m,
            v,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_network, NetworkSpec};

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut net = build_network::<f64>(NetworkSpec::discriminator(4, 1), 0).unwrap();
        let before = net.clone();
        let mut opt = OptimizerState::new(&net, AdamConfig::standard(1e-3));
        let grads: Vec<Vec<f64>> = net
            .params()
            .iter()
            .map(|p| (0..p.len()).map(|i| if i % 2 == 0 { 0.3 } else { -2.0 }).collect())
            .collect();
        opt.apply(&mut net, &grads).unwrap();
        for (a, b) in net.params().iter().zip(before.params()) {
            for (i, (x, y)) in a.data.iter().zip(&b.data).enumerate() {
                let expect = if i % 2 == 0 { -1e-3 } else { 1e-3 };
                assert!((x - y - expect).abs() < 1e-8);
            }
        }
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn state_round_trip() {
        let mut net = build_network::<f32>(NetworkSpec::discriminator(4, 2), 1).unwrap();
        let mut opt = OptimizerState::new(&net, AdamConfig::adversarial(2e-4));
        let grads: Vec<Vec<f32>> = net.params().iter().map(|p| vec![0.1; p.len()]).collect();
        opt.apply(&mut net, &grads).unwrap();
        let mut buf = Vec::new();
        opt.write(&mut buf);
        let back = OptimizerState::<f32>::read(&mut ByteReader::new(&buf), &net).unwrap();
        assert_eq!(back, opt);
        assert!(OptimizerState::<f32>::read(&mut ByteReader::new(&buf[..buf.len() - 1]), &net).is_err());
    }
}
