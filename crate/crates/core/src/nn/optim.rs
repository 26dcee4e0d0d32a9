use super::params::{read_f64, read_u32, read_u64, round_f32, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const ADAM_BLOB_VERSION: u32 = 1;

/// Adaptive-moment optimizer over a fixed subset of parameter slots.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    ids: Vec<usize>,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, ids: Vec<usize>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let ids: Vec<usize> = ids.into_iter().filter(|&i| store.entry(i).trainable).collect();
        let m = ids.iter().map(|&i| vec![0.0; store.get(i).len()]).collect::<Vec<_>>();
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            v: m.clone(),
            m,
            ids,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update; `grads` is indexed by parameter slot.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (slot, &id) in self.ids.iter().enumerate() {
            let Some(g) = &grads[id] else { continue };
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            round_f32(p);
        }
    }

    /// Versioned little-endian blob: version, step, slot count, then per slot
    /// the slot id, length, first and second moments as `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&ADAM_BLOB_VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        for h in [self.lr, self.beta1, self.beta2, self.eps] {
            out.extend_from_slice(&h.to_le_bytes());
        }
        out.extend_from_slice(&(self.ids.len() as u32).to_le_bytes());
        for (slot, &id) in self.ids.iter().enumerate() {
            out.extend_from_slice(&(id as u32).to_le_bytes());
            out.extend_from_slice(&(self.m[slot].len() as u64).to_le_bytes());
            for &x in self.m[slot].iter().chain(&self.v[slot]) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &mut &[u8]) -> Result<Self> {
        let version = read_u32(bytes)?;
        if version != ADAM_BLOB_VERSION {
            return Err(Error::Format(format!("unsupported optimizer blob version {version}")));
        }
        let step = read_u64(bytes)?;
        let lr = read_f64(bytes)?;
        let beta1 = read_f64(bytes)?;
        let beta2 = read_f64(bytes)?;
        let eps = read_f64(bytes)?;
        let n = read_u32(bytes)? as usize;
        let mut ids = Vec::with_capacity(n);
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            ids.push(read_u32(bytes)? as usize);
            let len = read_u64(bytes)? as usize;
            let mut read = |len| -> Result<Vec<f64>> { (0..len).map(|_| read_f64(bytes)).collect() };
            m.push(read(len)?);
            v.push(read(len)?);
        }
        Ok(Adam {
            lr,
            beta1,
            beta2,
            eps,
            ids,
            step,
            m,
            v,
        })
    }
}

/// Stochastic gradient descent with heavy-ball momentum: `v ← μv + g; p ← p − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(store: &ParamStore, lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: vec![None; store.len()],
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        for (id, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if !store.entry(id).trainable {
                continue;
            }
            let vel = self.velocity[id].get_or_insert_with(|| vec![0.0; g.len()]);
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                vel[i] = self.momentum * vel[i] + g.data()[i];
                p[i] -= self.lr * vel[i];
            }
            round_f32(p);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_blob_round_trips() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(vec![3], vec![0.5, -0.25, 1.0]), true);
        let mut adam = Adam::new(&store, vec![id], 2e-4, 0.5, 0.999);
        let grads = vec![Some(Tensor::new(vec![3], vec![0.1, -0.2, 0.3]))];
        adam.update(&mut store, &grads);
        let bytes = adam.to_bytes();
        let back = Adam::from_bytes(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, adam);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(vec![1], vec![1.0]), true);
        let mut adam = Adam::new(&store, vec![id], 0.125, 0.5, 0.999);
        adam.update(&mut store, &[Some(Tensor::scalar(3.0))]);
        assert!((store.get(id).item() - 0.875).abs() < 1e-6);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(0.0), true);
        let mut sgd = Sgd::new(&store, 0.5, 0.5);
        let g = [Some(Tensor::scalar(1.0))];
        sgd.update(&mut store, &g);
        sgd.update(&mut store, &g);
        // v1 = 1, p1 = -0.5; v2 = 1.5, p2 = -1.25
        assert_eq!(store.get(id).item(), -1.25);
    }
}
