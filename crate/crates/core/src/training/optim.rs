use std::fs;
use std::path::Path;

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};

/// Learning rate at optimizer step `step`: linear warm-up from 0 to `lr_max`
/// over `warmup_steps`, then cosine annealing to 0 at `total_steps`.
pub fn lr_at(step: u64, total_steps: u64, warmup_steps: u64, lr_max: f64) -> f64 {
    if step >= total_steps {
        return 0.0;
    }
    if step < warmup_steps {
        return lr_max * step as f64 / warmup_steps as f64;
    }
    let span = (total_steps - warmup_steps) as f64;
    let progress = (step - warmup_steps) as f64 / span;
    lr_max * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// AdamW with decoupled weight decay applied only to parameters flagged
/// for decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

const STATE_MAGIC: &[u8; 4] = b"ECAW";

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update using the gradients accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::LengthMismatch {
                expected: self.m.len(),
                got: store.len(),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if m.len() != p.value.len() {
                return Err(Error::shape("adamw_step", format!("moments for {} have {} entries", p.name, m.len())));
            }
            let decay = if p.decay { self.weight_decay } else { 0.0 };
            let grads = p.grad.data().to_vec();
            for (((x, g), mi), vi) in p.value.data_mut().iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                *x -= lr * (update + decay * *x);
            }
        }
        Ok(())
    }

    /// Writes step count and moments as little-endian f64.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = STATE_MAGIC.to_vec();
        bytes.extend_from_slice(&self.step.to_le_bytes());
        bytes.extend_from_slice(&(self.m.len() as u64).to_le_bytes());
        for m in &self.m {
            bytes.extend_from_slice(&(m.len() as u64).to_le_bytes());
        }
        for x in self.m.iter().chain(&self.v).flatten() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Restores state saved by [`AdamW::save`]; layout must match `store`.
    pub fn load(&mut self, path: &Path, store: &ParamStore) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 20 || &bytes[..4] != STATE_MAGIC {
            return Err(Error::BadMagic(path.display().to_string()));
        }
        let word = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().expect("8 bytes"));
        let step = word(4);
        let n = word(12) as usize;
        if n != store.len() {
            return Err(Error::LengthMismatch { expected: store.len(), got: n });
        }
        let header = 20 + 8 * n;
        if bytes.len() < header {
            return Err(Error::LengthMismatch { expected: header, got: bytes.len() });
        }
        let lens: Vec<usize> = (0..n).map(|i| word(20 + 8 * i) as usize).collect();
        for ((_, p), len) in store.iter().zip(&lens) {
            if p.value.len() != *len {
                return Err(Error::shape("optimizer state", format!("{}: {} vs {}", p.name, len, p.value.len())));
            }
        }
        let total: usize = lens.iter().sum();
        let expected = header + 16 * total;
        if bytes.len() != expected {
            return Err(Error::LengthMismatch { expected, got: bytes.len() });
        }
        let mut values = bytes[header..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut take = || lens.iter().map(|l| values.by_ref().take(*l).collect()).collect::<Vec<Vec<f64>>>();
        self.m = take();
        self.v = take();
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn scalar_store(p: f64, decay: bool) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(p), decay);
        s
    }

    #[test]
    fn schedule_shape() {
        let (total, warm, lr) = (1000, 100, 5e-5);
        assert_eq!(lr_at(0, total, warm, lr), 0.0);
        assert_eq!(lr_at(warm, total, warm, lr), 5e-5);
        assert!((lr_at(warm - 1, total, warm, lr) - 5e-5 * 0.99).abs() < 1e-18);
        assert!((lr_at(550, total, warm, lr) - 2.5e-5).abs() < 1e-18);
        assert_eq!(lr_at(total, total, warm, lr), 0.0);
        assert!(lr_at(total - 1, total, warm, lr) < 1e-9);
        let left = lr_at(warm - 1, total, warm, lr) + lr / warm as f64;
        assert!((left - lr_at(warm, total, warm, lr)).abs() < 1e-18);
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut s = scalar_store(0.7, true);
        let mut opt = AdamW::new(&s, 0.0);
        opt.step(&mut s, 1e-3).unwrap();
        assert_eq!(s.iter().next().unwrap().1.value.item().unwrap(), 0.7);
    }

    #[test]
    fn first_step_matches_hand_formula() {
        let mut s = scalar_store(1.0, true);
        s.iter_mut().next().unwrap().grad = Tensor::scalar(1.0);
        let mut opt = AdamW::new(&s, 1e-4);
        let lr = 1e-3;
        opt.step(&mut s, lr).unwrap();
        // m = 0.1, v = 0.001; corrected m = 1, v = 1.
        let expect = 1.0 - lr * (1.0 / (1.0 + 1e-8) + 1e-4 * 1.0);
        assert!((s.iter().next().unwrap().1.value.item().unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn decay_only_and_excluded_params() {
        let (lr, wd) = (1e-2, 0.1);
        let mut s = scalar_store(2.0, true);
        let mut opt = AdamW::new(&s, wd);
        opt.step(&mut s, lr).unwrap();
        assert!((s.iter().next().unwrap().1.value.item().unwrap() - 2.0 * (1.0 - lr * wd)).abs() < 1e-15);
        let mut s = scalar_store(2.0, false);
        let mut opt = AdamW::new(&s, wd);
        opt.step(&mut s, lr).unwrap();
        assert_eq!(s.iter().next().unwrap().1.value.item().unwrap(), 2.0);
    }

    #[test]
    fn descends_a_quadratic() {
        let mut s = scalar_store(3.0, false);
        let mut opt = AdamW::new(&s, 0.0);
        for _ in 0..50 {
            let x = s.iter().next().unwrap().1.value.item().unwrap();
            let before = x * x;
            s.iter_mut().next().unwrap().grad = Tensor::scalar(2.0 * x);
            opt.step(&mut s, 1e-2).unwrap();
            let y = s.iter().next().unwrap().1.value.item().unwrap();
            assert!(y * y < before);
        }
    }

    #[test]
    fn state_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::new();
        s.insert("a", Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap(), true);
        s.insert("b", Tensor::scalar(0.5), false);
        for p in s.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.3);
        }
        let mut opt = AdamW::new(&s, 1e-4);
        opt.step(&mut s, 1e-3).unwrap();
        opt.step(&mut s, 1e-3).unwrap();
        let path = dir.path().join("optimizer.bin");
        opt.save(&path).unwrap();
        let mut back = AdamW::new(&s, 1e-4);
        back.load(&path, &s).unwrap();
        assert_eq!(back, opt);

        let mut other = ParamStore::new();
        other.insert("a", Tensor::scalar(1.0), true);
        assert!(back.load(&path, &other).is_err());
        fs::write(&path, b"nope").unwrap();
        assert!(matches!(back.load(&path, &s), Err(Error::BadMagic(_))));
    }
}
