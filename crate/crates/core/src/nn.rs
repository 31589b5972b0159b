//! Parameter storage, initialization, and the Adam optimizer.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Named parameter set with deterministic iteration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), t));
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.entries[i].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.entries[i].1
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Copy every entry whose name starts with `prefix` into `dst`,
    /// replacing `prefix` with `new_prefix`. Existing entries with the same
    /// name are overwritten in place (re-initialization is idempotent).
    pub fn copy_prefixed(&self, prefix: &str, dst: &mut ParamStore, new_prefix: &str) {
        for (name, t) in &self.entries {
            if let Some(rest) = name.strip_prefix(prefix) {
                let target = format!("{new_prefix}{rest}");
                if dst.contains(&target) {
                    *dst.get_mut(&target) = t.clone();
                } else {
                    dst.insert(&target, t.clone());
                }
            }
        }
    }

    /// SHA-256 over names, shapes, and little-endian parameter bytes.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex_string(&h.finalize())
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Binds a store's tensors onto a tape as leaves, keeping name -> Var.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn bind(store: &ParamStore, tape: &mut Tape) -> Self {
        let mut vars = BTreeMap::new();
        for (name, t) in store.iter() {
            vars.insert(name.to_string(), tape.leaf(t.clone()));
        }
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

/// Kaiming-style init for conv kernels, Xavier for linear maps.
pub fn init_conv(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

pub fn init_linear(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let fan_in = shape[0];
    Tensor::randn(shape, (1.0 / fan_in as f64).sqrt(), rng)
}

/// `x [m,k] @ w [k,n] + b [n]`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let y = tape.matmul(x, w);
    tape.add_bias_rows(y, b)
}

/// Sinusoidal features of a timestep index, dimension `dim` (even).
pub fn timestep_features(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; dim];
    for i in 0..half {
        let freq = (10_000.0f64).powf(-(i as f64) / half as f64);
        data[i] = (t as f64 * freq).sin();
        data[half + i] = (t as f64 * freq).cos();
    }
    Tensor::new(&[1, dim], data)
}

/// Fixed 2D sinusoidal positional features, `[res*res, dim]` in row-major
/// spatial order. Half the dimensions encode y, half encode x.
pub fn posenc2d(res: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; res * res * dim];
    let half = dim / 2;
    let nfreq = (half / 2).max(1);
    for y in 0..res {
        for x in 0..res {
            let row = (y * res + x) * dim;
            for f in 0..nfreq {
                let freq = std::f64::consts::PI * (res as f64).powf(-(f as f64) / nfreq as f64);
                if 2 * f + 1 < half {
                    data[row + 2 * f] = (y as f64 * freq).sin();
                    data[row + 2 * f + 1] = (y as f64 * freq).cos();
                }
                if half + 2 * f + 1 < dim {
                    data[row + half + 2 * f] = (x as f64 * freq).sin();
                    data[row + half + 2 * f + 1] = (x as f64 * freq).cos();
                }
            }
        }
    }
    Tensor::new(&[res * res, dim], data)
}

/// Distance-decay attention bias, `[res*res, res*res]`: entry (i, j) is
/// `-slope * euclidean_distance(i, j)` over the 2D grid. Added to
/// self-attention logits it makes every row a local kernel that content can
/// modulate but not abandon.
pub fn distance_bias(res: usize, slope: f64) -> Tensor {
    let n = res * res;
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        let (yi, xi) = ((i / res) as f64, (i % res) as f64);
        for j in 0..n {
            let (yj, xj) = ((j / res) as f64, (j % res) as f64);
            let d = ((yi - yj).powi(2) + (xi - xj).powi(2)).sqrt();
            data[i * n + j] = -slope * d;
        }
    }
    Tensor::new(&[n, n], data)
}

/// Adam with bias correction; deterministic given call order.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Apply one step to every `(name, grad)` pair; names absent from
    /// `grads` are left untouched (frozen).
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (name, g) in grads {
            let p = store.get_mut(name);
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for i in 0..g.len() {
                let gi = g.data()[i];
                m.data_mut()[i] = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                v.data_mut()[i] = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m.data()[i] / bc1;
                let vhat = v.data()[i] / bc2;
                p.data_mut()[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Collect gradients for a set of trainable names after `tape.backward`.
pub fn collect_grads(
    tape: &Tape,
    bound: &Bound,
    grads: &crate::tape::Gradients,
    trainable: impl Fn(&str) -> bool,
) -> BTreeMap<String, Tensor> {
    let _ = tape;
    let mut out = BTreeMap::new();
    for (name, var) in bound.iter() {
        if trainable(name) {
            if let Some(g) = grads.wrt(var) {
                out.insert(name.to_string(), g.clone());
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn adam_reduces_quadratic_loss() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(&[2], vec![3.0, -2.0]));
        let mut opt = Adam::new(0.1);
        for _ in 0..300 {
            let w = store.get("w").clone();
            let grad = w.map(|x| 2.0 * x);
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), grad);
            opt.step(&mut store, &grads);
        }
        assert!(store.get("w").max_abs() < 1e-2);
    }

    #[test]
    fn content_hash_changes_with_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut a = ParamStore::new();
        a.insert("x", init_linear(&[4, 4], &mut rng));
        let h1 = a.content_hash();
        a.get_mut("x").data_mut()[0] += 1e-9;
        assert_ne!(h1, a.content_hash());
    }

    #[test]
    fn copy_prefixed_is_independent() {
        let mut a = ParamStore::new();
        a.insert("safe.proj.w", Tensor::new(&[1], vec![1.0]));
        let mut b = ParamStore::new();
        a.copy_prefixed("safe.", &mut b, "crucial.");
        b.get_mut("crucial.proj.w").data_mut()[0] = 5.0;
        assert_eq!(a.get("safe.proj.w").data()[0], 1.0);
    }
}
