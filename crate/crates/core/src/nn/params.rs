//! Named parameter storage, gradient accumulation, and Adam.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

/// One named tensor with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub shape: (usize, usize),
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

/// All trainable tensors of a model, keyed by a stable name. BTreeMap
/// keeps iteration order deterministic for optimizer steps and
/// checkpoints.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    entries: BTreeMap<String, Param>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> &Param {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn num_tensors(&self) -> usize {
        self.entries.len()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Insert a tensor with explicit contents (tests, checkpoint load).
    pub fn insert_raw(&mut self, name: &str, shape: (usize, usize), value: Vec<f64>) {
        assert_eq!(value.len(), shape.0 * shape.1, "insert_raw: shape mismatch");
        assert!(
            !self.entries.contains_key(name),
            "duplicate parameter `{name}`"
        );
        let grad = vec![0.0; value.len()];
        self.entries
            .insert(name.to_string(), Param { shape, value, grad });
    }

    /// Linear-layer weight: uniform(−1/√fan_in, +1/√fan_in). `shape`
    /// is (fan_in, fan_out) to match row-vector × matrix application.
    pub fn add_linear(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut StdRng) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("uniform bounds");
        let value = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
        self.insert_raw(name, (fan_in, fan_out), value);
    }

    /// Bias row, initialized to zero.
    pub fn add_bias(&mut self, name: &str, dim: usize) {
        self.insert_raw(name, (1, dim), vec![0.0; dim]);
    }

    /// Embedding table: N(0, 0.02).
    pub fn add_embedding(&mut self, name: &str, rows: usize, dim: usize, rng: &mut StdRng) {
        let dist = Normal::new(0.0, 0.02).expect("normal params");
        let value = (0..rows * dim).map(|_| dist.sample(rng)).collect();
        self.insert_raw(name, (rows, dim), value);
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Accumulate a gradient map produced by `Tape::backward`.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (name, g) in grads.iter() {
            let p = self
                .entries
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient for unknown parameter `{name}`"));
            debug_assert_eq!(p.grad.len(), g.len());
            for (dst, src) in p.grad.iter_mut().zip(g) {
                *dst += src;
            }
        }
    }
}

/// Per-parameter gradients from one backward pass, keyed by name.
/// Summing these across a batch in a fixed order keeps training
/// bit-deterministic regardless of thread count.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: BTreeMap<String, Vec<f64>>,
}

impl Gradients {
    pub fn insert(&mut self, name: String, g: Vec<f64>) {
        self.map.insert(name, g);
    }

    pub fn get(&self, name: &str) -> Option<&Vec<f64>> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.map.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Elementwise sum with another gradient map.
    pub fn add_assign(&mut self, other: &Gradients) {
        for (name, g) in other.iter() {
            match self.map.get_mut(name) {
                Some(dst) => {
                    for (d, s) in dst.iter_mut().zip(g) {
                        *d += s;
                    }
                }
                None => {
                    self.map.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.map.values_mut() {
            g.iter_mut().for_each(|x| *x *= c);
        }
    }
}

/// Adam with bias correction. The optimizer exclusively owns its
/// moment state; one instance per trained model.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Paper-style Transformer settings: β1=0.9, β2=0.98, ε=1e-9.
    pub fn transformer_default() -> Self {
        Adam::new(0.9, 0.98, 1e-9)
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update from the gradients currently accumulated in `store`.
    pub fn step(&mut self, store: &mut ParameterStore, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in store.entries.iter_mut() {
            if let Some(bad) = p.grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite gradient in `{name}` at flat index {bad}"
                )));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; p.value.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; p.value.len()]);
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.value[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
            if let Some(bad) = p.value.iter().position(|x| !x.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite value in `{name}` at flat index {bad} after update"
                )));
            }
        }
        Ok(())
    }
}

/// Inverse-square-root learning-rate schedule with linear warmup,
/// the standard Transformer recipe scaled for a small model:
/// `scale · d_model^−½ · min(step^−½, step · warmup^−1.5)`.
pub fn noam_lr(step: u64, model_dim: usize, warmup: u64, scale: f64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    scale * (model_dim as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_leaves_params_unchanged_after_step() {
        let mut s = ParameterStore::new();
        s.insert_raw("w", (1, 3), vec![1.0, -2.0, 3.0]);
        let before = s.get("w").value.clone();
        let mut opt = Adam::transformer_default();
        opt.step(&mut s, 0.1).unwrap();
        assert_eq!(s.get("w").value, before);
    }

    #[test]
    fn adam_first_step_closed_form() {
        // With constant g=1 and bias correction, the first update is
        // lr · m̂/(√v̂+ε) = lr · 1/(1+ε) ≈ lr.
        let mut s = ParameterStore::new();
        s.insert_raw("w", (1, 1), vec![0.5]);
        s.get_mut("w").grad[0] = 1.0;
        let mut opt = Adam::new(0.9, 0.98, 1e-9);
        opt.step(&mut s, 0.01).unwrap();
        let expected = 0.5 - 0.01 * (1.0 / (1.0 + 1e-9));
        assert!((s.get("w").value[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut s = ParameterStore::new();
            let mut rng = StdRng::seed_from_u64(5);
            s.add_linear("w", 4, 4, &mut rng);
            let mut opt = Adam::transformer_default();
            for step in 0..10 {
                for (i, g) in s.get_mut("w").grad.iter_mut().enumerate() {
                    *g = ((step * 7 + i) as f64).sin();
                }
                opt.step(&mut s, 0.003).unwrap();
            }
            s.get("w").value.clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adam_rejects_nonfinite_gradient() {
        let mut s = ParameterStore::new();
        s.insert_raw("bad", (1, 2), vec![0.0, 0.0]);
        s.get_mut("bad").grad[1] = f64::NAN;
        let mut opt = Adam::transformer_default();
        let err = opt.step(&mut s, 0.1).unwrap_err();
        assert!(err.to_string().contains("bad"));
    }

    #[test]
    fn gradients_add_assign_merges() {
        let mut a = Gradients::default();
        a.insert("x".into(), vec![1.0, 2.0]);
        let mut b = Gradients::default();
        b.insert("x".into(), vec![10.0, 20.0]);
        b.insert("y".into(), vec![5.0]);
        a.add_assign(&b);
        assert_eq!(a.get("x").unwrap(), &[11.0, 22.0]);
        assert_eq!(a.get("y").unwrap(), &[5.0]);
    }

    #[test]
    fn noam_peaks_at_warmup() {
        let lr = |s| noam_lr(s, 64, 400, 1.0);
        assert!(lr(1) < lr(200) && lr(200) < lr(400));
        assert!(lr(400) > lr(800));
        // Linear region: lr(200) = half of lr at warmup.
        assert!((lr(200) - 0.5 * lr(400)).abs() < 1e-12);
    }

    #[test]
    fn init_shapes_and_ranges() {
        let mut s = ParameterStore::new();
        let mut rng = StdRng::seed_from_u64(1);
        s.add_linear("lin", 16, 8, &mut rng);
        s.add_bias("b", 8);
        s.add_embedding("emb", 10, 4, &mut rng);
        assert_eq!(s.get("lin").shape, (16, 8));
        let bound = 1.0 / 4.0;
        assert!(s.get("lin").value.iter().all(|&v| v.abs() <= bound));
        assert!(s.get("b").value.iter().all(|&v| v == 0.0));
        assert_eq!(s.get("emb").shape, (10, 4));
    }
}
