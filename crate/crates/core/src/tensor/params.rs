use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use super::{Gradients, Graph, Result, Scalar, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq)]
struct Param<T> {
    value: Tensor<T>,
    m: Vec<T>,
    v: Vec<T>,
}

/// Ordered named parameters with Adam moments and a step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T = f32> {
    params: IndexMap<String, Param<T>>,
    step: u64,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Graph handles for every parameter of a store, in store order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: IndexMap<String, Var>,
}

impl ParamVars {
    /// Handle for `name`. Panics on an unknown name, which is a programming error.
    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(&v) => v,
            None => panic!("parameter `{name}` is not registered"),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Gradient per parameter, in store order; parameters the loss does not
    /// reach get zeros.
    pub fn collect<T: Scalar>(&self, graph: &Graph<T>, grads: &mut Gradients<T>) -> Vec<Vec<T>> {
        self.vars
            .values()
            .map(|&v| grads.take(v).unwrap_or_else(|| vec![T::zero(); graph.value(v).len()]))
            .collect()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: IndexMap::new(), step: 0 }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let n = value.len();
        self.params.insert(name.into(), Param { value, m: vec![T::zero(); n], v: vec![T::zero(); n] });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar parameter count.
    pub fn num_params(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn moments(&self, name: &str) -> Option<(&[T], &[T])> {
        self.params.get(name).map(|p| (p.m.as_slice(), p.v.as_slice()))
    }

    pub fn set_moments(&mut self, name: &str, m: Vec<T>, v: Vec<T>) -> Result<()> {
        let p = self.params.get_mut(name).ok_or_else(|| TensorError::ShapeMismatch { op: "set_moments", detail: format!("unknown parameter {name}") })?;
        if m.len() != p.value.len() || v.len() != p.value.len() {
            return Err(TensorError::ShapeMismatch { op: "set_moments", detail: format!("{name}: {} / {} vs {}", m.len(), v.len(), p.value.len()) });
        }
        p.m = m;
        p.v = v;
        Ok(())
    }

    /// Adds every parameter to `graph` as a leaf.
    pub fn register(&self, graph: &mut Graph<T>, trainable: bool) -> ParamVars {
        let vars = self.params.iter().map(|(k, p)| (k.clone(), graph.leaf(p.value.clone(), trainable))).collect();
        ParamVars { vars }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    let conv = |xs: &[T]| xs.iter().map(|x| U::of(x.as_f64())).collect();
                    (k.clone(), Param { value: p.value.cast(), m: conv(&p.m), v: conv(&p.v) })
                })
                .collect(),
            step: self.step,
        }
    }

    /// One bias-corrected Adam step. `grads` is in store order.
    pub fn adam_step(&mut self, grads: &[Vec<T>], lr: f64, cfg: AdamConfig) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(TensorError::ShapeMismatch { op: "adam_step", detail: format!("{} gradients for {} parameters", grads.len(), self.params.len()) });
        }
        for ((name, p), g) in self.params.iter().zip(grads) {
            if g.len() != p.value.len() {
                return Err(TensorError::ShapeMismatch { op: "adam_step", detail: format!("{name}: {} vs {}", g.len(), p.value.len()) });
            }
            if !g.iter().all(|x| x.is_finite()) {
                return Err(TensorError::NonFiniteValue(format!("gradient of {name}")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let bc1 = T::of(1.0 - cfg.beta1.powi(t));
        let bc2 = T::of(1.0 - cfg.beta2.powi(t));
        let (lr, eps) = (T::of(lr), T::of(cfg.eps));
        for (p, g) in self.params.values_mut().zip(grads) {
            let w = p.value.data_mut();
            for i in 0..g.len() {
                p.m[i] = b1 * p.m[i] + (T::one() - b1) * g[i];
                p.v[i] = b2 * p.v[i] + (T::one() - b2) * g[i] * g[i];
                let mhat = p.m[i] / bc1;
                let vhat = p.v[i] / bc2;
                w[i] = w[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        for (name, p) in &self.params {
            if !p.value.all_finite() {
                return Err(TensorError::NonFiniteValue(format!("parameter {name} after update")));
            }
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and values (not optimizer state).
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in &self.params {
            h.update(name.as_bytes());
            h.update([0u8]);
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &x in p.value.data() {
                h.update(x.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

pub fn global_norm<T: Scalar>(grads: &[Vec<T>]) -> f64 {
    grads.iter().flatten().map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        grads.iter_mut().flatten().for_each(|g| *g = *g * s);
    }
    norm
}

/// Linearly decayed learning rate for update `index` of `total`.
pub fn lr_schedule(index: usize, total: usize, base_lr: f64) -> f64 {
    if total == 0 {
        return base_lr;
    }
    base_lr * (1.0 - index as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(&[values.len()], values.to_vec()).unwrap());
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut s = store(&[1.0, -2.0]);
        s.adam_step(&[vec![0.0, 0.0]], 1e-3, AdamConfig::default()).unwrap();
        assert_eq!(s.get("w").unwrap().data(), &[1.0, -2.0]);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = store(&[0.0]);
        s.adam_step(&[vec![1.0]], 2.5e-4, AdamConfig::default()).unwrap();
        let delta = s.get("w").unwrap().data()[0];
        // m_hat = 1, v_hat = 1, so delta = -lr / (1 + eps).
        assert!((delta + 2.5e-4 / (1.0 + 1e-8)).abs() < 1e-18);
    }

    #[test]
    fn constant_gradient_update_tends_to_lr_sign() {
        let mut s = store(&[0.0]);
        let mut prev = 0.0;
        let mut last = 0.0;
        for _ in 0..5000 {
            s.adam_step(&[vec![-3.0]], 1e-3, AdamConfig::default()).unwrap();
            let now = s.get("w").unwrap().data()[0];
            last = now - prev;
            prev = now;
        }
        assert!((last - 1e-3).abs() < 1e-8);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut s = store(&[0.0]);
        assert!(matches!(s.adam_step(&[vec![f64::NAN]], 1e-3, AdamConfig::default()), Err(TensorError::NonFiniteValue(_))));
        assert_eq!(s.step(), 0);
    }

    #[test]
    fn clipping_cases() {
        let mut small = vec![vec![0.3f64, 0.0]];
        clip_global_norm(&mut small, 0.5);
        assert_eq!(small[0], vec![0.3, 0.0]);

        let mut big = vec![vec![3.0f64], vec![4.0]];
        assert_eq!(clip_global_norm(&mut big, 0.5), 5.0);
        assert!((global_norm(&big) - 0.5).abs() < 1e-15);

        let mut zero = vec![vec![0.0f64; 3]];
        clip_global_norm(&mut zero, 0.5);
        assert_eq!(zero[0], vec![0.0; 3]);
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_schedule(0, 100, 2.5e-4), 2.5e-4);
        assert!((lr_schedule(50, 100, 2.5e-4) - 1.25e-4).abs() < 1e-18);
        assert!((lr_schedule(99, 100, 2.5e-4) - 2.5e-4 / 100.0).abs() < 1e-18);
    }

    #[test]
    fn digest_tracks_values() {
        let a = store(&[1.0, 2.0]);
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.get_mut("w").unwrap().data_mut()[1] = 2.5;
        assert_ne!(a.digest(), b.digest());
    }
}
