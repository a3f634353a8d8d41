//! Name-keyed parameter initialization.
//!
//! Every parameter draws from its own generator seeded by the global seed and
//! the parameter's full name, so any partition of a network can be built in
//! isolation (another thread, another process) and still hold exactly the
//! weights the monolithic network would.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateKind {
    Parameter,
    Buffer,
}

/// Named tensor owned by a network: a trainable parameter or a buffer such as
/// a batch-norm running statistic.
#[derive(Debug, Clone)]
pub struct NamedTensor<T: Scalar> {
    pub name: String,
    pub kind: StateKind,
    pub tensor: Tensor<T>,
}

/// Creates parameters under a hierarchical name prefix and records them in
/// creation order.
pub struct ParamFactory<T: Scalar> {
    seed: u64,
    prefix: Vec<String>,
    entries: Vec<NamedTensor<T>>,
}

impl<T: Scalar> ParamFactory<T> {
    pub fn new(seed: u64) -> Self {
        Self { seed, prefix: Vec::new(), entries: Vec::new() }
    }

    pub fn push(&mut self, scope: &str) {
        self.prefix.push(scope.to_string());
    }

    pub fn pop(&mut self) {
        self.prefix.pop();
    }

    /// Runs `f` inside `scope`.
    pub fn scoped<R>(&mut self, scope: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.push(scope);
        let r = f(self);
        self.pop();
        r
    }

    fn full_name(&self, leaf: &str) -> String {
        let mut s = self.prefix.join("/");
        if !s.is_empty() {
            s.push('/');
        }
        s.push_str(leaf);
        s
    }

    fn record(&mut self, leaf: &str, kind: StateKind, tensor: Tensor<T>) -> Tensor<T> {
        let name = self.full_name(leaf);
        debug_assert!(self.entries.iter().all(|e| e.name != name), "duplicate parameter name {name}");
        self.entries.push(NamedTensor { name, kind, tensor: tensor.clone() });
        tensor
    }

    /// He/Kaiming-uniform weights: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    pub fn kaiming(&mut self, leaf: &str, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let mut rng = param_rng(self.seed, &self.full_name(leaf));
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound))).collect();
        let t = Tensor::parameter(shape, data).expect("shape matches generated data");
        self.record(leaf, StateKind::Parameter, t)
    }

    pub fn constant(&mut self, leaf: &str, shape: &[usize], value: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let t = Tensor::parameter(shape, vec![T::from_f64_lossy(value); n]).expect("shape matches data");
        self.record(leaf, StateKind::Parameter, t)
    }

    pub fn buffer(&mut self, leaf: &str, shape: &[usize], value: f64) -> Tensor<T> {
        let t = Tensor::full(shape, T::from_f64_lossy(value));
        self.record(leaf, StateKind::Buffer, t)
    }

    pub fn finish(self) -> Vec<NamedTensor<T>> {
        self.entries
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_name_same_weights_across_factories() {
        let mut a = ParamFactory::<f32>::new(7);
        let mut b = ParamFactory::<f32>::new(7);
        b.scoped("other", |f| f.kaiming("w", &[4], 4));
        let wa = a.scoped("enc0", |f| f.kaiming("w", &[3, 3], 9));
        let wb = b.scoped("enc0", |f| f.kaiming("w", &[3, 3], 9));
        assert_eq!(wa.to_vec(), wb.to_vec());
        let mut c = ParamFactory::<f32>::new(8);
        assert_ne!(c.scoped("enc0", |f| f.kaiming("w", &[3, 3], 9)).to_vec(), wa.to_vec());
        let names: Vec<_> = b.finish().into_iter().map(|e| e.name).collect();
        assert_eq!(names, vec!["other/w", "enc0/w"]);
    }

    #[test]
    fn kaiming_bound() {
        let mut f = ParamFactory::<f64>::new(1);
        let w = f.kaiming("w", &[1000], 6);
        assert!(w.to_vec().iter().all(|v| v.abs() < 1.0));
        assert!(w.to_vec().iter().any(|v| v.abs() > 0.9));
    }
}
