#![allow(dead_code)]

pub mod gradsuite;
pub mod oracles;
pub mod wire;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splitfed::tensor::ops;
use splitfed::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn random_param(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::parameter(shape, random_vec(rng, n)).unwrap()
}

/// Norm-wise relative error `|a - b| / (|a| + |b|)`, 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

/// Compares reverse-mode gradients of `L = <f(inputs), r>` (random projection
/// `r`) against central finite differences for every input. Returns the worst
/// relative error. Only `f`'s forward values enter the numeric side.
pub fn gradcheck(
    inputs: &[Tensor<f64>],
    seed: u64,
    f: &dyn Fn(&[Tensor<f64>]) -> Tensor<f64>,
) -> f64 {
    let out = f(inputs);
    let mut r = rng(seed ^ 0x5eed);
    let proj = random_vec(&mut r, out.numel());
    let loss = |o: &Tensor<f64>| -> f64 { o.data().iter().zip(&proj).map(|(a, b)| a * b).sum() };
    for t in inputs {
        t.zero_grad();
    }
    out.backward_with(proj.clone()).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for t in inputs.iter().filter(|t| t.requires_grad()) {
        let analytic = t.grad().unwrap_or_else(|| vec![0.0; t.numel()]);
        let mut numeric = vec![0.0; t.numel()];
        for i in 0..t.numel() {
            let orig = t.data()[i];
            t.data_mut()[i] = orig + h;
            let plus = loss(&f(inputs));
            t.data_mut()[i] = orig - h;
            let minus = loss(&f(inputs));
            t.data_mut()[i] = orig;
            numeric[i] = (plus - minus) / (2.0 * h);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

pub fn inner(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    ops::sum(&ops::mul(a, b).unwrap()).item()
}

/// Uniform random images and masks.
pub fn random_batch<T: splitfed::Scalar>(seed: u64, n: usize, hw: usize, classes: usize) -> (splitfed::TensorData<T>, Vec<u8>) {
    let mut r = rng(seed);
    let image = (0..n * 3 * hw * hw).map(|_| T::from_f64_lossy(r.gen_range(0.0..1.0))).collect();
    let mask = (0..n * hw * hw).map(|_| r.gen_range(0..classes) as u8).collect();
    (splitfed::TensorData::new(vec![n, 3, hw, hw], image).unwrap(), mask)
}
