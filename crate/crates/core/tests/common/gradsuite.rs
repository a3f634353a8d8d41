//! Randomized finite-difference cases for every differentiable primitive.

use rand::Rng;
use splitfed::data::soft_dice_loss;
use splitfed::tensor::ops::{self, Conv2dArgs, NormMode, RunningStats};

use super::{gradcheck, random_param, rng};

pub struct CaseResult {
    pub primitive: &'static str,
    pub seed: u64,
    pub rel_err: f64,
}

pub const PRIMITIVES: &[&str] = &[
    "conv2d",
    "conv_transpose2d",
    "max_pool2d",
    "max_unpool2d",
    "batch_norm2d",
    "relu",
    "prelu",
    "sigmoid",
    "softmax_channel",
    "concat_channels",
    "upsample_bilinear",
    "linear",
    "mul_broadcast",
    "global_avg_pool",
    "add",
    "soft_dice_loss",
];

/// Runs `per_primitive` seeded cases of each primitive.
pub fn run(per_primitive: usize) -> Vec<CaseResult> {
    let mut results = Vec::new();
    for (p_idx, &name) in PRIMITIVES.iter().enumerate() {
        for k in 0..per_primitive {
            let seed = (p_idx as u64) << 32 | k as u64;
            results.push(CaseResult { primitive: name, seed, rel_err: case(name, seed) });
        }
    }
    results
}

fn case(name: &str, seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.gen_range(1..=2);
    let c = r.gen_range(1..=3);
    match name {
        "conv2d" => {
            let k = [1, 3][r.gen_range(0..2)];
            let args = Conv2dArgs::new(r.gen_range(1..=2), r.gen_range(0..=2), r.gen_range(1..=2));
            let o = r.gen_range(1..=3);
            let h = r.gen_range(5..=7);
            let x = random_param(&mut r, &[n, c, h, h]);
            let w = random_param(&mut r, &[o, c, k, k]);
            let b = random_param(&mut r, &[o]);
            gradcheck(&[x, w, b], seed, &|t| ops::conv2d(&t[0], &t[1], Some(&t[2]), args).unwrap())
        }
        "conv_transpose2d" => {
            let k = r.gen_range(1..=3);
            let s = r.gen_range(1..=2);
            let p = r.gen_range(0..k);
            let o = r.gen_range(1..=3);
            let h = r.gen_range(2..=4);
            let x = random_param(&mut r, &[n, c, h, h]);
            let w = random_param(&mut r, &[c, o, k, k]);
            let b = random_param(&mut r, &[o]);
            gradcheck(&[x, w, b], seed, &|t| ops::conv_transpose2d(&t[0], &t[1], Some(&t[2]), s, p).unwrap())
        }
        "max_pool2d" => {
            let h = 2 * r.gen_range(1..=3);
            let x = random_param(&mut r, &[n, c, h, h]);
            gradcheck(&[x], seed, &|t| ops::max_pool2d(&t[0], 2, 2).unwrap().0)
        }
        "max_unpool2d" => {
            let h = 2 * r.gen_range(1..=3);
            let src = random_param(&mut r, &[n, c, h, h]);
            let (_, idx) = ops::max_pool2d(&src, 2, 2).unwrap();
            let y = random_param(&mut r, &[n, c, h / 2, h / 2]);
            gradcheck(&[y], seed, &move |t| ops::max_unpool2d(&t[0], &idx, (h, h)).unwrap())
        }
        "batch_norm2d" => {
            let n = r.gen_range(2..=3);
            let h = r.gen_range(2..=3);
            let x = random_param(&mut r, &[n, c, h, h]);
            let g = random_param(&mut r, &[c]);
            let b = random_param(&mut r, &[c]);
            let train = r.gen_bool(0.7);
            let stats = RunningStats::<f64>::new(c);
            stats.mean.data_mut().iter_mut().for_each(|v| *v = 0.1);
            stats.var.data_mut().iter_mut().for_each(|v| *v = 1.5);
            let mode = if train { NormMode::Train } else { NormMode::Eval };
            // Eval-mode stats must stay fixed across probes.
            gradcheck(&[x, g, b], seed, &move |t| {
                let s = if train { RunningStats::new(c) } else { stats.clone() };
                ops::batch_norm2d(&t[0], &t[1], &t[2], &s, mode, 0.1, 1e-5).unwrap()
            })
        }
        "relu" => {
            let x = random_param(&mut r, &[n, c, 3, 3]);
            gradcheck(&[x], seed, &|t| ops::relu(&t[0]))
        }
        "prelu" => {
            let x = random_param(&mut r, &[n, c, 3, 3]);
            let a = random_param(&mut r, &[c]);
            gradcheck(&[x, a], seed, &|t| ops::prelu(&t[0], &t[1]).unwrap())
        }
        "sigmoid" => {
            let x = random_param(&mut r, &[n, c, 2, 3]);
            gradcheck(&[x], seed, &|t| ops::sigmoid(&t[0]))
        }
        "softmax_channel" => {
            let c = r.gen_range(2..=4);
            let x = random_param(&mut r, &[n, c, 2, 2]);
            gradcheck(&[x], seed, &|t| ops::softmax_channel(&t[0]).unwrap())
        }
        "concat_channels" => {
            let a = random_param(&mut r, &[n, c, 2, 3]);
            let c2 = r.gen_range(1..=3);
            let b = random_param(&mut r, &[n, c2, 2, 3]);
            gradcheck(&[a, b], seed, &|t| ops::concat_channels(t).unwrap())
        }
        "upsample_bilinear" => {
            let s = r.gen_range(1..=3);
            let (h, w) = (r.gen_range(1..=3), r.gen_range(1..=3));
            let x = random_param(&mut r, &[n, c, h, w]);
            gradcheck(&[x], seed, &move |t| ops::upsample_bilinear(&t[0], s).unwrap())
        }
        "linear" => {
            let f = r.gen_range(1..=4);
            let g = r.gen_range(1..=4);
            let x = random_param(&mut r, &[n, f]);
            let w = random_param(&mut r, &[f, g]);
            let b = random_param(&mut r, &[g]);
            gradcheck(&[x, w, b], seed, &|t| ops::linear(&t[0], &t[1], Some(&t[2])).unwrap())
        }
        "mul_broadcast" => {
            let x = random_param(&mut r, &[n, c, 3, 2]);
            let gate_shape = if r.gen_bool(0.5) { [n, 1, 3, 2] } else { [n, c, 1, 1] };
            let g = random_param(&mut r, &gate_shape);
            gradcheck(&[x, g], seed, &|t| ops::mul_broadcast(&t[0], &t[1]).unwrap())
        }
        "global_avg_pool" => {
            let x = random_param(&mut r, &[n, c, 3, 3]);
            gradcheck(&[x], seed, &|t| ops::global_avg_pool(&t[0]).unwrap())
        }
        "add" => {
            let a = random_param(&mut r, &[n, c, 2, 2]);
            let b = random_param(&mut r, &[n, c, 2, 2]);
            gradcheck(&[a, b], seed, &|t| ops::add(&t[0], &t[1]).unwrap())
        }
        "soft_dice_loss" => {
            let classes = r.gen_range(2..=4);
            let (h, w) = (3, 3);
            let logits = random_param(&mut r, &[n, classes, h, w]);
            let mask: Vec<u8> = (0..n * h * w).map(|_| r.gen_range(0..classes) as u8).collect();
            gradcheck(&[logits], seed, &move |t| soft_dice_loss(&ops::softmax_channel(&t[0]).unwrap(), &mask, false).unwrap())
        }
        other => unreachable!("unknown primitive {other}"),
    }
}
