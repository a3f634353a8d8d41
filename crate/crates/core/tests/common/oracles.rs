//! Counting and enumeration oracles. Each check panics on the first mismatch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splitfed::analysis::{recommend_split, RecommendError, SplitConstraints};
use splitfed::data::{iou_report, soft_dice_loss, DICE_EPS};
use splitfed::engine::fedavg;
use splitfed::model::{build, split_graph, ModelGraph, NetConfig, Network, SplitPlan};
use splitfed::{Tensor, TensorData};

/// Bit `i` of `bits` as a binary mask of `len` pixels.
fn mask(bits: u32, len: usize) -> Vec<u8> {
    (0..len).map(|i| (bits >> i & 1) as u8).collect()
}

fn each_pair(len: usize, mut f: impl FnMut(u32, u32)) {
    for p in 0..1u32 << len {
        for g in 0..1u32 << len {
            f(p, g);
        }
    }
}

/// Every pair of 2x2 and 3x3 binary masks; returns the number of pairs.
pub fn iou_exhaustive() -> usize {
    let mut pairs = 0;
    for len in [4, 9] {
        let full = (1u32 << len) - 1;
        each_pair(len, |p, g| {
            let r = iou_report(&mask(p, len), &mask(g, len), 2, &[1]);
            for (class, (pc, gc)) in [(p ^ full, g ^ full), (p, g)].into_iter().enumerate() {
                let union = (pc | gc).count_ones();
                let want = if union == 0 { 1.0 } else { (pc & gc).count_ones() as f64 / union as f64 };
                assert_eq!(r.per_class[class], want, "len {len} p {p:b} g {g:b} class {class}");
            }
            assert_eq!(r.mean_iou, r.per_class[1]);
            pairs += 1;
        });
    }
    pairs
}

pub fn dice_exhaustive() -> usize {
    let mut pairs = 0;
    for len in [4, 9] {
        let full = (1u32 << len) - 1;
        let dice = |a: u32, b: u32| (2.0 * (a & b).count_ones() as f64 + DICE_EPS) / ((a.count_ones() + b.count_ones()) as f64 + DICE_EPS);
        each_pair(len, |p, g| {
            // One-hot probabilities of the prediction, laid out (1, 2, len, 1).
            let mut probs: Vec<f64> = mask(p ^ full, len).into_iter().map(f64::from).collect();
            probs.extend(mask(p, len).into_iter().map(f64::from));
            let t = Tensor::<f64>::from_vec(&[1, 2, len, 1], probs).unwrap();
            let fg = soft_dice_loss(&t, &mask(g, len), false).unwrap().item();
            let all = soft_dice_loss(&t, &mask(g, len), true).unwrap().item();
            let d1 = dice(p, g);
            let d0 = dice(p ^ full, g ^ full);
            assert!((fg - (1.0 - d1)).abs() < 1e-12, "len {len} p {p:b} g {g:b}");
            assert!((all - (1.0 - (d0 + d1) / 2.0)).abs() < 1e-12);
            pairs += 1;
        });
    }
    pairs
}

/// Random uploads against an element-by-element f64 weighted mean, compared
/// with exact equality.
pub fn fedavg_oracle(trials: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..trials {
        let clients = rng.gen_range(1..=6);
        let shapes: Vec<Vec<usize>> = (0..rng.gen_range(1..=4)).map(|_| (0..rng.gen_range(0..=3)).map(|_| rng.gen_range(1..=4)).collect()).collect();
        let uploads: Vec<(Vec<(String, TensorData<f32>)>, u64)> = (0..clients)
            .map(|_| {
                let entries = shapes
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        let n = s.iter().product();
                        (format!("p{i}"), TensorData { shape: s.clone(), data: (0..n).map(|_| rng.gen_range(-4.0f32..4.0)).collect() })
                    })
                    .collect();
                (entries, rng.gen_range(1..=500))
            })
            .collect();
        let got = fedavg(&uploads).unwrap();
        let total: f64 = uploads.iter().map(|u| u.1 as f64).sum();
        for (k, (name, t)) in got.iter().enumerate() {
            assert_eq!(name, &format!("p{k}"));
            for j in 0..t.data.len() {
                let mut acc = 0.0f64;
                for (entries, count) in &uploads {
                    acc += *count as f64 * entries[k].1.data[j] as f64;
                }
                assert_eq!(t.data[j], (acc / total) as f32);
            }
        }
    }
    trials
}

pub fn shipped() -> Vec<ModelGraph> {
    Network::ALL.into_iter().map(|n| build(n, &NetConfig::default()).unwrap()).collect()
}

/// Wire bytes per sample and client MAC share of every valid plan, from the
/// partitions' own cut signatures.
fn brute_force(g: &ModelGraph) -> Vec<(SplitPlan, u64, f64)> {
    let macs = g.stage_macs(g.meta.input_shape()).unwrap();
    let total: u64 = macs.iter().sum();
    SplitPlan::enumerate(g.num_stages())
        .into_iter()
        .filter_map(|plan| {
            let [fe, server, be] = split_graph(g, plan).ok()?;
            let wire: usize = server.cut_inputs.iter().chain(&server.cut_outputs).map(|c| c.wire_bytes_per_sample(4)).sum();
            let client: u64 = fe.range.clone().chain(be.range.clone()).map(|s| macs[s]).sum();
            Some((plan, 2 * wire as u64, client as f64 / total as f64))
        })
        .collect()
}

fn oracle_argmin(g: &ModelGraph, max_share: f64) -> Option<SplitPlan> {
    let mut cands: Vec<_> = brute_force(g).into_iter().filter(|c| c.2 <= max_share).collect();
    cands.sort_by(|a, b| a.1.cmp(&b.1).then(a.2.total_cmp(&b.2)).then(a.0.fe_last.cmp(&b.0.fe_last)).then(a.0.be_first.cmp(&b.0.be_first)));
    cands.first().map(|c| c.0)
}

/// `recommend_split` against the enumeration argmin on every shipped graph
/// under several share bounds; returns the number of comparisons.
pub fn recommend_matches_enumeration() -> usize {
    let mut checked = 0;
    for g in shipped() {
        for share in [1.0, 0.6, 0.4, 0.25, 0.15] {
            let k = SplitConstraints { max_client_mac_share: Some(share), max_cut_bytes: None };
            match (recommend_split(&g, &k), oracle_argmin(&g, share)) {
                (Ok(r), Some(p)) => assert_eq!(r.plan, p, "{} share {share}", g.meta.network),
                (Err(RecommendError::Infeasible(_)), None) => {}
                (got, want) => panic!("{} share {share}: {got:?} vs {want:?}", g.meta.network),
            }
            checked += 1;
        }
        let free = recommend_split(&g, &SplitConstraints::default()).unwrap();
        assert_eq!(Some(free.plan), oracle_argmin(&g, f64::INFINITY));
        checked += 1;
    }
    checked
}
