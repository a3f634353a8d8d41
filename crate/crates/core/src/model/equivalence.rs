//! Split-versus-monolithic oracle.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::exec::{instantiate, split_model, SubModel};
use super::{ModelGraph, Network, Result, SplitPlan};
use crate::data::soft_dice_loss;
use crate::nn::init::StateKind;
use crate::scalar::Scalar;
use crate::tensor::ops::{softmax_channel, NormMode};
use crate::tensor::optim::{AdamConfig, AdamState};
use crate::tensor::{Tensor, TensorData};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceTolerances {
    pub forward_abs: f64,
    pub grad_rel: f64,
    pub param_abs: f64,
    pub loss_abs: f64,
}

impl Default for EquivalenceTolerances {
    fn default() -> Self {
        Self { forward_abs: 1e-6, grad_rel: 1e-5, param_abs: 1e-5, loss_abs: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub network: Network,
    pub plan: SplitPlan,
    pub steps: usize,
    /// Max |delta| of the first forward's logits.
    pub forward_max_abs: f64,
    /// Worst per-parameter `||g_split - g_mono|| / ||g_mono||` after the first backward.
    pub grad_max_rel: f64,
    /// Max |delta| over every parameter and buffer after `steps` updates.
    pub param_max_abs: f64,
    pub losses_monolithic: Vec<f64>,
    pub losses_split: Vec<f64>,
    pub loss_max_abs: f64,
    pub tolerances: EquivalenceTolerances,
    pub passed: bool,
}

fn max_abs<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x.to_f64().unwrap() - y.to_f64().unwrap()).abs()).fold(0.0, f64::max)
}

fn rel_l2<T: Scalar>(got: &[T], want: &[T]) -> f64 {
    let (mut d, mut n) = (0.0, 0.0);
    for (g, w) in got.iter().zip(want) {
        let (g, w) = (g.to_f64().unwrap(), w.to_f64().unwrap());
        d += (g - w) * (g - w);
        n += w * w;
    }
    if d == 0.0 {
        0.0
    } else {
        d.sqrt() / n.sqrt().max(1e-30)
    }
}

fn named<T: Scalar>(parts: &[&SubModel<T>], kind: Option<StateKind>) -> HashMap<String, Tensor<T>> {
    parts
        .iter()
        .flat_map(|p| p.named_state().iter())
        .filter(|e| kind.map_or(true, |k| e.kind == k))
        .map(|e| (e.name.clone(), e.tensor.clone()))
        .collect()
}

/// Trains a monolithic replica and a split replica built from the same seed
/// side by side for `steps` Adam steps on one batch, comparing logits,
/// gradients, losses and final weights.
pub fn check_split_equivalence<T: Scalar>(
    graph: &ModelGraph,
    plan: SplitPlan,
    seed: u64,
    images: &TensorData<T>,
    masks: &[u8],
    steps: usize,
    adam: AdamConfig,
    tolerances: EquivalenceTolerances,
) -> Result<EquivalenceReport> {
    let whole = instantiate::<T>(graph, seed);
    let split = split_model::<T>(graph, plan, seed)?;
    let mut whole_opt = AdamState::new(&whole.parameters(), adam);
    let mut split_opts: Vec<_> = split.parts().iter().map(|p| AdamState::new(&p.parameters(), adam)).collect();
    let whole_params = named(&[&whole], Some(StateKind::Parameter));
    let split_params = named(&split.parts(), Some(StateKind::Parameter));

    let mut report = EquivalenceReport {
        network: graph.meta.network,
        plan,
        steps,
        forward_max_abs: 0.0,
        grad_max_rel: 0.0,
        param_max_abs: 0.0,
        losses_monolithic: Vec::new(),
        losses_split: Vec::new(),
        loss_max_abs: 0.0,
        tolerances,
        passed: false,
    };
    for step in 0..steps.max(1) {
        let mono = whole.forward(Some(images), &[], NormMode::Train)?;
        let mono_logits = mono.logits().expect("whole emits logits");
        let mono_loss = soft_dice_loss(&softmax_channel(mono_logits)?, masks, false)?;
        mono_loss.backward()?;

        let pass = split.forward(images, NormMode::Train)?;
        let split_loss = soft_dice_loss(&softmax_channel(pass.logits())?, masks, false)?;
        split_loss.backward()?;
        split.backward_relay(&pass)?;

        if step == 0 {
            report.forward_max_abs = max_abs(&pass.logits().data(), &mono_logits.data());
            for (name, p) in &whole_params {
                let q = &split_params[name];
                let (gw, gs) = (p.grad().unwrap_or_default(), q.grad().unwrap_or_default());
                report.grad_max_rel = report.grad_max_rel.max(rel_l2(&gs, &gw));
            }
        }
        report.losses_monolithic.push(mono_loss.item().to_f64().unwrap());
        report.losses_split.push(split_loss.item().to_f64().unwrap());
        if steps == 0 {
            break;
        }
        whole_opt.step(&whole.parameters());
        for (opt, part) in split_opts.iter_mut().zip(split.parts()) {
            opt.step(&part.parameters());
        }
    }
    let whole_state = named(&[&whole], None);
    let split_state = named(&split.parts(), None);
    report.param_max_abs = whole_state.iter().map(|(n, t)| max_abs(&t.data(), &split_state[n].data())).fold(0.0, f64::max);
    report.loss_max_abs = max_abs(&report.losses_monolithic, &report.losses_split);
    report.passed = report.forward_max_abs <= tolerances.forward_abs
        && report.grad_max_rel <= tolerances.grad_rel
        && report.param_max_abs <= tolerances.param_abs
        && report.loss_max_abs <= tolerances.loss_abs;
    Ok(report)
}
