//! Soft Dice loss and IoU.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::{dims4, shape_err, Result, Tensor, TensorError};

pub const DICE_EPS: f64 = 1e-6;

/// Classes averaged by default: everything but background (class 0).
pub fn default_foreground(num_classes: usize) -> Vec<usize> {
    (1..num_classes.max(2)).collect()
}

/// `1 - mean_c d_c`, `d_c = (2 sum p g + eps) / (sum p^2 + sum g^2 + eps)`
/// with sums over the whole batch. `probs` is `(N, C, H, W)` and already
/// normalized over channels; `mask` holds `N * H * W` class ids.
pub fn soft_dice_loss<T: Scalar>(probs: &Tensor<T>, mask: &[u8], include_background: bool) -> Result<Tensor<T>> {
    const OP: &str = "soft_dice_loss";
    let [n, c, h, w] = dims4(OP, probs)?;
    let hw = h * w;
    if mask.len() != n * hw {
        return Err(shape_err(OP, format!("mask has {} pixels, probs {n}x{h}x{w}", mask.len())));
    }
    if let Some(&bad) = mask.iter().find(|&&m| m as usize >= c) {
        return Err(TensorError::Argument { op: OP, detail: format!("class id {bad} >= {c} channels") });
    }
    let first = if include_background || c == 1 { 0 } else { 1 };
    let classes: Vec<usize> = (first..c).collect();
    let eps = T::from_f64_lossy(DICE_EPS);
    let two = T::one() + T::one();
    let p = probs.data();
    // Per class: intersection, sum p^2, sum g^2.
    let mut stats = vec![(T::zero(), T::zero(), T::zero()); c];
    for b in 0..n {
        for (ci, st) in stats.iter_mut().enumerate() {
            let plane = &p[(b * c + ci) * hw..(b * c + ci + 1) * hw];
            let labels = &mask[b * hw..(b + 1) * hw];
            for (&pv, &g) in plane.iter().zip(labels) {
                st.1 += pv * pv;
                if g as usize == ci {
                    st.0 += pv;
                    st.2 += T::one();
                }
            }
        }
    }
    drop(p);
    let k = T::from_usize(classes.len()).unwrap();
    let dice_sum = classes.iter().fold(T::zero(), |acc, &ci| {
        let (i, pp, gg) = stats[ci];
        acc + (two * i + eps) / (pp + gg + eps)
    });
    let loss = T::one() - dice_sum / k;
    let probs_c = probs.clone();
    let mask = mask.to_vec();
    Ok(Tensor::from_op(OP, vec![], vec![loss], vec![probs.clone()], move |g| {
        let p = probs_c.data();
        let mut grad = vec![T::zero(); p.len()];
        for &ci in &classes {
            let (i, pp, gg) = stats[ci];
            let den = pp + gg + eps;
            let num = two * i + eps;
            // d d_c / d p = (2 g den - 2 p num) / den^2, scaled by -g0 / K.
            let scale = -g[0] / (k * den * den);
            for b in 0..n {
                let off = (b * c + ci) * hw;
                for px in 0..hw {
                    let gt = if mask[b * hw + px] as usize == ci { T::one() } else { T::zero() };
                    grad[off + px] = scale * (two * gt * den - two * p[off + px] * num);
                }
            }
        }
        vec![Some(grad)]
    }))
}

/// Per-class IoU and the foreground average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_class: Vec<f64>,
    pub foreground: Vec<usize>,
    /// Mean IoU over `foreground`, averaged over samples.
    pub mean_iou: f64,
    pub samples: usize,
}

impl MetricReport {
    /// Sample-averaged report (per-class and mean IoU averaged over samples).
    pub fn average(reports: &[MetricReport]) -> Option<MetricReport> {
        let first = reports.first()?;
        let total: usize = reports.iter().map(|r| r.samples).sum();
        let wsum = |f: &dyn Fn(&MetricReport) -> f64| reports.iter().map(|r| f(r) * r.samples as f64).sum::<f64>() / total as f64;
        let per_class = (0..first.per_class.len()).map(|c| wsum(&|r| r.per_class[c])).collect();
        Some(MetricReport { per_class, foreground: first.foreground.clone(), mean_iou: wsum(&|r| r.mean_iou), samples: total })
    }
}

/// IoU of one predicted mask against ground truth. A class absent from both
/// scores 1.
pub fn iou_report(pred: &[u8], gt: &[u8], num_classes: usize, foreground: &[usize]) -> MetricReport {
    assert_eq!(pred.len(), gt.len(), "prediction and ground truth differ in size");
    let mut inter = vec![0usize; num_classes];
    let mut union = vec![0usize; num_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p as usize, g as usize);
        if p == g {
            if p < num_classes {
                inter[p] += 1;
                union[p] += 1;
            }
        } else {
            if p < num_classes {
                union[p] += 1;
            }
            if g < num_classes {
                union[g] += 1;
            }
        }
    }
    let per_class: Vec<f64> = (0..num_classes).map(|c| if union[c] == 0 { 1.0 } else { inter[c] as f64 / union[c] as f64 }).collect();
    let mean_iou = foreground.iter().map(|&c| per_class[c]).sum::<f64>() / foreground.len().max(1) as f64;
    MetricReport { per_class, foreground: foreground.to_vec(), mean_iou, samples: 1 }
}
