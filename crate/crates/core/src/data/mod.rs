//! Samples, synthetic data, partitioning, augmentation, loss and metrics.

mod augment;
mod io;
mod metrics;
mod partition;
mod synth;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::TensorData;

pub use augment::{augment_sample, hflip, normalize, rot90, rotate_small, vflip, AugmentConfig};
pub use io::{load_image_mask_dir, save_mask_png, save_rgb_png, write_dataset_dir, PALETTE};
pub use metrics::{default_foreground, iou_report, soft_dice_loss, DICE_EPS, MetricReport};
pub use partition::{partition_dataset, train_val_split, PartitionSpec, PRESETS};
pub use synth::{generate_synthetic_dataset, SynthConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("ingestion error: {0}")]
    Ingestion(String),
    #[error("data error: {0}")]
    Data(String),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// One image (`C x H x W`, values in `[0, 1]`) with its `H x W` class-id mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub image: Vec<f32>,
    pub mask: Vec<u8>,
}

impl Sample {
    pub fn new(id: impl Into<String>, channels: usize, height: usize, width: usize, image: Vec<f32>, mask: Vec<u8>) -> Result<Self> {
        let id = id.into();
        if image.len() != channels * height * width || mask.len() != height * width {
            return Err(DataError::Data(format!(
                "sample {id}: image has {} values and mask {} for {channels}x{height}x{width}",
                image.len(),
                mask.len()
            )));
        }
        Ok(Self { id, channels, height, width, image, mask })
    }

    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        match self.mask.iter().find(|&&c| c as usize >= num_classes) {
            Some(c) => Err(DataError::Data(format!("sample {}: class id {c} >= {num_classes}", self.id))),
            None => Ok(()),
        }
    }
}

/// Stacks samples into an `(N, C, H, W)` batch and a flat mask.
pub fn stack_batch<T: Scalar>(samples: &[&Sample]) -> Result<(TensorData<T>, Vec<u8>)> {
    let first = samples.first().ok_or_else(|| DataError::Data("empty batch".into()))?;
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut image = Vec::with_capacity(samples.len() * c * h * w);
    let mut mask = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.channels, s.height, s.width) != (c, h, w) {
            return Err(DataError::Data(format!("sample {} is {}x{}x{}, batch is {c}x{h}x{w}", s.id, s.channels, s.height, s.width)));
        }
        image.extend(s.image.iter().map(|&v| T::from_f64_lossy(v as f64)));
        mask.extend_from_slice(&s.mask);
    }
    let data = TensorData::new(vec![samples.len(), c, h, w], image).expect("sizes checked");
    Ok((data, mask))
}

/// Per-pixel argmax over the class channel of `(N, K, H, W)` scores.
pub fn argmax_masks<T: Scalar>(scores: &TensorData<T>) -> Vec<u8> {
    let [n, k, h, w] = <[usize; 4]>::try_from(scores.shape.as_slice()).expect("4-D scores");
    let hw = h * w;
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        let base = b * k * hw;
        for p in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if scores.data[base + c * hw + p] > scores.data[base + best * hw + p] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stack_and_argmax() {
        let a = Sample::new("a", 1, 1, 2, vec![0.0, 1.0], vec![0, 1]).unwrap();
        let b = Sample::new("b", 1, 1, 2, vec![0.5, 0.25], vec![1, 1]).unwrap();
        let (x, m) = stack_batch::<f64>(&[&a, &b]).unwrap();
        assert_eq!(x.shape, vec![2, 1, 1, 2]);
        assert_eq!(m, vec![0, 1, 1, 1]);
        let scores = TensorData::new(vec![1, 3, 1, 2], vec![0.1, 0.9, 0.5, 0.2, 0.5, 0.0]).unwrap();
        // Ties keep the lowest class id.
        assert_eq!(argmax_masks(&scores), vec![1, 0]);
        assert!(Sample::new("c", 1, 2, 2, vec![0.0; 3], vec![0; 4]).is_err());
        assert!(b.check_classes(1).is_err());
    }
}
