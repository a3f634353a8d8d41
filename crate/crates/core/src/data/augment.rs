//! Paired geometric and image-only photometric augmentation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Sample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub hflip: f64,
    pub vflip: f64,
    /// Probability of a random multiple-of-90 rotation.
    pub rot90: f64,
    /// Probability and range (degrees) of a small nearest-neighbor rotation.
    pub rotate: f64,
    pub max_degrees: f32,
    /// Uniform per-channel additive shift range.
    pub rgb_shift: f32,
    pub brightness: f32,
    pub contrast: f32,
    /// Per-channel `(mean, std)` applied last.
    pub normalize: Option<([f32; 3], [f32; 3])>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            hflip: 0.5,
            vflip: 0.5,
            rot90: 0.5,
            rotate: 0.0,
            max_degrees: 15.0,
            rgb_shift: 0.03,
            brightness: 0.05,
            contrast: 0.05,
            normalize: None,
        }
    }
}

impl AugmentConfig {
    /// No-op configuration.
    pub fn none() -> Self {
        Self { hflip: 0.0, vflip: 0.0, rot90: 0.0, rotate: 0.0, max_degrees: 0.0, rgb_shift: 0.0, brightness: 0.0, contrast: 0.0, normalize: None }
    }
}

/// Remaps every pixel `(y, x)` of an `h x w` output from source `f(y, x)`.
fn remap(s: &Sample, out_h: usize, out_w: usize, f: impl Fn(usize, usize) -> (usize, usize)) -> Sample {
    let (h, w) = (s.height, s.width);
    let mut image = vec![0.0; s.channels * out_h * out_w];
    let mut mask = vec![0; out_h * out_w];
    for y in 0..out_h {
        for x in 0..out_w {
            let (sy, sx) = f(y, x);
            mask[y * out_w + x] = s.mask[sy * w + sx];
            for c in 0..s.channels {
                image[(c * out_h + y) * out_w + x] = s.image[(c * h + sy) * w + sx];
            }
        }
    }
    Sample { id: s.id.clone(), channels: s.channels, height: out_h, width: out_w, image, mask }
}

pub fn hflip(s: &Sample) -> Sample {
    remap(s, s.height, s.width, |y, x| (y, s.width - 1 - x))
}

pub fn vflip(s: &Sample) -> Sample {
    remap(s, s.height, s.width, |y, x| (s.height - 1 - y, x))
}

/// Quarter turn counter-clockwise.
pub fn rot90(s: &Sample) -> Sample {
    remap(s, s.width, s.height, |y, x| (x, s.width - 1 - y))
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Nearest-neighbor rotation about the center with reflection padding.
pub fn rotate_small(s: &Sample, degrees: f32) -> Sample {
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((s.height as f32 - 1.0) / 2.0, (s.width as f32 - 1.0) / 2.0);
    remap(s, s.height, s.width, |y, x| {
        let (dy, dx) = (y as f32 - cy, x as f32 - cx);
        let sx = cos * dx + sin * dy + cx;
        let sy = -sin * dx + cos * dy + cy;
        (reflect(sy.round() as isize, s.height), reflect(sx.round() as isize, s.width))
    })
}

pub fn normalize(s: &mut Sample, mean: [f32; 3], std: [f32; 3]) {
    let hw = s.height * s.width;
    for c in 0..s.channels {
        let (m, d) = (mean[c.min(2)], std[c.min(2)]);
        s.image[c * hw..(c + 1) * hw].iter_mut().for_each(|v| *v = (*v - m) / d);
    }
}

/// Applies the configured augmentations; geometry hits image and mask alike.
pub fn augment_sample<R: Rng>(sample: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Sample {
    let mut s = sample.clone();
    if rng.gen_bool(cfg.hflip) {
        s = hflip(&s);
    }
    if rng.gen_bool(cfg.vflip) {
        s = vflip(&s);
    }
    if rng.gen_bool(cfg.rot90) {
        for _ in 0..rng.gen_range(1..4) {
            s = rot90(&s);
        }
    }
    if rng.gen_bool(cfg.rotate) && cfg.max_degrees > 0.0 {
        s = rotate_small(&s, rng.gen_range(-cfg.max_degrees..=cfg.max_degrees));
    }
    if cfg.rgb_shift <= 0.0 && cfg.brightness <= 0.0 && cfg.contrast <= 0.0 {
        if let Some((mean, std)) = cfg.normalize {
            normalize(&mut s, mean, std);
        }
        return s;
    }
    let hw = s.height * s.width;
    let contrast = 1.0 + sym(rng, cfg.contrast);
    let brightness = sym(rng, cfg.brightness);
    for c in 0..s.channels {
        let shift = sym(rng, cfg.rgb_shift) + brightness;
        for v in &mut s.image[c * hw..(c + 1) * hw] {
            *v = ((*v - 0.5) * contrast + 0.5 + shift).clamp(0.0, 1.0);
        }
    }
    if let Some((mean, std)) = cfg.normalize {
        normalize(&mut s, mean, std);
    }
    s
}

fn sym<R: Rng>(rng: &mut R, range: f32) -> f32 {
    if range > 0.0 {
        rng.gen_range(-range..=range)
    } else {
        0.0
    }
}
