//! Training-time augmentation: resize, vertical flip and colour jitter.
//! Geometric steps touch image, label and depth alike; jitter touches only the image.

use ndarray::{Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::record::SampleRecord;
use crate::ops::resize_array;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Brightness, contrast and saturation factors are drawn from `1 ± value`.
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            flip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
        }
    }
}

/// Concrete random choices for one record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentPlan {
    pub flip: bool,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
}

impl AugmentPlan {
    pub const IDENTITY: Self = Self {
        flip: false,
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
    };

    pub fn sample(config: &AugmentConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flip = rng.random::<f64>() < config.flip_prob;
        let mut factor = |range: f64| (1.0 + range * (2.0 * rng.random::<f64>() - 1.0)) as f32;
        Self {
            flip,
            brightness: factor(config.brightness),
            contrast: factor(config.contrast),
            saturation: factor(config.saturation),
        }
    }
}

pub(crate) fn resize3(a: &Array3<f32>, size: (usize, usize)) -> Array3<f32> {
    let (c, _, _) = a.dim();
    let mut out = Array3::zeros((c, size.0, size.1));
    for (src, mut dst) in a.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
        dst.assign(&resize_array(src, size));
    }
    out
}

/// Resizes image and depth bilinearly; the label is resized bilinearly and re-binarised at 0.5.
pub fn resize_record(record: &SampleRecord, size: (usize, usize)) -> SampleRecord {
    if record.size() == size {
        return record.clone();
    }
    SampleRecord {
        image: resize3(&record.image, size),
        blur_label: resize3(&record.blur_label, size).mapv(|v| if v > 0.5 { 1.0 } else { 0.0 }),
        depth: record.depth.as_ref().map(|d| resize3(d, size)),
        meta: record.meta.clone(),
    }
}

/// Upside-down flip of every row.
pub fn flip_vertical(a: &Array3<f32>) -> Array3<f32> {
    let mut out = a.clone();
    out.invert_axis(Axis(1));
    out.as_standard_layout().to_owned()
}

fn jitter(image: &mut Array3<f32>, plan: &AugmentPlan) {
    if plan.brightness != 1.0 {
        image.mapv_inplace(|v| (v * plan.brightness).clamp(0.0, 1.0));
    }
    let (_, h, w) = image.dim();
    let gray = |img: &Array3<f32>, y: usize, x: usize| {
        0.299 * img[[0, y, x]] + 0.587 * img[[1, y, x]] + 0.114 * img[[2, y, x]]
    };
    if plan.contrast != 1.0 {
        let mean = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .map(|(y, x)| gray(image, y, x) as f64)
            .sum::<f64>() as f32
            / (h * w) as f32;
        image.mapv_inplace(|v| ((v - mean) * plan.contrast + mean).clamp(0.0, 1.0));
    }
    if plan.saturation != 1.0 {
        for y in 0..h {
            for x in 0..w {
                let g = gray(image, y, x);
                for c in 0..3 {
                    image[[c, y, x]] =
                        ((image[[c, y, x]] - g) * plan.saturation + g).clamp(0.0, 1.0);
                }
            }
        }
    }
}

pub fn apply_plan(record: &SampleRecord, size: (usize, usize), plan: &AugmentPlan) -> SampleRecord {
    let mut out = resize_record(record, size);
    if plan.flip {
        out.image = flip_vertical(&out.image);
        out.blur_label = flip_vertical(&out.blur_label);
        out.depth = out.depth.as_ref().map(flip_vertical);
    }
    jitter(&mut out.image, plan);
    out
}

/// Resize to `size`, then apply the flip and jitter drawn from `seed`.
pub fn augment(
    record: &SampleRecord,
    size: (usize, usize),
    config: &AugmentConfig,
    seed: u64,
) -> SampleRecord {
    apply_plan(record, size, &AugmentPlan::sample(config, seed))
}
