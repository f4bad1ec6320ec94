use candle_core::{Device, Tensor};
use ndarray::{s, Array3, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{DbdError, Result};

/// Per-channel statistics applied to `[0, 1]` RGB before the network sees it.
pub const IMAGE_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGE_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub aperture_f_number: Option<f64>,
    /// Metres.
    pub focus_distance: Option<f64>,
    pub source_id: String,
    /// Lens regime label, e.g. `f1.8`.
    #[serde(default)]
    pub regime: Option<String>,
    /// Scene contains a textureless plane placed at the focus distance.
    #[serde(default)]
    pub homogeneous: bool,
}

/// One dataset item. Arrays are channel-first; the image is RGB in `[0, 1]`,
/// the label is 1 on defocused pixels and the depth map is in metres.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub image: Array3<f32>,
    pub blur_label: Array3<f32>,
    pub depth: Option<Array3<f32>>,
    pub meta: SampleMeta,
}

impl SampleRecord {
    pub fn size(&self) -> (usize, usize) {
        let (_, h, w) = self.image.dim();
        (h, w)
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.image.dim();
        if c != 3 {
            return Err(DbdError::Dimension(format!(
                "{}: image has {c} channels, expected 3",
                self.meta.source_id
            )));
        }
        if self.blur_label.dim() != (1, h, w) {
            return Err(DbdError::Dimension(format!(
                "{}: label {:?} does not match image {h}x{w}",
                self.meta.source_id,
                self.blur_label.dim()
            )));
        }
        if let Some(d) = &self.depth {
            if d.dim() != (1, h, w) {
                return Err(DbdError::Dimension(format!(
                    "{}: depth {:?} does not match image {h}x{w}",
                    self.meta.source_id,
                    d.dim()
                )));
            }
        }
        Ok(())
    }
}

pub fn normalize_image(image: ArrayView3<'_, f32>) -> Array3<f32> {
    let mut out = image.to_owned();
    for (c, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
        plane.mapv_inplace(|v| (v - IMAGE_MEAN[c]) / IMAGE_STD[c]);
    }
    out
}

/// Stacked, normalised network input for a group of equally sized records.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, 3, H, W]`, normalised.
    pub images: Tensor,
    /// `[B, 1, H, W]`.
    pub labels: Tensor,
    /// `[B, 1, H, W]` metres; present only when every record carries depth.
    pub depth: Option<Tensor>,
    pub source_ids: Vec<String>,
}

impl Batch {
    pub fn from_records(records: &[SampleRecord], device: &Device) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| DbdError::EmptyDataset("cannot build a batch from no records".into()))?;
        let size = first.size();
        for r in records {
            r.validate()?;
            if r.size() != size {
                return Err(DbdError::Dimension(format!(
                    "{} is {:?} but the batch is {:?}",
                    r.meta.source_id,
                    r.size(),
                    size
                )));
            }
        }
        let (h, w) = size;
        let b = records.len();
        let to_tensor = |arrays: Vec<Array3<f32>>, c: usize| -> Result<Tensor> {
            let mut out = Array4::<f32>::zeros((b, c, h, w));
            for (i, a) in arrays.into_iter().enumerate() {
                out.slice_mut(s![i, .., .., ..]).assign(&a);
            }
            let (data, _) = out.into_raw_vec_and_offset();
            Ok(Tensor::from_vec(data, (b, c, h, w), device)?)
        };
        let images = to_tensor(
            records
                .iter()
                .map(|r| normalize_image(r.image.view()))
                .collect(),
            3,
        )?;
        let labels = to_tensor(records.iter().map(|r| r.blur_label.clone()).collect(), 1)?;
        let depth = if records.iter().all(|r| r.depth.is_some()) {
            Some(to_tensor(
                records
                    .iter()
                    .map(|r| r.depth.clone().expect("checked"))
                    .collect(),
                1,
            )?)
        } else {
            None
        };
        Ok(Self {
            images,
            labels,
            depth,
            source_ids: records.iter().map(|r| r.meta.source_id.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.source_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_ids.is_empty()
    }
}
