use std::path::Path;

use candle_core::{DType, Tensor};
use ndarray::{Array2, Array3, Axis};

use crate::data::augment::resize3;
use crate::data::normalize_image;
use crate::error::{DbdError, Result};
use crate::model::{read_checkpoint, write_checkpoint, CheckpointHeader, CheckpointKind, DbdNet};
use crate::ops::resize_array;

/// Maps a `[3, H, W]` image in `[0, 1]` to a blur-probability map.
pub trait Predictor {
    /// The returned map may have any resolution; callers resize it as needed.
    fn predict(&self, image: &Array3<f32>) -> Result<Array2<f32>>;
}

/// Runs a network at its configured input size and resizes the result back.
pub struct NetPredictor {
    net: DbdNet,
}

impl NetPredictor {
    pub fn new(net: DbdNet) -> Self {
        Self { net }
    }

    pub fn net(&self) -> &DbdNet {
        &self.net
    }
}

impl Predictor for NetPredictor {
    fn predict(&self, image: &Array3<f32>) -> Result<Array2<f32>> {
        let (c, h, w) = image.dim();
        if c != 3 {
            return Err(DbdError::Dimension(format!(
                "expected 3 image channels, got {c}"
            )));
        }
        let size = self.net.config().input_size;
        let input = normalize_image(resize3(image, size).view());
        let (data, _) = input
            .as_standard_layout()
            .to_owned()
            .into_raw_vec_and_offset();
        let x = Tensor::from_vec(data, (1, 3, size.0, size.1), self.net.device())?;
        let out = self.net.forward(&x)?.final_prediction;
        let values = out.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let map =
            Array2::from_shape_vec(size, values).map_err(|e| DbdError::Dimension(e.to_string()))?;
        Ok(resize_array(map.view(), (h, w)))
    }
}

/// Echoes the first image channel as the prediction. Has no parameters.
pub struct ChannelEcho;

impl Predictor for ChannelEcho {
    fn predict(&self, image: &Array3<f32>) -> Result<Array2<f32>> {
        Ok(image.index_axis(Axis(0), 0).to_owned())
    }
}

pub fn write_channel_echo(path: &Path) -> Result<()> {
    write_checkpoint(path, &Default::default(), &CheckpointHeader::channel_echo())
}

/// Loads whatever predictor the checkpoint describes.
pub fn load_predictor(path: &Path) -> Result<(Box<dyn Predictor>, CheckpointHeader)> {
    let (_, header) = read_checkpoint(path)?;
    match header.kind {
        CheckpointKind::ChannelEcho => Ok((Box::new(ChannelEcho), header)),
        CheckpointKind::Network => {
            let (net, header) = DbdNet::from_checkpoint(path)?;
            Ok((Box::new(NetPredictor::new(net)), header))
        }
        CheckpointKind::DepthNet => Err(DbdError::Config(format!(
            "{} is a depth-teacher checkpoint and cannot predict blur maps",
            path.display()
        ))),
    }
}
