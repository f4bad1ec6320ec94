//! Named, seeded parameter storage.
//!
//! Parameters are kept in name order, which fixes iteration, hashing and
//! checkpoint order. Initialisation draws from a caller-supplied ChaCha stream.

use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::conv::{conv2d, ConvGeometry};
use super::norm::GroupNorm;
use crate::error::{DbdError, Result};

#[derive(Debug, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    fn insert(&mut self, name: String, var: Var) -> Result<Tensor> {
        if self.vars.contains_key(&name) {
            return Err(DbdError::Config(format!("duplicate parameter name {name}")));
        }
        let t = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(t)
    }

    pub fn uniform(
        &mut self,
        name: String,
        shape: &[usize],
        bound: f64,
        rng: &mut ChaCha8Rng,
        device: &Device,
    ) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n)
            .map(|_| rng.random_range(-bound..=bound) as f32)
            .collect();
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, device)?)?;
        self.insert(name, var)
    }

    pub fn zeros(&mut self, name: String, shape: &[usize], device: &Device) -> Result<Tensor> {
        let var = Var::zeros(shape, DType::F32, device)?;
        self.insert(name, var)
    }

    pub fn ones(&mut self, name: String, shape: &[usize], device: &Device) -> Result<Tensor> {
        let var = Var::ones(shape, DType::F32, device)?;
        self.insert(name, var)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// SHA-256 over every name, shape and raw value, in name order.
    pub fn fingerprint(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, var) in &self.vars {
            hasher.update(name.as_bytes());
            for d in var.dims() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in var.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }

    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    /// Overwrite every parameter from `tensors`; names and shapes must match exactly.
    pub fn load(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = tensors.get(name).ok_or_else(|| {
                DbdError::Config(format!("checkpoint is missing parameter {name}"))
            })?;
            if t.dims() != var.dims() {
                return Err(DbdError::Config(format!(
                    "parameter {name}: checkpoint shape {:?} != model shape {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(var.dtype())?.to_device(var.device())?)?;
        }
        if let Some(extra) = tensors.keys().find(|k| !self.vars.contains_key(*k)) {
            return Err(DbdError::Config(format!(
                "checkpoint carries parameter {extra} unknown to this model"
            )));
        }
        Ok(())
    }
}

/// Everything a layer constructor needs: where to register and how to draw.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    pub device: &'a Device,
}

#[derive(Debug, Clone, Copy)]
pub enum Gain {
    /// He-uniform, for layers followed by ReLU.
    Relu,
    /// `1/sqrt(fan_in)`, for linear heads.
    Linear,
}

#[derive(Debug, Clone)]
pub struct Conv {
    weight: Tensor,
    bias: Option<Tensor>,
    geom: ConvGeometry,
    out_channels: usize,
    norm: Option<GroupNorm>,
}

impl Conv {
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        (cin, cout): (usize, usize),
        geom: ConvGeometry,
        gain: Gain,
    ) -> Result<Self> {
        let fan_in = (cin * geom.kernel * geom.kernel) as f64;
        let bound = match gain {
            Gain::Relu => (6.0 / fan_in).sqrt(),
            Gain::Linear => 1.0 / fan_in.sqrt(),
        };
        let weight = init.store.uniform(
            format!("{name}.weight"),
            &[cout, cin, geom.kernel, geom.kernel],
            bound,
            init.rng,
            init.device,
        )?;
        let bias = init
            .store
            .zeros(format!("{name}.bias"), &[cout], init.device)?;
        Ok(Self {
            weight,
            bias: Some(bias),
            geom,
            out_channels: cout,
            norm: None,
        })
    }

    /// 3x3, stride 1, "same" padding at the given dilation.
    pub fn same3(
        init: &mut Init<'_>,
        name: &str,
        ch: (usize, usize),
        dilation: usize,
    ) -> Result<Self> {
        Self::new(
            init,
            name,
            ch,
            ConvGeometry::new(3, 1, dilation, dilation),
            Gain::Relu,
        )
    }

    pub fn pointwise(
        init: &mut Init<'_>,
        name: &str,
        ch: (usize, usize),
        gain: Gain,
    ) -> Result<Self> {
        Self::new(init, name, ch, ConvGeometry::new(1, 1, 0, 1), gain)
    }

    /// Wraps existing tensors; `weight` is `[out, in, k, k]`.
    pub fn from_parts(weight: Tensor, bias: Option<Tensor>, geom: ConvGeometry) -> Result<Self> {
        let (out_channels, _, kh, kw) = weight.dims4()?;
        if kh != geom.kernel || kw != geom.kernel {
            return Err(DbdError::Dimension(format!(
                "kernel {kh}x{kw} does not match geometry kernel {}",
                geom.kernel
            )));
        }
        Ok(Self {
            weight,
            bias,
            geom,
            out_channels,
            norm: None,
        })
    }

    /// Adds group normalisation after the convolution, registered as `{name}.norm`.
    pub fn normed(mut self, init: &mut Init<'_>, name: &str) -> Result<Self> {
        self.norm = Some(GroupNorm::new(
            init,
            &format!("{name}.norm"),
            self.out_channels,
        )?);
        Ok(self)
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &self.weight, self.bias.as_ref(), self.geom)?;
        match &self.norm {
            Some(n) => n.forward(&y),
            None => Ok(y),
        }
    }
}
