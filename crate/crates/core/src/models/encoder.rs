use serde::{Deserialize, Serialize};

use super::params::{kaiming_uniform, Bound, ParamSet};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};

/// Image geometry plus the Conv-4 layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Filters per convolution.
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// Number of conv-relu-pool blocks.
    #[serde(default = "default_blocks")]
    pub blocks: usize,
}

fn default_hidden() -> usize {
    64
}

fn default_blocks() -> usize {
    4
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            in_channels: 1,
            height: 28,
            width: 28,
            hidden: 64,
            blocks: 4,
        }
    }
}

impl EncoderSpec {
    /// Spatial extents after each block, starting with the input:
    /// `[(H, W), (H/2, W/2), ...]` with floor division.
    pub fn spatial_chain(&self) -> Vec<(usize, usize)> {
        let mut out = vec![(self.height, self.width)];
        for _ in 0..self.blocks {
            let (h, w) = *out.last().unwrap();
            out.push((h / 2, w / 2));
        }
        out
    }

    /// Final feature-map extent.
    pub fn output_hw(&self) -> (usize, usize) {
        *self.spatial_chain().last().unwrap()
    }

    /// Embedding dimension `hidden * h_out * w_out` (64 for 1x28x28).
    pub fn embedding_dim(&self) -> usize {
        let (h, w) = self.output_hw();
        self.hidden * h * w
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.in_channels, self.height, self.width]
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.hidden == 0 || self.blocks == 0 {
            return Err(Error::Config("encoder channels, filters and blocks must be positive".into()));
        }
        let min = 1usize << self.blocks;
        if self.height < min || self.width < min {
            return Err(Error::Config(format!(
                "input {}x{} too small for {} pooling blocks (need at least {min})",
                self.height, self.width, self.blocks
            )));
        }
        Ok(())
    }
}

/// Embedding network: `blocks` x {conv 3x3 pad 1, relu, max-pool 2x2}, flattened.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    spec: EncoderSpec,
    params: ParamSet<T>,
}

impl<T: Scalar> Encoder<T> {
    pub fn init(spec: EncoderSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamSet::new();
        let mut in_c = spec.in_channels;
        for b in 0..spec.blocks {
            let w = kaiming_uniform(vec![spec.hidden, in_c, 3, 3], in_c * 9, rng);
            params.push(format!("encoder.block{b}.weight"), w);
            params.push(format!("encoder.block{b}.bias"), Tensor::zeros(vec![spec.hidden]));
            in_c = spec.hidden;
        }
        Ok(Encoder { spec, params })
    }

    pub fn from_params(spec: EncoderSpec, params: ParamSet<T>) -> Result<Self> {
        spec.validate()?;
        if params.len() != 2 * spec.blocks {
            return Err(Error::Checkpoint(format!(
                "encoder expects {} tensors, found {}",
                2 * spec.blocks,
                params.len()
            )));
        }
        let mut in_c = spec.in_channels;
        for b in 0..spec.blocks {
            let (w, bias) = (&params.tensors()[2 * b], &params.tensors()[2 * b + 1]);
            if w.shape() != [spec.hidden, in_c, 3, 3] || bias.shape() != [spec.hidden] {
                return Err(Error::Checkpoint(format!("encoder block {b} has shape {:?}", w.shape())));
            }
            in_c = spec.hidden;
        }
        Ok(Encoder { spec, params })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn embedding_dim(&self) -> usize {
        self.spec.embedding_dim()
    }

    /// `[B, C, H, W] -> [B, E]` with the given bound parameters.
    pub fn forward<'t>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1..] != self.spec.image_shape() {
            return Err(Error::shape("encode", &shape, &self.spec.image_shape()));
        }
        if p.len() != self.params.len() {
            return Err(Error::InvalidArgument("encoder bound to a different parameter set".into()));
        }
        let mut h = x;
        for b in 0..self.spec.blocks {
            h = h.conv2d(p.var(2 * b), p.var(2 * b + 1), 1, 1)?.relu()?.max_pool2d(2, 2)?;
        }
        h.flatten()
    }
}
