//! Transposed-convolution decoders mapping embeddings back to images.
//!
//! The decoder mirrors the encoder's pooling chain: the embedding is viewed
//! as the encoder's final `[hidden, h, w]` feature map and each upsampling
//! layer (kernel 4, stride 2, padding 1, output padding 0 or 1) undoes one
//! pooling step exactly. For the default 1x28x28 input the layouts are
//!
//! | variant | layers                                                            | params  |
//! |---------|-------------------------------------------------------------------|---------|
//! | shallow | up 64->48, up 48->24, up 24->16, up 16->1, sigmoid                 | 74,073  |
//! | deep    | up 64->80, ref 80, up 80->48, ref 48, up 48->24, ref 24, up 24->1, sigmoid | 246,001 |
//!
//! where "up" is the upsampling layer and "ref" a 3x3 stride-1 refinement
//! layer; every hidden layer is followed by relu.

use serde::{Deserialize, Serialize};

use super::encoder::EncoderSpec;
use super::params::{kaiming_uniform, Bound, ParamSet};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DecoderVariant {
    #[default]
    Shallow,
    Deep,
}

impl DecoderVariant {
    fn widths(self) -> &'static [usize] {
        match self {
            DecoderVariant::Shallow => &[48, 24, 16],
            DecoderVariant::Deep => &[80, 48, 24],
        }
    }

    fn refine(self) -> bool {
        matches!(self, DecoderVariant::Deep)
    }

    /// Parameter budget `(low, high)` for the 1x28x28 layout.
    pub fn parameter_band(self) -> (usize, usize) {
        match self {
            DecoderVariant::Shallow => (67_500, 82_500),
            DecoderVariant::Deep => (225_000, 275_000),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Layer {
    in_c: usize,
    out_c: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    output_padding: usize,
    act: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<T> {
    variant: DecoderVariant,
    spec: EncoderSpec,
    layers: Vec<Layer>,
    params: ParamSet<T>,
}

fn plan(variant: DecoderVariant, spec: &EncoderSpec) -> Result<Vec<Layer>> {
    let chain = spec.spatial_chain();
    let steps = spec.blocks;
    // Width after each upsampling step except the last, which emits channels.
    let table = variant.widths();
    let mut widths: Vec<usize> = if steps - 1 <= table.len() {
        table[table.len() - (steps - 1)..].to_vec()
    } else {
        let mut w = vec![table[0]; steps - 1 - table.len()];
        w.extend_from_slice(table);
        w
    };
    widths.push(spec.in_channels);

    let mut layers = Vec::new();
    let mut in_c = spec.hidden;
    for (i, &out_c) in widths.iter().enumerate() {
        let (small_h, small_w) = chain[steps - i];
        let (big_h, big_w) = chain[steps - i - 1];
        let (op_h, op_w) = (big_h - 2 * small_h, big_w - 2 * small_w);
        if op_h != op_w {
            return Err(Error::Config(format!(
                "decoder cannot restore {big_h}x{big_w} from {small_h}x{small_w}: odd/even extents differ"
            )));
        }
        let last = i + 1 == widths.len();
        layers.push(Layer {
            in_c,
            out_c,
            kernel: 4,
            stride: 2,
            padding: 1,
            output_padding: op_h,
            act: if last { Activation::Sigmoid } else { Activation::Relu },
        });
        if variant.refine() && !last {
            layers.push(Layer {
                in_c: out_c,
                out_c,
                kernel: 3,
                stride: 1,
                padding: 1,
                output_padding: 0,
                act: Activation::Relu,
            });
        }
        in_c = out_c;
    }
    Ok(layers)
}

impl<T: Scalar> Decoder<T> {
    pub fn init(variant: DecoderVariant, spec: EncoderSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let layers = plan(variant, &spec)?;
        let mut params = ParamSet::new();
        for (i, l) in layers.iter().enumerate() {
            // Transposed-conv weights are [in, out, k, k]; fan-in counts the
            // output side, the same convention as torch.
            let w = kaiming_uniform(vec![l.in_c, l.out_c, l.kernel, l.kernel], l.out_c * l.kernel * l.kernel, rng);
            params.push(format!("decoder.layer{i}.weight"), w);
            params.push(format!("decoder.layer{i}.bias"), Tensor::zeros(vec![l.out_c]));
        }
        Ok(Decoder { variant, spec, layers, params })
    }

    pub fn from_params(variant: DecoderVariant, spec: EncoderSpec, params: ParamSet<T>) -> Result<Self> {
        let layers = plan(variant, &spec)?;
        if params.len() != 2 * layers.len() {
            return Err(Error::Checkpoint(format!(
                "decoder expects {} tensors, found {}",
                2 * layers.len(),
                params.len()
            )));
        }
        for (i, l) in layers.iter().enumerate() {
            if params.tensors()[2 * i].shape() != [l.in_c, l.out_c, l.kernel, l.kernel] {
                return Err(Error::Checkpoint(format!("decoder layer {i} shape mismatch")));
            }
        }
        Ok(Decoder { variant, spec, layers, params })
    }

    pub fn variant(&self) -> DecoderVariant {
        self.variant
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// `[B, E] -> [B, C, H, W]`.
    pub fn forward<'t>(&self, p: &Bound<'t, T>, emb: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = emb.shape();
        let e = self.spec.embedding_dim();
        if shape.len() != 2 || shape[1] != e {
            return Err(Error::shape("decode", &shape, &[shape.first().copied().unwrap_or(0), e]));
        }
        let (h, w) = self.spec.output_hw();
        let mut x = emb.reshape(vec![shape[0], self.spec.hidden, h, w])?;
        for (i, l) in self.layers.iter().enumerate() {
            x = x.conv_transpose2d(p.var(2 * i), p.var(2 * i + 1), l.stride, l.padding, l.output_padding)?;
            x = match l.act {
                Activation::Relu => x.relu()?,
                Activation::Sigmoid => x.sigmoid()?,
            };
        }
        Ok(x)
    }
}
