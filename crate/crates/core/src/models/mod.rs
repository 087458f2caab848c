//! Encoder, decoders, classifier head and parameter bookkeeping.

mod checkpoint;
mod decoder;
mod encoder;
mod params;

pub use checkpoint::{read_header, Checkpoint, CheckpointHeader, TensorEntry, MAGIC};
pub use decoder::{Decoder, DecoderVariant};
pub use encoder::{Encoder, EncoderSpec};
pub use params::{kaiming_uniform, uniform, Bound, ParamSet};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::rng::{self, Stream};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    #[serde(default)]
    pub encoder: EncoderSpec,
    #[serde(default)]
    pub decoder: DecoderVariant,
}

/// Encoder and decoder initialized from independent streams of `seed`:
/// Kaiming-uniform weights, zero biases.
pub fn init_params<T: Scalar>(seed: u64, arch: &ArchSpec) -> Result<(Encoder<T>, Decoder<T>)> {
    let enc = Encoder::init(arch.encoder.clone(), &mut rng::stream(seed, Stream::Encoder))?;
    let dec = Decoder::init(arch.decoder, arch.encoder.clone(), &mut rng::stream(seed, Stream::Decoder))?;
    Ok((enc, dec))
}

/// Fully connected `in -> out` layer (the MAML classifier head).
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    params: ParamSet<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn init(name: &str, inputs: usize, outputs: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, Stream::Head);
        let mut params = ParamSet::new();
        params.push(format!("{name}.weight"), kaiming_uniform(vec![inputs, outputs], inputs, &mut rng));
        params.push(format!("{name}.bias"), Tensor::zeros(vec![outputs]));
        Linear { params }
    }

    pub fn from_params(params: ParamSet<T>) -> Result<Self> {
        if params.len() != 2 || params.tensors()[0].ndim() != 2 {
            return Err(crate::Error::Checkpoint("linear layer needs weight and bias".into()));
        }
        Ok(Linear { params })
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn outputs(&self) -> usize {
        self.params.tensors()[0].shape()[1]
    }

    pub fn forward<'t>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.matmul(p.var(0))?.add_row_bias(p.var(1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn reduced() -> EncoderSpec {
        EncoderSpec { in_channels: 1, height: 6, width: 6, hidden: 3, blocks: 2 }
    }

    #[test]
    fn default_encoder_embeds_episode_batch_to_64() {
        let (enc, _) = init_params::<f64>(0, &ArchSpec::default()).unwrap();
        assert_eq!(enc.embedding_dim(), 64);
        let tape = Tape::new();
        let p = enc.params().bind_frozen(&tape);
        let x = tape.constant(Tensor::full(vec![100, 1, 28, 28], 0.5));
        assert_eq!(enc.forward(&p, x).unwrap().shape(), vec![100, 64]);
    }

    #[test]
    fn zero_input_through_zeroed_final_layer_is_zero() {
        let (mut enc, _) = init_params::<f64>(3, &ArchSpec::default()).unwrap();
        let n = enc.params().len();
        enc.params_mut().tensors_mut()[n - 2].data_mut().fill(0.0);
        let tape = Tape::new();
        let p = enc.params().bind_frozen(&tape);
        let z = enc.forward(&p, tape.constant(Tensor::zeros(vec![2, 1, 28, 28]))).unwrap();
        assert!(z.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_images_give_identical_rows() {
        let (enc, _) = init_params::<f64>(1, &ArchSpec::default()).unwrap();
        let img = Tensor::from_fn(vec![1, 28, 28], |i| ((i * 37) % 11) as f64 / 11.0);
        let batch = Tensor::stack(&[&img, &img]).unwrap();
        let tape = Tape::new();
        let p = enc.params().bind_frozen(&tape);
        let z = enc.forward(&p, tape.constant(batch)).unwrap();
        let z = z.value();
        assert_eq!(z.row(0).max_abs_diff(&z.row(1)), Some(0.0));
    }

    #[test]
    fn encoder_rejects_wrong_image_shape() {
        let (enc, _) = init_params::<f64>(0, &ArchSpec::default()).unwrap();
        let tape = Tape::new();
        let p = enc.params().bind_frozen(&tape);
        let x = tape.constant(Tensor::zeros(vec![1, 1, 32, 32]));
        assert!(enc.forward(&p, x).is_err());
    }

    #[test]
    fn decoder_parameter_budgets() {
        for (variant, want) in [(DecoderVariant::Shallow, 74_073), (DecoderVariant::Deep, 246_001)] {
            let arch = ArchSpec { decoder: variant, ..Default::default() };
            let (_, dec) = init_params::<f64>(0, &arch).unwrap();
            let (lo, hi) = variant.parameter_band();
            assert_eq!(dec.parameter_count(), want);
            assert!((lo..=hi).contains(&dec.parameter_count()));
        }
    }

    #[test]
    fn decode_restores_image_shape_for_supported_sizes() {
        let specs = [
            EncoderSpec::default(),
            EncoderSpec { in_channels: 3, height: 32, width: 32, ..Default::default() },
            EncoderSpec { in_channels: 1, height: 16, width: 16, hidden: 8, blocks: 4 },
            reduced(),
        ];
        for spec in specs {
            for variant in [DecoderVariant::Shallow, DecoderVariant::Deep] {
                let arch = ArchSpec { encoder: spec.clone(), decoder: variant };
                let (enc, dec) = init_params::<f64>(0, &arch).unwrap();
                let tape = Tape::new();
                let (pe, pd) = (enc.params().bind_frozen(&tape), dec.params().bind_frozen(&tape));
                let x = tape.constant(Tensor::full(vec![1, spec.in_channels, spec.height, spec.width], 0.3));
                let r = dec.forward(&pd, enc.forward(&pe, x).unwrap()).unwrap();
                assert_eq!(r.shape(), vec![1, spec.in_channels, spec.height, spec.width], "{spec:?}");
            }
        }
    }

    #[test]
    fn decode_rejects_wrong_embedding_dim() {
        let (_, dec) = init_params::<f64>(0, &ArchSpec::default()).unwrap();
        let tape = Tape::new();
        let p = dec.params().bind_frozen(&tape);
        assert!(dec.forward(&p, tape.constant(Tensor::zeros(vec![1, 63]))).is_err());
    }

    #[test]
    fn seeds_control_initialization() {
        let arch = ArchSpec::default();
        let (a, da) = init_params::<f64>(5, &arch).unwrap();
        let (b, db) = init_params::<f64>(5, &arch).unwrap();
        let (c, _) = init_params::<f64>(6, &arch).unwrap();
        assert_eq!(a.params().checksum(), b.params().checksum());
        assert_eq!(da.params().checksum(), db.params().checksum());
        assert_eq!(a, b);
        assert_ne!(a.params().checksum(), c.params().checksum());
    }

    #[test]
    fn kaiming_weights_are_centred() {
        let (enc, _) = init_params::<f64>(0, &ArchSpec::default()).unwrap();
        for (name, t) in enc.params().iter() {
            if name.ends_with("bias") {
                assert!(t.data().iter().all(|&v| v == 0.0));
                continue;
            }
            let fan_in: usize = t.shape()[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            let sigma = bound / 3f64.sqrt();
            let n = t.numel() as f64;
            let mean = t.sum() / n;
            assert!(mean.abs() < 3.0 * sigma / n.sqrt(), "{name}: mean {mean}");
            assert!(t.data().iter().all(|v| v.abs() <= bound));
        }
    }

    #[test]
    fn reconstruction_gradient_reaches_every_tensor() {
        let arch = ArchSpec { encoder: reduced(), decoder: DecoderVariant::Shallow };
        let (enc, dec) = init_params::<f64>(11, &arch).unwrap();
        let tape = Tape::new();
        let (pe, pd) = (enc.params().bind(&tape), dec.params().bind(&tape));
        let img = Tensor::from_fn(vec![4, 1, 6, 6], |i| ((i * 7919) % 97) as f64 / 97.0);
        let x = tape.constant(img);
        let r = dec.forward(&pd, enc.forward(&pe, x).unwrap()).unwrap();
        let loss = r.sub(x).unwrap().square().unwrap().mean().unwrap();
        tape.backward(loss).unwrap();
        for (g, name) in pe.grads(&tape).iter().chain(pd.grads(&tape).iter()).zip(enc.params().names().iter().chain(dec.params().names())) {
            assert!(g.data().iter().any(|&v| v != 0.0), "{name} got no gradient");
        }
    }
}
