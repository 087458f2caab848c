//! Label-free auxiliary tasks whose losses regularize the encoder.
//!
//! A regularizer sees the episode images and their embeddings, never the
//! labels. Its weighted loss is added to the task losses:
//! `J = sum_i J_i + sum_r lambda_r * R_r`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Bound, Decoder, DecoderVariant, EncoderSpec, ParamSet};
use crate::rng::{self, Stream};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Which episode images the autoencoder reconstructs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AeImages {
    Support,
    #[default]
    All,
}

/// One `[[metatasks]]` entry of a run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaTaskSpec {
    pub name: String,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub decoder: DecoderVariant,
    #[serde(default)]
    pub images: AeImages,
}

fn default_lambda() -> f64 {
    1.0
}

impl MetaTaskSpec {
    pub fn autoencoder(lambda: f64, decoder: DecoderVariant, images: AeImages) -> Self {
        MetaTaskSpec {
            name: AUTOENCODER.into(),
            lambda,
            decoder,
            images,
        }
    }
}

/// Unlabeled view of an episode on the tape.
#[derive(Clone, Copy, Debug)]
pub struct RegInput<'t, T> {
    /// `[B, C, H, W]`, support images first.
    pub images: Var<'t, T>,
    /// `[B, E]` embeddings of `images`.
    pub embeddings: Var<'t, T>,
    pub num_support: usize,
}

pub trait MetaTaskRegularizer<T: Scalar> {
    fn name(&self) -> &str;
    fn lambda(&self) -> f64;
    fn params(&self) -> &ParamSet<T>;
    fn params_mut(&mut self) -> &mut ParamSet<T>;
    /// Scalar loss on the tape; `params` are this regularizer's own
    /// parameters bound to the same tape as `input`.
    fn loss<'t>(&self, params: &Bound<'t, T>, input: &RegInput<'t, T>) -> Result<Var<'t, T>>;
}

pub const AUTOENCODER: &str = "autoencoder";

/// Mean squared error over every element.
pub fn reconstruction_mse<'t, T: Scalar>(recon: Var<'t, T>, target: Var<'t, T>) -> Result<Var<'t, T>> {
    if recon.shape() != target.shape() {
        return Err(Error::shape("reconstruction_mse", &recon.shape(), &target.shape()));
    }
    recon.sub(target)?.square()?.mean()
}

/// Decoder `g` trained to reconstruct images from their embeddings.
#[derive(Clone, Debug)]
pub struct AutoencoderRegularizer<T> {
    pub decoder: Decoder<T>,
    pub lambda: f64,
    pub images: AeImages,
}

impl<T: Scalar> AutoencoderRegularizer<T> {
    pub fn new(decoder: Decoder<T>, lambda: f64, images: AeImages) -> Result<Self> {
        check_lambda(lambda)?;
        Ok(AutoencoderRegularizer { decoder, lambda, images })
    }
}

impl<T: Scalar> MetaTaskRegularizer<T> for AutoencoderRegularizer<T> {
    fn name(&self) -> &str {
        AUTOENCODER
    }

    fn lambda(&self) -> f64 {
        self.lambda
    }

    fn params(&self) -> &ParamSet<T> {
        self.decoder.params()
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        self.decoder.params_mut()
    }

    fn loss<'t>(&self, params: &Bound<'t, T>, input: &RegInput<'t, T>) -> Result<Var<'t, T>> {
        let (images, emb) = match self.images {
            AeImages::All => (input.images, input.embeddings),
            AeImages::Support => {
                let rows: Vec<usize> = (0..input.num_support).collect();
                let shape = input.images.shape();
                let mut sub = shape.clone();
                sub[0] = rows.len();
                let imgs = input.images.flatten()?.select_rows(&rows)?.reshape(sub)?;
                (imgs, input.embeddings.select_rows(&rows)?)
            }
        };
        let recon = self.decoder.forward(params, emb)?;
        reconstruction_mse(recon, images)
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("regularizer weight must be finite and non-negative, got {lambda}")));
    }
    Ok(())
}

/// Builds a regularizer from its config entry. `index` separates the random
/// streams of several regularizers sharing one run seed.
pub type RegularizerFactory<T> = fn(&MetaTaskSpec, &EncoderSpec, u64, usize) -> Result<Box<dyn MetaTaskRegularizer<T>>>;

/// Regularizer constructors keyed by config name.
pub struct Registry<T> {
    factories: BTreeMap<String, RegularizerFactory<T>>,
}

fn build_autoencoder<T: Scalar>(
    spec: &MetaTaskSpec,
    enc: &EncoderSpec,
    seed: u64,
    index: usize,
) -> Result<Box<dyn MetaTaskRegularizer<T>>> {
    // the first decoder shares the stream used by `models::init_params`
    let mut r = if index == 0 {
        rng::stream(seed, Stream::Decoder)
    } else {
        rng::indexed(seed, Stream::Decoder, index as u64)
    };
    let dec = Decoder::init(spec.decoder, enc.clone(), &mut r)?;
    Ok(Box::new(AutoencoderRegularizer::new(dec, spec.lambda, spec.images)?))
}

impl<T: Scalar> Default for Registry<T> {
    fn default() -> Self {
        let mut r = Registry { factories: BTreeMap::new() };
        r.register(AUTOENCODER, build_autoencoder::<T>);
        r
    }
}

impl<T: Scalar> Registry<T> {
    pub fn register(&mut self, name: &str, factory: RegularizerFactory<T>) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn build(&self, spec: &MetaTaskSpec, enc: &EncoderSpec, seed: u64, index: usize) -> Result<Box<dyn MetaTaskRegularizer<T>>> {
        check_lambda(spec.lambda)?;
        let f = self.factories.get(&spec.name).ok_or_else(|| {
            Error::Config(format!("unknown meta-task {:?} (known: {})", spec.name, self.names().join(", ")))
        })?;
        f(spec, enc, seed, index)
    }
}

/// A regularizer's loss on the tape with its weight.
#[derive(Clone, Copy, Debug)]
pub struct RegTerm<'t, T> {
    pub name: &'t str,
    pub lambda: f64,
    pub loss: Var<'t, T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegLoss {
    pub name: String,
    pub raw: f64,
    pub lambda: f64,
    pub weighted: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task_loss: f64,
    pub reg_losses: Vec<RegLoss>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn task_only(task_loss: f64) -> Self {
        LossBreakdown {
            task_loss,
            reg_losses: Vec::new(),
            total: task_loss,
        }
    }

    /// Sum of the raw regularizer losses.
    pub fn reg_raw(&self) -> f64 {
        self.reg_losses.iter().map(|r| r.raw).sum()
    }
}

fn scalar_of<T: Scalar>(v: Var<'_, T>, what: &str) -> Result<f64> {
    if v.value().numel() != 1 {
        return Err(Error::NonScalarRoot(v.shape()));
    }
    let x = v.item().as_f64();
    if !x.is_finite() {
        return Err(Error::NumericalAbort(format!("{what} is {x}")));
    }
    Ok(x)
}

/// `sum_i task_i + sum_r lambda_r * reg_r` on the tape.
///
/// Terms with `lambda == 0` are reported but not added to the graph, so the
/// result (and its gradient) is identical to the task-only objective.
pub fn composite_loss<'t, T: Scalar>(task_losses: &[Var<'t, T>], regs: &[RegTerm<'t, T>]) -> Result<(Var<'t, T>, LossBreakdown)> {
    let first = *task_losses
        .first()
        .ok_or_else(|| Error::InvalidArgument("composite loss without task losses".into()))?;
    let mut total = first;
    let mut task_value = scalar_of(first, "task loss")?;
    for &t in &task_losses[1..] {
        task_value += scalar_of(t, "task loss")?;
        total = total.add(t)?;
    }
    let mut reg_losses = Vec::with_capacity(regs.len());
    for r in regs {
        check_lambda(r.lambda)?;
        let raw = scalar_of(r.loss, r.name)?;
        if r.lambda != 0.0 {
            total = total.add(r.loss.scale(T::lit(r.lambda))?)?;
        }
        reg_losses.push(RegLoss {
            name: r.name.to_string(),
            raw,
            lambda: r.lambda,
            weighted: r.lambda * raw,
        });
    }
    let breakdown = LossBreakdown {
        task_loss: task_value,
        total: scalar_of(total, "total loss")?,
        reg_losses,
    };
    Ok((total, breakdown))
}

/// Per-task attachment: every task carries its own regularizer terms. The
/// result equals [`composite_loss`] over the flattened terms.
pub fn composite_loss_per_task<'t, T: Scalar>(tasks: &[(Var<'t, T>, Vec<RegTerm<'t, T>>)]) -> Result<(Var<'t, T>, LossBreakdown)> {
    let task_losses: Vec<_> = tasks.iter().map(|(t, _)| *t).collect();
    let regs: Vec<_> = tasks.iter().flat_map(|(_, r)| r.iter().copied()).collect();
    composite_loss(&task_losses, &regs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeparabilityReport {
    /// Largest `|grad(J) - (grad(task) + sum_r lambda_r grad(R_r))|`.
    pub max_abs_diff: f64,
    /// Same, divided by `max(1, |grad(J)|)` elementwise.
    pub max_scaled_diff: f64,
    pub tol: f64,
    pub passed: bool,
}

pub const SEPARABILITY_TOL: f64 = 1e-8;

/// Checks that the composite gradient with respect to `params` equals the
/// weighted sum of the component gradients, using one backward pass for the
/// composite, one for the task part and one per regularizer.
pub fn separability_check<'t, T: Scalar>(
    tape: &'t Tape<T>,
    params: &Bound<'t, T>,
    task_losses: &[Var<'t, T>],
    regs: &[RegTerm<'t, T>],
) -> Result<SeparabilityReport> {
    let (total, _) = composite_loss(task_losses, regs)?;
    let (task, _) = composite_loss(task_losses, &[])?;
    let run = |root: Var<'t, T>| -> Result<Vec<Tensor<T>>> {
        tape.clear_grads();
        tape.backward(root)?;
        let g = params.grads(tape);
        tape.clear_grads();
        Ok(g)
    };
    let g_total = run(total)?;
    let mut g_sum: Vec<Vec<f64>> = run(task)?
        .iter()
        .map(|t| t.data().iter().map(|v| v.as_f64()).collect())
        .collect();
    for r in regs {
        let g = run(r.loss)?;
        for (acc, t) in g_sum.iter_mut().zip(&g) {
            for (a, v) in acc.iter_mut().zip(t.data()) {
                *a += r.lambda * v.as_f64();
            }
        }
    }
    let (mut max_abs, mut max_scaled) = (0f64, 0f64);
    for (gt, gs) in g_total.iter().zip(&g_sum) {
        for (a, &b) in gt.data().iter().zip(gs) {
            let a = a.as_f64();
            let d = (a - b).abs();
            max_abs = max_abs.max(d);
            max_scaled = max_scaled.max(d / a.abs().max(1.0));
        }
    }
    Ok(SeparabilityReport {
        max_abs_diff: max_abs,
        max_scaled_diff: max_scaled,
        tol: SEPARABILITY_TOL,
        passed: max_scaled < SEPARABILITY_TOL,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Encoder, EncoderSpec};

    fn scalar(tape: &Tape<f64>, v: f64) -> Var<'_, f64> {
        tape.constant(Tensor::scalar(v))
    }

    #[test]
    fn single_regularizer_sum() {
        let tape = Tape::<f64>::new();
        let regs = [RegTerm { name: "ae", lambda: 0.1, loss: scalar(&tape, 0.5) }];
        let (j, b) = composite_loss(&[scalar(&tape, 0.3133)], &regs).unwrap();
        assert!((j.item() - 0.3633).abs() < 1e-12);
        assert!((b.total - (b.task_loss + 0.1 * b.reg_losses[0].raw)).abs() < 1e-12);
    }

    #[test]
    fn two_regularizers_sum() {
        let tape = Tape::<f64>::new();
        let regs = [
            RegTerm { name: "a", lambda: 0.1, loss: scalar(&tape, 1.0) },
            RegTerm { name: "b", lambda: 0.05, loss: scalar(&tape, 2.0) },
        ];
        let (_, b) = composite_loss(&[scalar(&tape, 1.0)], &regs).unwrap();
        assert!((b.total - 1.2).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_is_exact() {
        let tape = Tape::<f64>::new();
        let task = scalar(&tape, 0.123_456_789);
        let regs = [RegTerm { name: "ae", lambda: 0.0, loss: scalar(&tape, 7.0) }];
        let (j, b) = composite_loss(&[task], &regs).unwrap();
        assert_eq!(j.item(), 0.123_456_789);
        assert_eq!(b.total, b.task_loss);
        assert_eq!(b.reg_losses[0].raw, 7.0);
    }

    #[test]
    fn negative_weight_rejected() {
        let tape = Tape::<f64>::new();
        let regs = [RegTerm { name: "ae", lambda: -0.1, loss: scalar(&tape, 1.0) }];
        assert!(composite_loss(&[scalar(&tape, 1.0)], &regs).is_err());
        let spec = MetaTaskSpec::autoencoder(-1.0, DecoderVariant::Shallow, AeImages::All);
        assert!(Registry::<f64>::default().build(&spec, &EncoderSpec::default(), 0, 0).is_err());
    }

    #[test]
    fn per_task_and_global_agree() {
        let tape = Tape::<f64>::new();
        let (t1, t2) = (scalar(&tape, 0.5), scalar(&tape, 0.25));
        let (r1, r2) = (scalar(&tape, 2.0), scalar(&tape, 4.0));
        let mk = |l| RegTerm { name: "ae", lambda: 0.5, loss: l };
        let (_, a) = composite_loss_per_task(&[(t1, vec![mk(r1)]), (t2, vec![mk(r2)])]).unwrap();
        let (_, b) = composite_loss(&[t1, t2], &[mk(r1), mk(r2)]).unwrap();
        assert_eq!(a.total, b.total);
        assert!((a.total - 3.75).abs() < 1e-15);
    }

    #[test]
    fn mse_identity_and_zero_reconstruction() {
        let tape = Tape::<f64>::new();
        let x = Tensor::from_f64(vec![2, 1, 2, 2], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]).unwrap();
        let xv = tape.constant(x.clone());
        assert_eq!(reconstruction_mse(xv, xv).unwrap().item(), 0.0);
        let z = tape.constant(Tensor::zeros(vec![2, 1, 2, 2]));
        let oracle = x.data().iter().map(|v| v * v).sum::<f64>() / 8.0;
        assert!((reconstruction_mse(z, xv).unwrap().item() - oracle).abs() < 1e-15);
        let bad = tape.constant(Tensor::zeros(vec![2, 4]));
        assert!(reconstruction_mse(bad, xv).is_err());
    }

    #[test]
    fn unknown_metatask_is_config_error() {
        let spec = MetaTaskSpec {
            name: "rotation".into(),
            lambda: 1.0,
            decoder: DecoderVariant::Shallow,
            images: AeImages::All,
        };
        assert!(matches!(
            Registry::<f64>::default().build(&spec, &EncoderSpec::default(), 0, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn autoencoder_gradient_is_separable() {
        let spec = EncoderSpec { in_channels: 1, height: 6, width: 6, hidden: 3, blocks: 2 };
        let enc = Encoder::<f64>::init(spec.clone(), &mut rng::stream(1, Stream::Encoder)).unwrap();
        let reg = Registry::<f64>::default()
            .build(&MetaTaskSpec::autoencoder(0.3, DecoderVariant::Shallow, AeImages::All), &spec, 1, 0)
            .unwrap();
        let tape = Tape::new();
        let pe = enc.params().bind(&tape);
        let pd = reg.params().bind(&tape);
        let imgs = Tensor::from_fn(vec![3, 1, 6, 6], |i| ((i * 37) % 11) as f64 / 11.0);
        let images = tape.constant(imgs);
        let emb = enc.forward(&pe, images).unwrap();
        let input = RegInput { images, embeddings: emb, num_support: 2 };
        let ae = reg.loss(&pd, &input).unwrap();
        let task = emb.square().unwrap().sum().unwrap();
        let all = Bound::from_vars(pe.vars().iter().chain(pd.vars()).copied().collect());
        let rep = separability_check(&tape, &all, &[task], &[RegTerm { name: AUTOENCODER, lambda: 0.3, loss: ae }]).unwrap();
        assert!(rep.passed, "{rep:?}");
    }
}
