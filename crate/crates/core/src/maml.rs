//! First-order MAML with an optional meta-task regularizer on the outer step.
//!
//! The inner loop adapts the encoder and a linear head on the support set
//! with plain gradient descent. Each inner step uses its own tape, dropped
//! before the next one, so nothing differentiates through the adaptation:
//! the query gradient at the adapted parameters is used as the outer
//! gradient for the original ones.

use serde::{Deserialize, Serialize};

use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::metatask::{LossBreakdown, MetaTaskRegularizer, RegInput, RegLoss};
use crate::models::{Bound, Encoder, Linear, ParamSet};
use crate::protonet::{argmax, EpisodeLoss, LossReduction};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Which parameters the regularizer sees on the outer step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AePhase {
    /// Original parameters, before the inner loop.
    #[default]
    PreAdapt,
    /// Adapted parameters of the episode.
    PostAdapt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MamlConfig {
    pub inner_lr: f64,
    pub inner_steps: usize,
    #[serde(default)]
    pub ae_phase: AePhase,
}

impl Default for MamlConfig {
    fn default() -> Self {
        MamlConfig {
            inner_lr: 0.01,
            inner_steps: 5,
            ae_phase: AePhase::PreAdapt,
        }
    }
}

impl MamlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_lr > 0.0 && self.inner_lr.is_finite()) {
            return Err(Error::Config(format!("inner_lr must be positive, got {}", self.inner_lr)));
        }
        if self.inner_steps == 0 {
            return Err(Error::Config("inner_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// `steps` rounds of `theta <- theta - alpha * grad L(theta)`, one fresh tape
/// per round. `alpha` may be zero, which returns `params` unchanged.
pub fn inner_adapt<T, F>(params: &ParamSet<T>, alpha: f64, steps: usize, mut loss: F) -> Result<ParamSet<T>>
where
    T: Scalar,
    F: for<'t> FnMut(&'t Tape<T>, &Bound<'t, T>) -> Result<Var<'t, T>>,
{
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("inner learning rate {alpha}")));
    }
    let mut theta = params.clone();
    let a = T::lit(alpha);
    for step in 0..steps {
        let tape = Tape::new();
        let bound = theta.bind(&tape);
        let l = loss(&tape, &bound)?;
        let v = l.item();
        if !v.is_finite() {
            return Err(Error::NumericalAbort(format!("inner step {step}: support loss is {v}")));
        }
        tape.backward(l)?;
        let grads = bound.grads(&tape);
        if alpha == 0.0 {
            continue;
        }
        for (t, g) in theta.tensors_mut().iter_mut().zip(&grads) {
            for (p, &gi) in t.data_mut().iter_mut().zip(g.data()) {
                *p -= a * gi;
            }
        }
    }
    Ok(theta)
}

/// Conv-4 encoder with a linear `E -> way` classifier.
#[derive(Clone, Debug)]
pub struct MamlModel<T> {
    pub encoder: Encoder<T>,
    pub head: Linear<T>,
}

impl<T: Scalar> MamlModel<T> {
    pub fn new(encoder: Encoder<T>, way: usize, seed: u64) -> Self {
        let head = Linear::init("head", encoder.embedding_dim(), way, seed);
        MamlModel { encoder, head }
    }

    pub fn way(&self) -> usize {
        self.head.outputs()
    }

    /// Encoder tensors followed by head tensors.
    pub fn params(&self) -> ParamSet<T> {
        self.encoder.params().chain(self.head.params())
    }

    fn num_encoder(&self) -> usize {
        self.encoder.params().len()
    }

    /// Splits a bound [`MamlModel::params`] set into encoder and head parts.
    fn split<'t>(&self, all: &Bound<'t, T>) -> (Bound<'t, T>, Bound<'t, T>) {
        let (e, h) = all.vars().split_at(self.num_encoder());
        (Bound::from_vars(e.to_vec()), Bound::from_vars(h.to_vec()))
    }

    /// Logits `[B, way]` and the cross-entropy of `labels`.
    pub fn loss<'t>(
        &self,
        all: &Bound<'t, T>,
        images: Var<'t, T>,
        labels: &[usize],
        reduction: LossReduction,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let (pe, ph) = self.split(all);
        let logits = self.head.forward(&ph, self.encoder.forward(&pe, images)?)?;
        let nll = logits.log_softmax()?.pick(labels)?.neg()?;
        let loss = match reduction {
            LossReduction::Sum => nll.sum()?,
            LossReduction::Mean => nll.mean()?,
        };
        Ok((logits, loss))
    }

    fn check_way(&self, episode: &Episode<T>) -> Result<()> {
        if episode.shape.way != self.way() {
            return Err(Error::InvalidArgument(format!(
                "episode is {}-way but the classifier has {} outputs",
                episode.shape.way,
                self.way()
            )));
        }
        Ok(())
    }

    /// Adapts a copy of the parameters on the episode's support set.
    pub fn adapt(&self, episode: &Episode<T>, cfg: &MamlConfig, reduction: LossReduction) -> Result<ParamSet<T>> {
        self.check_way(episode)?;
        let images = episode.support_images()?;
        let labels = episode.support_labels();
        inner_adapt(&self.params(), cfg.inner_lr, cfg.inner_steps, |tape, p| {
            Ok(self.loss(p, tape.constant(images.clone()), &labels, reduction)?.1)
        })
    }

    /// Query predictions and losses under `adapted` parameters.
    pub fn evaluate_query(&self, adapted: &ParamSet<T>, episode: &Episode<T>, reduction: LossReduction) -> Result<EpisodeLoss> {
        let tape = Tape::new();
        let bound = adapted.bind_frozen(&tape);
        let labels = episode.query_labels();
        let (logits, loss) = self.loss(&bound, tape.constant(episode.query_images()?), &labels, reduction)?;
        Ok(summarize(logits, loss, &labels))
    }
}

fn summarize<T: Scalar>(logits: Var<'_, T>, loss: Var<'_, T>, labels: &[usize]) -> EpisodeLoss {
    let lv = logits.value();
    let way = lv.shape()[1];
    let mut per_query_losses = Vec::with_capacity(labels.len());
    let mut predictions = Vec::with_capacity(labels.len());
    for (m, &y) in labels.iter().enumerate() {
        let row: Vec<f64> = lv.data()[m * way..(m + 1) * way].iter().map(|v| v.as_f64()).collect();
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        per_query_losses.push(lse - row[y]);
        predictions.push(argmax(&row));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    EpisodeLoss {
        per_query_losses,
        task_loss: loss.item().as_f64(),
        accuracy: correct as f64 / labels.len() as f64,
        predictions,
    }
}

/// Gradient of one regularizer, unweighted.
#[derive(Clone, Debug)]
pub struct RegGrad<T> {
    /// With respect to [`MamlModel::params`] (head entries are zero).
    pub model: Vec<Tensor<T>>,
    /// With respect to the regularizer's own parameters.
    pub own: Vec<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct OuterGrads<T> {
    /// Query-loss gradient at the adapted parameters.
    pub task: Vec<Tensor<T>>,
    /// One entry per regularizer; `None` when its weight is zero.
    pub regs: Vec<Option<RegGrad<T>>>,
    pub breakdown: LossBreakdown,
    pub query: EpisodeLoss,
}

/// Query loss under `adapted` plus the regularizer terms, each with its
/// own backward pass. First-order: the returned task gradient is taken with
/// respect to `adapted` and applies unchanged to the original parameters.
pub fn outer_step<T: Scalar>(
    model: &MamlModel<T>,
    regs: &[Box<dyn MetaTaskRegularizer<T>>],
    episode: &Episode<T>,
    adapted: &ParamSet<T>,
    cfg: &MamlConfig,
    reduction: LossReduction,
) -> Result<OuterGrads<T>> {
    model.check_way(episode)?;
    let tape = Tape::new();
    let bound = adapted.bind(&tape);
    let labels = episode.query_labels();
    let (logits, loss) = model.loss(&bound, tape.constant(episode.query_images()?), &labels, reduction)?;
    let query = summarize(logits, loss, &labels);
    if !query.task_loss.is_finite() {
        return Err(Error::NumericalAbort(format!("query loss is {}", query.task_loss)));
    }
    tape.backward(loss)?;
    let task = bound.grads(&tape);
    drop(tape);

    let theta = match cfg.ae_phase {
        AePhase::PreAdapt => model.params(),
        AePhase::PostAdapt => adapted.clone(),
    };
    let mut reg_grads = Vec::with_capacity(regs.len());
    let mut reg_losses = Vec::with_capacity(regs.len());
    let mut total = query.task_loss;
    if !regs.is_empty() {
        let images = episode.stacked_images()?;
        for reg in regs {
            let tape = Tape::new();
            let pm = theta.bind(&tape);
            let po = reg.params().bind(&tape);
            let (pe, _) = model.split(&pm);
            let img = tape.constant(images.clone());
            let emb = model.encoder.forward(&pe, img)?;
            let input = RegInput {
                images: img,
                embeddings: emb,
                num_support: episode.support.len(),
            };
            let l = reg.loss(&po, &input)?;
            let raw = l.item().as_f64();
            if !raw.is_finite() {
                return Err(Error::NumericalAbort(format!("{} loss is {raw}", reg.name())));
            }
            let lambda = reg.lambda();
            if lambda != 0.0 {
                tape.backward(l)?;
                reg_grads.push(Some(RegGrad {
                    model: pm.grads(&tape),
                    own: po.grads(&tape),
                }));
                total += lambda * raw;
            } else {
                reg_grads.push(None);
            }
            reg_losses.push(RegLoss {
                name: reg.name().to_string(),
                raw,
                lambda,
                weighted: lambda * raw,
            });
        }
    }
    Ok(OuterGrads {
        task,
        regs: reg_grads,
        breakdown: LossBreakdown {
            task_loss: query.task_loss,
            reg_losses,
            total,
        },
        query,
    })
}
