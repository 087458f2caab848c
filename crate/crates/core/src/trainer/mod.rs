//! Episodic training loop, evaluation and run artifacts.
//!
//! Per training episode a [`Trainer`] computes the episode loss and every
//! regularizer loss on one tape, then either
//!
//! * two-step: steps the model with the classification gradient at `lr` and
//!   afterwards steps model and regularizer parameters with the weighted
//!   regularizer gradient at `autoencoder_lr` (separate Adam states, both
//!   gradients taken before either update), or
//! * combined: steps everything once at `lr` on the weighted sum.

pub mod config;
mod eval;
mod metrics;
mod optim;
mod report;

pub use config::{Algo, DatasetSpec, Mode, ModelSpec, Optimizer, Precision, RunConfig};
pub use eval::{evaluate, EmbeddingStub, EpisodeLearner, EvalOutcome, MamlLearner, ProtoLearner};
pub use metrics::{read_jsonl, write_summary_csv, EvalSummary, JsonlWriter, MetricsRecord, Welford};
pub use optim::AdamState;
pub use report::{classification_report, ClassRow, ClassificationReport, PredictionRecord};

use serde::{Deserialize, Serialize};

use crate::episodes::{sample_episode, EpisodeShape, MetaDataset, Split};
use crate::error::{Error, Result};
use crate::maml::{outer_step, MamlConfig, MamlModel};
use crate::metatask::{composite_loss, LossBreakdown, MetaTaskRegularizer, MetaTaskSpec, RegInput, RegLoss, RegTerm, Registry};
use crate::models::{Checkpoint, Encoder, EncoderSpec, Linear, ParamSet};
use crate::protonet::{episode_forward, DistanceMetric, LossReduction};
use crate::rng::{self, Rng, Stream};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

/// The learner being meta-trained.
#[derive(Clone, Debug)]
pub enum Model<T> {
    Proto(Encoder<T>),
    Maml(MamlModel<T>),
}

impl<T: Scalar> Model<T> {
    pub fn encoder(&self) -> &Encoder<T> {
        match self {
            Model::Proto(e) => e,
            Model::Maml(m) => &m.encoder,
        }
    }

    /// Encoder tensors, then head tensors for MAML.
    pub fn params(&self) -> ParamSet<T> {
        match self {
            Model::Proto(e) => e.params().clone(),
            Model::Maml(m) => m.params(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Model::Proto(e) => e.params_mut().tensors_mut().iter_mut().collect(),
            Model::Maml(m) => {
                let MamlModel { encoder, head } = m;
                encoder
                    .params_mut()
                    .tensors_mut()
                    .iter_mut()
                    .chain(head.params_mut().tensors_mut().iter_mut())
                    .collect()
            }
        }
    }

    pub fn learner<'a>(&'a self, maml: &MamlConfig, metric: DistanceMetric, reduction: LossReduction) -> Box<dyn EpisodeLearner<T> + 'a> {
        match self {
            Model::Proto(e) => Box::new(ProtoLearner {
                encoder: e,
                metric,
                reduction,
            }),
            Model::Maml(m) => Box::new(MamlLearner {
                model: m,
                cfg: maml.clone(),
                reduction,
            }),
        }
    }
}

/// Run metadata stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub algo: Algo,
    pub encoder: EncoderSpec,
    pub metric: DistanceMetric,
    pub loss_reduction: LossReduction,
    pub maml: MamlConfig,
    pub dataset: DatasetSpec,
    pub metatasks: Vec<MetaTaskSpec>,
    /// Training episodes completed.
    pub episode: usize,
}

fn reg_prefix(r: usize) -> String {
    format!("metatask{r}.")
}

/// Model gradients and per-regularizer gradients.
type SplitGrads<T> = (Vec<Tensor<T>>, Vec<Vec<Tensor<T>>>);

/// Gradients of one training update.
struct StepGrads<T> {
    model: Vec<Tensor<T>>,
    /// Combined mode: regularizer parameter gradients of the total loss.
    regs: Vec<Vec<Tensor<T>>>,
    /// Two-step mode: weighted regularizer gradient for model and regularizers.
    ae: Option<SplitGrads<T>>,
    breakdown: LossBreakdown,
    accuracy: f64,
}

fn add_into<T: Scalar>(acc: &mut [Tensor<T>], other: &[Tensor<T>]) {
    for (a, b) in acc.iter_mut().zip(other) {
        for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
            *x += y;
        }
    }
}

fn scaled<T: Scalar>(ts: &[Tensor<T>], s: f64) -> Vec<Tensor<T>> {
    let s = T::lit(s);
    ts.iter().map(|t| t.map(|v| v * s)).collect()
}

fn zeros_like<T: Scalar>(ps: &ParamSet<T>) -> Vec<Tensor<T>> {
    ps.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect()
}

impl<T: Scalar> StepGrads<T> {
    fn merge(&mut self, o: StepGrads<T>, n: usize) {
        add_into(&mut self.model, &o.model);
        for (a, b) in self.regs.iter_mut().zip(&o.regs) {
            add_into(a, b);
        }
        match (&mut self.ae, o.ae) {
            (Some((am, ar)), Some((bm, br))) => {
                add_into(am, &bm);
                for (a, b) in ar.iter_mut().zip(&br) {
                    add_into(a, b);
                }
            }
            (slot @ None, Some(b)) => *slot = Some(b),
            _ => {}
        }
        let b = &mut self.breakdown;
        b.task_loss += o.breakdown.task_loss;
        b.total += o.breakdown.total;
        for (x, y) in b.reg_losses.iter_mut().zip(o.breakdown.reg_losses) {
            x.raw += y.raw;
            x.weighted += y.weighted;
        }
        // running mean over the n episodes merged so far
        self.accuracy += (o.accuracy - self.accuracy) / n as f64;
    }

    fn all_finite(&self) -> bool {
        let ok = |ts: &[Tensor<T>]| ts.iter().all(Tensor::is_finite);
        ok(&self.model)
            && self.regs.iter().all(|r| ok(r))
            && self.ae.as_ref().is_none_or(|(m, r)| ok(m) && r.iter().all(|x| ok(x)))
    }
}

pub struct Trainer<T: Scalar> {
    cfg: RunConfig,
    data: MetaDataset<T>,
    model: Model<T>,
    regs: Vec<Box<dyn MetaTaskRegularizer<T>>>,
    main_opt: AdamState<T>,
    ae_opt: AdamState<T>,
    sampler: Rng,
    episode: usize,
    acc: Welford,
    loss: Welford,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let data = cfg.dataset.load::<T>()?;
        Self::with_data(cfg, data)
    }

    pub fn with_data(cfg: RunConfig, data: MetaDataset<T>) -> Result<Self> {
        cfg.validate()?;
        data.train.check_episode_shape(cfg.train)?;
        data.test.check_episode_shape(cfg.test)?;
        if cfg.eval_interval > 0 {
            data.val.check_episode_shape(cfg.test)?;
        }
        let spec = cfg.model.encoder(data.image_shape());
        let encoder = Encoder::init(spec.clone(), &mut rng::stream(cfg.seed, Stream::Encoder))?;
        let model = match cfg.algo {
            Algo::Protonet => Model::Proto(encoder),
            Algo::Maml => Model::Maml(MamlModel::new(encoder, cfg.train.way, cfg.seed)),
        };
        let registry = Registry::default();
        let regs = cfg
            .metatasks
            .iter()
            .enumerate()
            .map(|(i, m)| registry.build(m, &spec, cfg.seed, i))
            .collect::<Result<Vec<_>>>()?;
        let model_params = model.params();
        let reg_tensors = || regs.iter().flat_map(|r| r.params().tensors().iter());
        let main_opt = match cfg.mode {
            Mode::Combined => AdamState::new(model_params.tensors().iter().chain(reg_tensors())),
            Mode::TwoStep => AdamState::new(model_params.tensors()),
        };
        let ae_opt = AdamState::new(model_params.tensors().iter().chain(reg_tensors()));
        Ok(Trainer {
            sampler: rng::stream(cfg.seed, Stream::TrainSampler),
            cfg,
            data,
            model,
            regs,
            main_opt,
            ae_opt,
            episode: 0,
            acc: Welford::new(),
            loss: Welford::new(),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn data(&self) -> &MetaDataset<T> {
        &self.data
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn regularizers(&self) -> &[Box<dyn MetaTaskRegularizer<T>>] {
        &self.regs
    }

    /// Training episodes completed.
    pub fn episode(&self) -> usize {
        self.episode
    }

    fn proto_grads(&self, encoder: &Encoder<T>, ep: &crate::episodes::Episode<T>) -> Result<StepGrads<T>> {
        let tape = Tape::new();
        let pe = encoder.params().bind(&tape);
        let (emb, fwd) = episode_forward(&tape, encoder, &pe, ep, self.cfg.metric, self.cfg.loss_reduction)?;
        let input = RegInput {
            images: emb.images,
            embeddings: emb.all,
            num_support: ep.support.len(),
        };
        let bounds: Vec<_> = self.regs.iter().map(|r| r.params().bind(&tape)).collect();
        let mut terms = Vec::with_capacity(self.regs.len());
        for (r, b) in self.regs.iter().zip(&bounds) {
            terms.push(RegTerm {
                name: r.name(),
                lambda: r.lambda(),
                loss: r.loss(b, &input)?,
            });
        }
        let (total, breakdown) = composite_loss(&[fwd.task_loss], &terms)?;
        let accuracy = fwd.summary.accuracy;
        match self.cfg.mode {
            Mode::Combined => {
                tape.backward(total)?;
                Ok(StepGrads {
                    model: pe.grads(&tape),
                    regs: bounds.iter().map(|b| b.grads(&tape)).collect(),
                    ae: None,
                    breakdown,
                    accuracy,
                })
            }
            Mode::TwoStep => {
                tape.backward(fwd.task_loss)?;
                let model = pe.grads(&tape);
                tape.clear_grads();
                let mut root = None;
                for t in terms.iter().filter(|t| t.lambda != 0.0) {
                    let w = t.loss.scale(T::lit(t.lambda))?;
                    root = Some(match root {
                        None => w,
                        Some(r) => w.add(r)?,
                    });
                }
                let ae = match root {
                    Some(r) => {
                        tape.backward(r)?;
                        Some((pe.grads(&tape), bounds.iter().map(|b| b.grads(&tape)).collect()))
                    }
                    None => None,
                };
                Ok(StepGrads {
                    model,
                    regs: Vec::new(),
                    ae,
                    breakdown,
                    accuracy,
                })
            }
        }
    }

    fn maml_grads(&self, m: &MamlModel<T>, ep: &crate::episodes::Episode<T>) -> Result<StepGrads<T>> {
        let cfg = self.cfg.maml();
        let adapted = m.adapt(ep, &cfg, self.cfg.loss_reduction)?;
        let og = outer_step(m, &self.regs, ep, &adapted, &cfg, self.cfg.loss_reduction)?;
        let weighted_model = |acc: &mut Option<Vec<Tensor<T>>>| {
            for (r, g) in self.regs.iter().zip(&og.regs) {
                if let Some(g) = g {
                    let w = scaled(&g.model, r.lambda());
                    match acc {
                        Some(a) => add_into(a, &w),
                        None => *acc = Some(w),
                    }
                }
            }
        };
        let own: Vec<Vec<Tensor<T>>> = self
            .regs
            .iter()
            .zip(&og.regs)
            .map(|(r, g)| match g {
                Some(g) => scaled(&g.own, r.lambda()),
                None => zeros_like(r.params()),
            })
            .collect();
        let accuracy = og.query.accuracy;
        match self.cfg.mode {
            Mode::Combined => {
                let mut model = og.task;
                let mut extra = None;
                weighted_model(&mut extra);
                if let Some(e) = extra {
                    add_into(&mut model, &e);
                }
                Ok(StepGrads {
                    model,
                    regs: own,
                    ae: None,
                    breakdown: og.breakdown,
                    accuracy,
                })
            }
            Mode::TwoStep => {
                let mut extra = None;
                weighted_model(&mut extra);
                Ok(StepGrads {
                    model: og.task,
                    regs: Vec::new(),
                    ae: extra.map(|e| (e, own)),
                    breakdown: og.breakdown,
                    accuracy,
                })
            }
        }
    }

    /// Samples `tasks_per_step` episodes, updates the parameters once and
    /// returns the log record. On error no parameter has changed.
    pub fn step(&mut self) -> Result<MetricsRecord> {
        let mut acc: Option<StepGrads<T>> = None;
        for i in 0..self.cfg.tasks_per_step {
            let ep = sample_episode(&self.data.train, self.cfg.train, &mut self.sampler)?;
            let g = match &self.model {
                Model::Proto(e) => self.proto_grads(e, &ep)?,
                Model::Maml(m) => self.maml_grads(m, &ep)?,
            };
            match &mut acc {
                None => acc = Some(g),
                Some(a) => a.merge(g, i + 1),
            }
        }
        let g = acc.expect("tasks_per_step >= 1");
        if !g.breakdown.total.is_finite() || !g.all_finite() {
            return Err(Error::NumericalAbort(format!(
                "episode {}: loss {} or its gradient is not finite",
                self.episode + 1,
                g.breakdown.total
            )));
        }

        let Trainer { model, regs, main_opt, ae_opt, cfg, .. } = self;
        let mut model_t = model.tensors_mut();
        match cfg.mode {
            Mode::Combined => {
                let mut grads = g.model;
                for r in regs.iter_mut() {
                    model_t.extend(r.params_mut().tensors_mut().iter_mut());
                }
                grads.extend(g.regs.into_iter().flatten());
                debug_assert_eq!(grads.len(), model_t.len());
                main_opt.step(model_t, &grads, cfg.lr)?;
            }
            Mode::TwoStep => {
                main_opt.step(model_t, &g.model, cfg.lr)?;
                if let Some((gm, gr)) = g.ae {
                    let mut ts = model.tensors_mut();
                    for r in regs.iter_mut() {
                        ts.extend(r.params_mut().tensors_mut().iter_mut());
                    }
                    let grads: Vec<Tensor<T>> = gm.into_iter().chain(gr.into_iter().flatten()).collect();
                    ae_opt.step(ts, &grads, cfg.autoencoder_lr)?;
                }
            }
        }

        self.episode += 1;
        self.acc.push(g.accuracy);
        self.loss.push(g.breakdown.total);
        let has_regs = !g.breakdown.reg_losses.is_empty();
        Ok(MetricsRecord {
            episode: self.episode,
            split: Split::Train.to_string(),
            loss_total: g.breakdown.total,
            loss_task: g.breakdown.task_loss,
            loss_ae_raw: has_regs.then(|| g.breakdown.reg_raw()),
            lambda: g.breakdown.reg_losses.first().map(|r: &RegLoss| r.lambda),
            accuracy: g.accuracy,
            acc_running_mean: self.acc.mean(),
            acc_running_std: self.acc.std(),
            loss_running_mean: self.loss.mean(),
            loss_running_std: self.loss.std(),
        })
    }

    /// Evaluates the current model on a split; meta-tasks play no part.
    pub fn evaluate(&self, split: Split, shape: EpisodeShape, episodes: usize, label: &str) -> Result<EvalOutcome> {
        let learner = self.model.learner(&self.cfg.maml(), self.cfg.metric, self.cfg.loss_reduction);
        evaluate(learner.as_ref(), self.data.get(split), shape, episodes, self.cfg.seed, label)
    }

    pub fn train_summary(&self) -> EvalSummary {
        EvalSummary {
            split: Split::Train.to_string(),
            episodes: self.episode,
            acc_mean: self.acc.mean(),
            acc_std: self.acc.std(),
            loss_mean: self.loss.mean(),
            loss_std: self.loss.std(),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        let mut params = self.model.params();
        for (i, r) in self.regs.iter().enumerate() {
            for (n, t) in r.params().iter() {
                params.push(format!("{}{n}", reg_prefix(i)), t.clone());
            }
        }
        let meta = CheckpointMeta {
            algo: self.cfg.algo,
            encoder: self.model.encoder().spec().clone(),
            metric: self.cfg.metric,
            loss_reduction: self.cfg.loss_reduction,
            maml: self.cfg.maml(),
            dataset: self.cfg.dataset.clone(),
            metatasks: self.cfg.metatasks.clone(),
            episode: self.episode,
        };
        Checkpoint {
            seed: self.cfg.seed,
            meta: serde_json::to_value(meta).expect("metadata serializes"),
            params,
        }
    }
}

/// Converts an evaluation summary into a log line at training episode `episode`.
pub fn summary_record(episode: usize, s: &EvalSummary) -> MetricsRecord {
    MetricsRecord {
        episode,
        split: s.split.clone(),
        loss_total: s.loss_mean,
        loss_task: s.loss_mean,
        loss_ae_raw: None,
        lambda: None,
        accuracy: s.acc_mean,
        acc_running_mean: s.acc_mean,
        acc_running_std: s.acc_std,
        loss_running_mean: s.loss_mean,
        loss_running_std: s.loss_std,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Train (running), last validation rows and the final test row.
    pub summaries: Vec<EvalSummary>,
    pub test: EvalSummary,
    pub final_checksum: u64,
}

/// Full run: training with periodic validation, a final test pass, and the
/// metrics log, CSV summary, prediction log and checkpoint on disk. On a
/// numerical failure the last good parameters are saved before returning.
pub fn train<T: Scalar>(cfg: RunConfig) -> Result<TrainOutcome> {
    let data = cfg.dataset.load::<T>()?;
    train_with_data(cfg, data)
}

pub fn train_with_data<T: Scalar>(cfg: RunConfig, data: MetaDataset<T>) -> Result<TrainOutcome> {
    let mut t = Trainer::with_data(cfg.clone(), data)?;
    let mut log = JsonlWriter::create(&cfg.metrics_log)?;
    let mut last_val: Vec<EvalSummary> = Vec::new();
    for _ in 0..cfg.total_episodes() {
        match t.step() {
            Ok(rec) => log.write(&rec)?,
            Err(e) => {
                log.flush()?;
                if e.is_numerical() {
                    t.checkpoint().save(&cfg.checkpoint)?;
                }
                return Err(e);
            }
        }
        if cfg.eval_interval > 0 && t.episode() % cfg.eval_interval == 0 {
            last_val.clear();
            let v = t.evaluate(Split::Val, cfg.test, cfg.val_episodes, "val")?;
            log.write(&summary_record(t.episode(), &v.summary))?;
            last_val.push(v.summary);
            if cfg.mixed_validation {
                let a = t.evaluate(Split::Train, cfg.test, cfg.val_episodes, "adapt")?;
                log.write(&summary_record(t.episode(), &a.summary))?;
                last_val.push(a.summary);
            }
        }
    }
    let test = t.evaluate(Split::Test, cfg.test, cfg.eval_episodes, "test")?;
    log.write(&summary_record(t.episode(), &test.summary))?;
    log.flush()?;

    let mut preds = JsonlWriter::create(&cfg.predictions_log)?;
    for p in &test.predictions {
        preds.write(p)?;
    }
    preds.flush()?;

    let mut summaries = vec![t.train_summary()];
    summaries.extend(last_val);
    summaries.push(test.summary.clone());
    write_summary_csv(&cfg.summary_csv, &summaries)?;
    let ckpt = t.checkpoint();
    ckpt.save(&cfg.checkpoint)?;
    Ok(TrainOutcome {
        summaries,
        test: test.summary,
        final_checksum: ckpt.params.checksum(),
    })
}

/// Model rebuilt from a checkpoint, with its metadata.
pub fn load_model<T: Scalar>(ckpt: &Checkpoint<T>) -> Result<(Model<T>, CheckpointMeta)> {
    let meta: CheckpointMeta =
        serde_json::from_value(ckpt.meta.clone()).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    let encoder = Encoder::from_params(meta.encoder.clone(), ckpt.group("encoder."))?;
    let model = match meta.algo {
        Algo::Protonet => Model::Proto(encoder),
        Algo::Maml => Model::Maml(MamlModel {
            encoder,
            head: Linear::from_params(ckpt.group("head."))?,
        }),
    };
    Ok((model, meta))
}

/// Evaluates a checkpoint on a split of its training dataset.
pub fn evaluate_checkpoint<T: Scalar>(
    ckpt: &Checkpoint<T>,
    split: Split,
    shape: EpisodeShape,
    episodes: usize,
    seed: u64,
) -> Result<EvalOutcome> {
    let (model, meta) = load_model(ckpt)?;
    let data = meta.dataset.load::<T>()?;
    let learner = model.learner(&meta.maml, meta.metric, meta.loss_reduction);
    evaluate(learner.as_ref(), data.get(split), shape, episodes, seed, &split.to_string())
}
