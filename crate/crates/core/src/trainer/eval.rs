//! Episode evaluation without parameter updates.

use rand_distr::{Distribution, StandardNormal};

use super::metrics::{EvalSummary, Welford};
use super::report::PredictionRecord;
use crate::episodes::{sample_episode, ClassIndexedDataset, Episode, EpisodeShape, Split};
use crate::error::Result;
use crate::maml::{MamlConfig, MamlModel};
use crate::models::Encoder;
use crate::protonet::{episode_loss, prototypical_loss, DistanceMetric, EpisodeLoss, LossReduction};
use crate::rng::{self, Stream};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

/// Anything that classifies the queries of an episode from its support set.
pub trait EpisodeLearner<T: Scalar> {
    fn run_episode(&self, episode: &Episode<T>) -> Result<EpisodeLoss>;
}

pub struct ProtoLearner<'a, T> {
    pub encoder: &'a Encoder<T>,
    pub metric: DistanceMetric,
    pub reduction: LossReduction,
}

impl<T: Scalar> EpisodeLearner<T> for ProtoLearner<'_, T> {
    fn run_episode(&self, episode: &Episode<T>) -> Result<EpisodeLoss> {
        episode_loss(episode, self.encoder, self.metric, self.reduction)
    }
}

/// Adapts a copy of the model on the support set, then scores the queries.
pub struct MamlLearner<'a, T> {
    pub model: &'a MamlModel<T>,
    pub cfg: MamlConfig,
    pub reduction: LossReduction,
}

impl<T: Scalar> EpisodeLearner<T> for MamlLearner<'_, T> {
    fn run_episode(&self, episode: &Episode<T>) -> Result<EpisodeLoss> {
        let adapted = self.model.adapt(episode, &self.cfg, self.reduction)?;
        self.model.evaluate_query(&adapted, episode, self.reduction)
    }
}

/// Fixed embeddings fed to the prototypical classifier, for checking the
/// evaluation path against known accuracies.
#[derive(Clone, Copy, Debug)]
pub enum EmbeddingStub {
    /// One-hot vector of the item's episode label.
    OneHotLabel,
    /// Gaussian vector determined by the image pixels alone.
    Random { dim: usize, seed: u64 },
}

fn content_hash<T: Scalar>(t: &Tensor<T>) -> u64 {
    t.data().iter().fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
        (h ^ v.as_f64().to_bits()).wrapping_mul(0x0100_0000_01b3)
    })
}

impl EmbeddingStub {
    fn embed<T: Scalar>(&self, items: &[crate::episodes::EpisodeItem<T>], way: usize) -> Result<Tensor<T>> {
        match *self {
            EmbeddingStub::OneHotLabel => {
                let mut data = vec![T::zero(); items.len() * way];
                for (i, it) in items.iter().enumerate() {
                    data[i * way + it.label] = T::one();
                }
                Tensor::new(vec![items.len(), way], data)
            }
            EmbeddingStub::Random { dim, seed } => {
                let mut data = Vec::with_capacity(items.len() * dim);
                for it in items {
                    let mut r = rng::indexed(seed, Stream::Stub, content_hash(&it.image));
                    data.extend((0..dim).map(|_| T::lit(StandardNormal.sample(&mut r))));
                }
                Tensor::new(vec![items.len(), dim], data)
            }
        }
    }
}

impl<T: Scalar> EpisodeLearner<T> for EmbeddingStub {
    fn run_episode(&self, episode: &Episode<T>) -> Result<EpisodeLoss> {
        let way = episode.shape.way;
        let tape = Tape::new();
        let s = tape.constant(self.embed(&episode.support, way)?);
        let q = tape.constant(self.embed(&episode.query, way)?);
        let fwd = prototypical_loss(
            s,
            &episode.support_labels(),
            q,
            &episode.query_labels(),
            way,
            DistanceMetric::Squared,
            LossReduction::Sum,
        )?;
        Ok(fwd.summary)
    }
}

fn sampler_stream(split: Split) -> Stream {
    match split {
        Split::Train => Stream::TrainSampler,
        Split::Val => Stream::ValSampler,
        Split::Test => Stream::TestSampler,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub summary: EvalSummary,
    pub predictions: Vec<PredictionRecord>,
}

/// Runs `episodes` episodes; episode `i` is drawn from its own generator
/// derived from `seed`, so results do not depend on evaluation order.
pub fn evaluate<T: Scalar>(
    learner: &dyn EpisodeLearner<T>,
    ds: &ClassIndexedDataset<T>,
    shape: EpisodeShape,
    episodes: usize,
    seed: u64,
    label: &str,
) -> Result<EvalOutcome> {
    ds.check_episode_shape(shape)?;
    let (mut acc, mut loss) = (Welford::new(), Welford::new());
    let mut predictions = Vec::with_capacity(episodes);
    for i in 0..episodes {
        let mut r = rng::indexed(seed, sampler_stream(ds.split()), i as u64);
        let ep = sample_episode(ds, shape, &mut r)?;
        let out = learner.run_episode(&ep)?;
        acc.push(out.accuracy);
        loss.push(out.task_loss);
        predictions.push(PredictionRecord {
            episode: i,
            split: label.to_string(),
            truth: ep.query.iter().map(|q| ep.class_map[q.label]).collect(),
            predicted: out.predictions.iter().map(|&p| ep.class_map[p]).collect(),
        });
    }
    Ok(EvalOutcome {
        summary: EvalSummary {
            split: label.to_string(),
            episodes,
            acc_mean: acc.mean(),
            acc_std: acc.std(),
            loss_mean: loss.mean(),
            loss_std: loss.std(),
        },
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::SyntheticSpec;

    fn data() -> crate::episodes::MetaDataset<f64> {
        SyntheticSpec {
            train_classes: 6,
            val_classes: 5,
            test_classes: 6,
            per_class: 12,
            noise_sigma: 0.2,
            ..Default::default()
        }
        .build()
        .unwrap()
    }

    #[test]
    fn one_hot_stub_is_perfect() {
        let md = data();
        let out = evaluate(&EmbeddingStub::OneHotLabel, &md.test, EpisodeShape::new(5, 1, 3), 20, 1, "test").unwrap();
        assert_eq!(out.summary.acc_mean, 1.0);
        assert_eq!(out.summary.acc_std, 0.0);
    }

    #[test]
    fn random_stub_is_near_chance() {
        let md = data();
        let stub = EmbeddingStub::Random { dim: 16, seed: 3 };
        let n = 300;
        let out = evaluate(&stub, &md.test, EpisodeShape::new(5, 1, 3), n, 2, "test").unwrap();
        // per-episode accuracy is a mean of 15 Bernoulli(0.2) draws
        let se = (0.2f64 * 0.8 / (15.0 * n as f64)).sqrt();
        assert!((out.summary.acc_mean - 0.2).abs() < 4.0 * se, "{}", out.summary.acc_mean);
    }

    #[test]
    fn same_seed_same_summary() {
        let md = data();
        let stub = EmbeddingStub::Random { dim: 4, seed: 0 };
        let a = evaluate(&stub, &md.val, EpisodeShape::new(3, 2, 2), 10, 5, "val").unwrap();
        let b = evaluate(&stub, &md.val, EpisodeShape::new(3, 2, 2), 10, 5, "val").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn infeasible_shape_is_an_error() {
        let md = data();
        assert!(evaluate(&EmbeddingStub::OneHotLabel, &md.val, EpisodeShape::new(6, 1, 1), 1, 0, "val").is_err());
    }
}
