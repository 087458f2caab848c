//! Run configuration, read from TOML with every key checked.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::episodes::{load_directory, EpisodeShape, MetaDataset, SplitManifest, SyntheticSpec};
use crate::error::{Error, Result};
use crate::maml::{AePhase, MamlConfig};
use crate::metatask::MetaTaskSpec;
use crate::models::EncoderSpec;
use crate::protonet::{DistanceMetric, LossReduction};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    #[default]
    Protonet,
    Maml,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Classification update at `lr`, then a reconstruction update at
    /// `autoencoder_lr`, both from gradients at the same parameters.
    #[default]
    TwoStep,
    /// One update at `lr` on the weighted sum of all losses.
    Combined,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic(SyntheticSpec),
    Directory { root: PathBuf, manifest: PathBuf },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic(SyntheticSpec::default())
    }
}

impl DatasetSpec {
    pub fn load<T: Scalar>(&self) -> Result<MetaDataset<T>> {
        match self {
            DatasetSpec::Synthetic(s) => s.build(),
            DatasetSpec::Directory { root, manifest } => load_directory(root, &SplitManifest::load(manifest)?),
        }
    }
}

/// Encoder width and depth; the input shape comes from the dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub hidden: usize,
    pub blocks: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec { hidden: 64, blocks: 4 }
    }
}

impl ModelSpec {
    pub fn encoder(&self, image_shape: [usize; 3]) -> EncoderSpec {
        EncoderSpec {
            in_channels: image_shape[0],
            height: image_shape[1],
            width: image_shape[2],
            hidden: self.hidden,
            blocks: self.blocks,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub algo: Algo,
    pub seed: u64,
    pub precision: Precision,
    pub mode: Mode,
    pub optimizer: Optimizer,
    pub lr: f64,
    pub autoencoder_lr: f64,
    pub metric: DistanceMetric,
    pub loss_reduction: LossReduction,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    /// Episodes whose losses are summed into one update.
    pub tasks_per_step: usize,
    pub train: EpisodeShape,
    pub test: EpisodeShape,
    /// Validation every this many training episodes; 0 disables it.
    pub eval_interval: usize,
    pub val_episodes: usize,
    /// Size of the final test pass.
    pub eval_episodes: usize,
    /// Also validate on episodes of training classes.
    pub mixed_validation: bool,
    pub inner_lr: f64,
    pub inner_steps: usize,
    pub ae_phase: AePhase,
    pub model: ModelSpec,
    pub dataset: DatasetSpec,
    pub metatasks: Vec<MetaTaskSpec>,
    pub metrics_log: PathBuf,
    pub summary_csv: PathBuf,
    pub predictions_log: PathBuf,
    pub checkpoint: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let maml = MamlConfig::default();
        RunConfig {
            algo: Algo::Protonet,
            seed: 0,
            precision: Precision::F64,
            mode: Mode::TwoStep,
            optimizer: Optimizer::Adam,
            lr: 1e-4,
            autoencoder_lr: 1e-6,
            metric: DistanceMetric::Squared,
            loss_reduction: LossReduction::Sum,
            epochs: 5,
            episodes_per_epoch: 10_000,
            tasks_per_step: 1,
            train: EpisodeShape::new(5, 5, 15),
            test: EpisodeShape::new(5, 5, 15),
            eval_interval: 500,
            val_episodes: 100,
            eval_episodes: 10_000,
            mixed_validation: false,
            inner_lr: maml.inner_lr,
            inner_steps: maml.inner_steps,
            ae_phase: maml.ae_phase,
            model: ModelSpec::default(),
            dataset: DatasetSpec::default(),
            metatasks: Vec::new(),
            metrics_log: "runs/metrics.jsonl".into(),
            summary_csv: "runs/summary.csv".into(),
            predictions_log: "runs/predictions.jsonl".into(),
            checkpoint: "runs/model.ckpt".into(),
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive, got {v}")))
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn maml(&self) -> MamlConfig {
        MamlConfig {
            inner_lr: self.inner_lr,
            inner_steps: self.inner_steps,
            ae_phase: self.ae_phase,
        }
    }

    pub fn total_episodes(&self) -> usize {
        self.epochs * self.episodes_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        positive("lr", self.lr)?;
        // zero switches the reconstruction update off without removing it
        if !(self.autoencoder_lr >= 0.0 && self.autoencoder_lr.is_finite()) {
            return Err(Error::Config(format!("autoencoder_lr must be non-negative, got {}", self.autoencoder_lr)));
        }
        for (name, shape) in [("train", self.train), ("test", self.test)] {
            shape.validate().map_err(|e| Error::Config(format!("{name}: {e}")))?;
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("episodes_per_epoch", self.episodes_per_epoch),
            ("tasks_per_step", self.tasks_per_step),
            ("eval_episodes", self.eval_episodes),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.eval_interval > 0 && self.val_episodes == 0 {
            return Err(Error::Config("val_episodes must be at least 1 when eval_interval is set".into()));
        }
        for m in &self.metatasks {
            if !(m.lambda >= 0.0 && m.lambda.is_finite()) {
                return Err(Error::Config(format!("metatask {:?}: lambda must be non-negative", m.name)));
            }
        }
        if self.algo == Algo::Maml {
            self.maml().validate()?;
            if self.test.way != self.train.way {
                return Err(Error::Config("maml needs equal train and test way (fixed classifier width)".into()));
            }
        }
        Ok(())
    }

    /// Multiplies every episode count by `factor` (at least one episode
    /// each), for runs smaller than the defaults.
    pub fn scaled(mut self, factor: f64) -> Result<Self> {
        positive("scale", factor)?;
        let s = |n: usize| ((n as f64 * factor).round() as usize).max(1);
        self.episodes_per_epoch = s(self.episodes_per_epoch);
        self.eval_episodes = s(self.eval_episodes);
        if self.eval_interval > 0 {
            self.eval_interval = s(self.eval_interval);
            self.val_episodes = s(self.val_episodes);
        }
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_table() {
        let c = RunConfig::default();
        assert_eq!((c.lr, c.autoencoder_lr, c.epochs, c.episodes_per_epoch), (1e-4, 1e-6, 5, 10_000));
        assert_eq!(c.train, EpisodeShape::new(5, 5, 15));
        assert_eq!(c.eval_episodes, 10_000);
        c.validate().unwrap();
    }

    #[test]
    fn parses_full_example() {
        let c = RunConfig::parse(
            r#"
            algo = "maml"
            seed = 7
            mode = "combined"
            lr = 0.001
            inner_lr = 0.05
            inner_steps = 2
            train = { way = 3, shot = 1, query = 2 }
            test = { way = 3, shot = 1, query = 4 }

            [dataset]
            kind = "synthetic"
            train_classes = 6
            val_classes = 3
            test_classes = 3
            per_class = 8
            noise_sigma = 0.1

            [[metatasks]]
            name = "autoencoder"
            lambda = 0.5
            decoder = "deep"
            images = "support"
            "#,
        )
        .unwrap();
        assert_eq!(c.algo, Algo::Maml);
        assert_eq!(c.mode, Mode::Combined);
        assert_eq!(c.metatasks[0].lambda, 0.5);
        assert!(matches!(c.dataset, DatasetSpec::Synthetic(ref s) if s.per_class == 8));
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_errors() {
        for text in [
            "lr = 1e-3\nlearning_rate = 1e-3",
            "[train]\nway = 5\nshot = 1\nquery = 5\nways = 5",
            "[[metatasks]]\nname = \"autoencoder\"\nweight = 1.0",
            "[dataset]\nkind = \"synthetic\"\ntrain_classes = 4\nval_classes = 2\ntest_classes = 2\nper_class = 5\nnoise_sigma = 0.1\nbogus = 1",
        ] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn invalid_values_rejected() {
        for text in ["lr = 0.0", "autoencoder_lr = -1.0", "train = { way = 1, shot = 1, query = 1 }", "epochs = 0"] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
        assert!(RunConfig::parse("algo = \"maml\"\ninner_steps = 0").is_err());
    }

    #[test]
    fn scaling_keeps_counts_positive() {
        let c = RunConfig::default().scaled(0.01).unwrap();
        assert_eq!((c.episodes_per_epoch, c.eval_episodes, c.eval_interval, c.val_episodes), (100, 100, 5, 1));
        assert!(RunConfig::default().scaled(0.0).is_err());
    }
}
