//! Class-indexed datasets and the N-way K-shot episode sampler.

mod loader;
mod synthetic;

pub use loader::{load_directory, SplitManifest};
pub use synthetic::{generate_classes, generate_synthetic, Appearance, SyntheticSpec};

use std::collections::HashSet;
use std::fmt;
use std::sync::Arc;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ClassRecord<T> {
    /// Original class id, unique across all splits of a meta-dataset.
    pub id: usize,
    pub name: String,
    /// `[C, H, W]` images with pixels in `[0, 1]`.
    pub images: Vec<Arc<Tensor<T>>>,
}

#[derive(Clone, Debug)]
pub struct ClassIndexedDataset<T> {
    split: Split,
    image_shape: [usize; 3],
    classes: Vec<ClassRecord<T>>,
}

impl<T: Scalar> ClassIndexedDataset<T> {
    pub fn new(split: Split, classes: Vec<ClassRecord<T>>) -> Result<Self> {
        let first = classes
            .iter()
            .flat_map(|c| c.images.first())
            .next()
            .ok_or_else(|| Error::InvalidArgument("dataset without images".into()))?;
        let shape: [usize; 3] = first
            .shape()
            .try_into()
            .map_err(|_| Error::invalid_shape("dataset", first.shape(), "images must be [C, H, W]"))?;
        let mut ids = HashSet::new();
        for c in &classes {
            if !ids.insert(c.id) {
                return Err(Error::InvalidArgument(format!("duplicate class id {}", c.id)));
            }
            if let Some(img) = c.images.iter().find(|i| i.shape() != shape) {
                return Err(Error::shape("dataset", &shape, img.shape()));
            }
        }
        Ok(ClassIndexedDataset {
            split,
            image_shape: shape,
            classes,
        })
    }

    /// A split with no classes (e.g. an unused validation split).
    pub fn empty(split: Split, image_shape: [usize; 3]) -> Self {
        ClassIndexedDataset {
            split,
            image_shape,
            classes: Vec::new(),
        }
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn classes(&self) -> &[ClassRecord<T>] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_images(&self) -> usize {
        self.classes.iter().map(|c| c.images.len()).sum()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn class_ids(&self) -> Vec<usize> {
        self.classes.iter().map(|c| c.id).collect()
    }

    /// Keeps the classes at the given positions, in that order.
    pub fn subset(&self, split: Split, positions: &[usize]) -> Result<Self> {
        let classes = positions.iter().map(|&p| self.classes[p].clone()).collect();
        ClassIndexedDataset::new(split, classes)
    }

    /// Checks that every class can fill an episode of the given shape.
    pub fn check_episode_shape(&self, shape: EpisodeShape) -> Result<()> {
        shape.validate()?;
        if self.classes.len() < shape.way {
            return Err(Error::InsufficientClasses {
                available: self.classes.len(),
                needed: shape.way,
            });
        }
        let needed = shape.shot + shape.query;
        if let Some(c) = self.classes.iter().find(|c| c.images.len() < needed) {
            return Err(Error::InsufficientImages {
                class: c.name.clone(),
                available: c.images.len(),
                needed,
            });
        }
        Ok(())
    }
}

/// Train, validation and test datasets over pairwise disjoint classes.
#[derive(Clone, Debug)]
pub struct MetaDataset<T> {
    pub train: ClassIndexedDataset<T>,
    pub val: ClassIndexedDataset<T>,
    pub test: ClassIndexedDataset<T>,
}

impl<T: Scalar> MetaDataset<T> {
    pub fn new(train: ClassIndexedDataset<T>, val: ClassIndexedDataset<T>, test: ClassIndexedDataset<T>) -> Result<Self> {
        let mut seen = HashSet::new();
        for ds in [&train, &val, &test] {
            for c in ds.classes() {
                if !seen.insert(c.id) {
                    return Err(Error::ClassInMultipleSplits(c.name.clone()));
                }
            }
        }
        if train.image_shape() != val.image_shape() || train.image_shape() != test.image_shape() {
            return Err(Error::shape("meta-dataset", &train.image_shape(), &test.image_shape()));
        }
        Ok(MetaDataset {
            train: train.with_split(Split::Train),
            val: val.with_split(Split::Val),
            test: test.with_split(Split::Test),
        })
    }

    pub fn get(&self, split: Split) -> &ClassIndexedDataset<T> {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.train.image_shape()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeShape {
    pub way: usize,
    pub shot: usize,
    pub query: usize,
}

impl EpisodeShape {
    pub fn new(way: usize, shot: usize, query: usize) -> Self {
        EpisodeShape { way, shot, query }
    }

    pub fn validate(&self) -> Result<()> {
        if self.way < 2 || self.shot < 1 || self.query < 1 {
            return Err(Error::InvalidArgument(format!(
                "episode needs way >= 2, shot >= 1, query >= 1 (got {}, {}, {})",
                self.way, self.shot, self.query
            )));
        }
        Ok(())
    }
}

/// Position of an image inside its dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ImageRef {
    pub class_pos: usize,
    pub index: usize,
}

#[derive(Clone, Debug)]
pub struct EpisodeItem<T> {
    pub image: Arc<Tensor<T>>,
    /// Episode label in `0..way`.
    pub label: usize,
    pub source: ImageRef,
}

/// One sampled task. Support and query are ordered label-major.
#[derive(Clone, Debug)]
pub struct Episode<T> {
    pub shape: EpisodeShape,
    pub split: Split,
    pub support: Vec<EpisodeItem<T>>,
    pub query: Vec<EpisodeItem<T>>,
    /// Episode label -> original class id.
    pub class_map: Vec<usize>,
}

impl<T: Scalar> Episode<T> {
    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|i| i.label).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|i| i.label).collect()
    }

    /// `[B, C, H, W]` batch of the support images followed by the query images.
    pub fn stacked_images(&self) -> Result<Tensor<T>> {
        let all: Vec<&Tensor<T>> = self.support.iter().chain(&self.query).map(|i| &*i.image).collect();
        Tensor::stack(&all)
    }

    pub fn support_images(&self) -> Result<Tensor<T>> {
        let all: Vec<&Tensor<T>> = self.support.iter().map(|i| &*i.image).collect();
        Tensor::stack(&all)
    }

    pub fn query_images(&self) -> Result<Tensor<T>> {
        let all: Vec<&Tensor<T>> = self.query.iter().map(|i| &*i.image).collect();
        Tensor::stack(&all)
    }

    /// Verifies counts, label multiplicities, index disjointness and the
    /// label bijection.
    pub fn check_invariants(&self) -> Result<()> {
        let EpisodeShape { way, shot, query } = self.shape;
        if self.support.len() != way * shot || self.query.len() != way * query {
            return Err(Error::InvalidArgument("episode set sizes do not match its shape".into()));
        }
        for label in 0..way {
            let ns = self.support.iter().filter(|i| i.label == label).count();
            if ns != shot {
                return Err(Error::LabelCount { label, found: ns, expected: shot });
            }
            let nq = self.query.iter().filter(|i| i.label == label).count();
            if nq != query {
                return Err(Error::LabelCount { label, found: nq, expected: query });
            }
        }
        let mut seen = HashSet::new();
        for item in self.support.iter().chain(&self.query) {
            if !seen.insert(item.source) {
                return Err(Error::InvalidArgument(format!("image {:?} drawn twice", item.source)));
            }
        }
        let distinct: HashSet<_> = self.class_map.iter().collect();
        if self.class_map.len() != way || distinct.len() != way {
            return Err(Error::InvalidArgument("class map is not a bijection".into()));
        }
        // every item of one label comes from one class position
        for label in 0..way {
            let positions: HashSet<_> = self
                .support
                .iter()
                .chain(&self.query)
                .filter(|i| i.label == label)
                .map(|i| i.source.class_pos)
                .collect();
            if positions.len() != 1 {
                return Err(Error::InvalidArgument(format!("label {label} mixes classes")));
            }
        }
        Ok(())
    }
}

/// Draws an episode: `way` classes uniformly without replacement, then
/// `shot + query` distinct images per class, the first `shot` forming the
/// support set.
pub fn sample_episode<T: Scalar>(ds: &ClassIndexedDataset<T>, shape: EpisodeShape, rng: &mut Rng) -> Result<Episode<T>> {
    ds.check_episode_shape(shape)?;
    let picked = index::sample(rng, ds.num_classes(), shape.way);
    let mut support = Vec::with_capacity(shape.way * shape.shot);
    let mut query = Vec::with_capacity(shape.way * shape.query);
    let mut class_map = Vec::with_capacity(shape.way);
    for (label, class_pos) in picked.iter().enumerate() {
        let class = &ds.classes()[class_pos];
        class_map.push(class.id);
        let draw = index::sample(rng, class.images.len(), shape.shot + shape.query);
        for (j, idx) in draw.iter().enumerate() {
            let item = EpisodeItem {
                image: Arc::clone(&class.images[idx]),
                label,
                source: ImageRef { class_pos, index: idx },
            };
            if j < shape.shot {
                support.push(item);
            } else {
                query.push(item);
            }
        }
    }
    Ok(Episode {
        shape,
        split: ds.split(),
        support,
        query,
        class_map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Stream};

    fn toy(classes: usize, per_class: usize) -> ClassIndexedDataset<f64> {
        let recs = (0..classes)
            .map(|c| ClassRecord {
                id: c,
                name: format!("c{c}"),
                images: (0..per_class)
                    .map(|i| Arc::new(Tensor::full(vec![1, 2, 2], (c * 100 + i) as f64)))
                    .collect(),
            })
            .collect();
        ClassIndexedDataset::new(Split::Train, recs).unwrap()
    }

    #[test]
    fn five_way_five_shot_fifteen_query() {
        let ds = toy(10, 20);
        let ep = sample_episode(&ds, EpisodeShape::new(5, 5, 15), &mut rng::stream(0, Stream::TrainSampler)).unwrap();
        assert_eq!(ep.support.len(), 25);
        assert_eq!(ep.query.len(), 75);
        ep.check_invariants().unwrap();
    }

    #[test]
    fn two_images_per_class_split_cleanly() {
        let ds = toy(2, 2);
        let ep = sample_episode(&ds, EpisodeShape::new(2, 1, 1), &mut rng::stream(3, Stream::TrainSampler)).unwrap();
        ep.check_invariants().unwrap();
        for s in &ep.support {
            assert!(ep.query.iter().all(|q| q.source != s.source));
        }
    }

    #[test]
    fn fixed_seed_fixed_episode() {
        let ds = toy(8, 6);
        let shape = EpisodeShape::new(3, 2, 2);
        let a = sample_episode(&ds, shape, &mut rng::stream(9, Stream::TrainSampler)).unwrap();
        let b = sample_episode(&ds, shape, &mut rng::stream(9, Stream::TrainSampler)).unwrap();
        let key = |e: &Episode<f64>| e.support.iter().chain(&e.query).map(|i| i.source).collect::<Vec<_>>();
        assert_eq!(key(&a), key(&b));
        assert_eq!(a.class_map, b.class_map);
    }

    #[test]
    fn insufficient_data_errors() {
        let ds = toy(3, 4);
        let mut r = rng::stream(0, Stream::TrainSampler);
        assert!(matches!(
            sample_episode(&ds, EpisodeShape::new(4, 1, 1), &mut r),
            Err(Error::InsufficientClasses { available: 3, needed: 4 })
        ));
        assert!(matches!(
            sample_episode(&ds, EpisodeShape::new(2, 2, 3), &mut r),
            Err(Error::InsufficientImages { needed: 5, .. })
        ));
    }

    #[test]
    fn overlapping_splits_are_rejected() {
        let a = toy(3, 2);
        let b = toy(2, 2);
        let c = toy(1, 2);
        assert!(matches!(MetaDataset::new(a, b, c), Err(Error::ClassInMultipleSplits(_))));
    }
}
