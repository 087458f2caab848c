//! Parametric grayscale pattern classes for hermetic experiments.
//!
//! Every class is a windowed sinusoidal grating with its own orientation,
//! frequency, phase, window shape, centre and radius. Images of a class
//! differ by a random translation of the whole pattern and i.i.d. Gaussian
//! pixel noise.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ClassIndexedDataset, ClassRecord, MetaDataset, Split};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_SIZE: usize = 28;

#[derive(Clone, Copy, Debug)]
enum Window {
    Disk,
    Ring,
    Square,
    Cross,
    Diamond,
}

#[derive(Clone, Copy, Debug)]
struct ClassPattern {
    orientation: f64,
    frequency: f64,
    phase: f64,
    window: Window,
    centre: (f64, f64),
    radius: f64,
}

impl ClassPattern {
    fn draw(seed: u64, class: usize) -> Self {
        let mut r = rng::indexed(seed, Stream::Synthetic, class as u64);
        let window = match r.random_range(0..5) {
            0 => Window::Disk,
            1 => Window::Ring,
            2 => Window::Square,
            3 => Window::Cross,
            _ => Window::Diamond,
        };
        ClassPattern {
            orientation: r.random_range(0.0..PI),
            frequency: r.random_range(1.5..5.0),
            phase: r.random_range(0.0..2.0 * PI),
            window,
            centre: (r.random_range(-0.15..0.15), r.random_range(-0.15..0.15)),
            radius: r.random_range(0.45..0.85),
        }
    }

    /// Noise-free intensity in `[0, 1]` at normalized coordinates in `[-1, 1]`.
    fn intensity(&self, u: f64, v: f64) -> f64 {
        let (du, dv) = (u - self.centre.0, v - self.centre.1);
        let rr = self.radius;
        let inside = match self.window {
            Window::Disk => (du * du + dv * dv).sqrt() <= rr,
            Window::Ring => {
                let d = (du * du + dv * dv).sqrt();
                d <= rr && d >= 0.5 * rr
            }
            Window::Square => du.abs() <= 0.8 * rr && dv.abs() <= 0.8 * rr,
            Window::Cross => (du.abs() <= 0.3 * rr && dv.abs() <= rr) || (dv.abs() <= 0.3 * rr && du.abs() <= rr),
            Window::Diamond => du.abs() + dv.abs() <= rr,
        };
        if !inside {
            return 0.0;
        }
        let along = u * self.orientation.cos() + v * self.orientation.sin();
        0.5 + 0.5 * (PI * self.frequency * along + self.phase).cos()
    }

    /// Renders with the pattern moved by `shift` pixels.
    fn render(&self, size: usize, shift: (f64, f64)) -> Vec<f64> {
        let mut out = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let u = 2.0 * (x as f64 + 0.5 - shift.0) / size as f64 - 1.0;
                let v = 2.0 * (y as f64 + 0.5 - shift.1) / size as f64 - 1.0;
                out.push(self.intensity(u, v));
            }
        }
        out
    }
}

/// Image generation parameters shared by all classes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Appearance {
    pub noise_sigma: f64,
    /// Largest translation, in pixels, along each axis.
    pub max_shift: f64,
    pub size: usize,
}

/// Builds `num_classes` classes of `per_class` `1 x size x size` images.
/// Class ids are `first_id..first_id + num_classes`.
pub fn generate_classes<T: Scalar>(
    first_id: usize,
    num_classes: usize,
    per_class: usize,
    look: Appearance,
    seed: u64,
) -> Result<Vec<ClassRecord<T>>> {
    let Appearance { noise_sigma, max_shift, size } = look;
    if num_classes < 2 || per_class < 2 {
        return Err(Error::InvalidArgument(format!(
            "synthetic data needs at least 2 classes and 2 images per class (got {num_classes}, {per_class})"
        )));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) || !(max_shift >= 0.0 && max_shift.is_finite()) || size == 0 {
        return Err(Error::InvalidArgument(format!(
            "invalid noise {noise_sigma}, shift {max_shift} or size {size}"
        )));
    }
    let noise = Normal::new(0.0, noise_sigma).expect("valid sigma");
    let mut classes = Vec::with_capacity(num_classes);
    for c in first_id..first_id + num_classes {
        let pattern = ClassPattern::draw(seed, c);
        // per-class appearance stream, offset past the pattern stream indices
        let mut r = rng::indexed(seed, Stream::Synthetic, (1u64 << 32) + c as u64);
        let images = (0..per_class)
            .map(|_| {
                let shift = if max_shift > 0.0 {
                    (r.random_range(-max_shift..=max_shift), r.random_range(-max_shift..=max_shift))
                } else {
                    (0.0, 0.0)
                };
                let data: Vec<T> = pattern
                    .render(size, shift)
                    .iter()
                    .map(|&p| {
                        let v = if noise_sigma > 0.0 { p + noise.sample(&mut r) } else { p };
                        T::lit(v.clamp(0.0, 1.0))
                    })
                    .collect();
                Arc::new(Tensor::new(vec![1, size, size], data).expect("consistent shape"))
            })
            .collect();
        classes.push(ClassRecord {
            id: c,
            name: format!("synthetic_{c:04}"),
            images,
        });
    }
    Ok(classes)
}

/// `num_classes` classes of `per_class` 28x28 grayscale images in one
/// dataset, without translation.
pub fn generate_synthetic<T: Scalar>(
    num_classes: usize,
    per_class: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<ClassIndexedDataset<T>> {
    let look = Appearance {
        noise_sigma,
        max_shift: 0.0,
        size: DEFAULT_SIZE,
    };
    let classes = generate_classes(0, num_classes, per_class, look, seed)?;
    ClassIndexedDataset::new(Split::Train, classes)
}

/// Synthetic meta-dataset parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub train_classes: usize,
    pub val_classes: usize,
    pub test_classes: usize,
    pub per_class: usize,
    pub noise_sigma: f64,
    #[serde(default = "default_shift")]
    pub max_shift: f64,
    #[serde(default = "default_size")]
    pub size: usize,
    /// Seed of the class patterns and noise; independent of the run seed.
    #[serde(default)]
    pub seed: u64,
}

fn default_size() -> usize {
    DEFAULT_SIZE
}

pub const DEFAULT_SHIFT: f64 = 4.0;

fn default_shift() -> f64 {
    DEFAULT_SHIFT
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            train_classes: 20,
            val_classes: 5,
            test_classes: 5,
            per_class: 40,
            noise_sigma: 0.05,
            max_shift: DEFAULT_SHIFT,
            size: DEFAULT_SIZE,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn build<T: Scalar>(&self) -> Result<MetaDataset<T>> {
        let mk = |first: usize, n: usize, split: Split| -> Result<ClassIndexedDataset<T>> {
            let look = Appearance {
                noise_sigma: self.noise_sigma,
                max_shift: self.max_shift,
                size: self.size,
            };
            let classes = generate_classes(first, n, self.per_class, look, self.seed)?;
            ClassIndexedDataset::new(split, classes)
        };
        let train = mk(0, self.train_classes, Split::Train)?;
        let val = mk(self.train_classes, self.val_classes, Split::Val)?;
        let test = mk(self.train_classes + self.val_classes, self.test_classes, Split::Test)?;
        MetaDataset::new(train, val, test)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_classes_are_constant() {
        let ds = generate_synthetic::<f64>(4, 5, 0.0, 1).unwrap();
        for c in ds.classes() {
            for img in &c.images {
                assert_eq!(**img, *c.images[0]);
            }
        }
    }

    #[test]
    fn counts_and_range() {
        let ds = generate_synthetic::<f64>(20, 40, 0.3, 2).unwrap();
        assert_eq!(ds.num_images(), 800);
        assert_eq!(ds.num_classes(), 20);
        let ids: std::collections::HashSet<_> = ds.class_ids().into_iter().collect();
        assert_eq!(ids.len(), 20);
        for c in ds.classes() {
            for img in &c.images {
                assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn invalid_counts_rejected() {
        assert!(generate_synthetic::<f64>(1, 5, 0.1, 0).is_err());
        assert!(generate_synthetic::<f64>(5, 1, 0.1, 0).is_err());
        assert!(generate_synthetic::<f64>(5, 5, -0.1, 0).is_err());
    }

    #[test]
    fn meta_dataset_splits_are_disjoint() {
        let md = SyntheticSpec::default().build::<f64>().unwrap();
        assert_eq!(md.train.num_classes(), 20);
        assert_eq!(md.val.num_classes(), 5);
        assert_eq!(md.test.num_classes(), 5);
        let train: std::collections::HashSet<_> = md.train.class_ids().into_iter().collect();
        assert!(md.val.class_ids().iter().chain(&md.test.class_ids()).all(|c| !train.contains(c)));
    }
}
