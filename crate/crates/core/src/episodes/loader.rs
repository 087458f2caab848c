//! Class-per-subdirectory image datasets.
//!
//! ```text
//! root/
//!   alpha/  001.png 002.png ...
//!   beta/   a.pgm b.pgm ...
//! ```
//!
//! The split manifest is TOML naming class directories per split:
//!
//! ```toml
//! train = ["alpha", "beta"]
//! val = []
//! test = ["gamma"]
//! ```

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::DynamicImage;
use serde::{Deserialize, Serialize};

use super::{ClassIndexedDataset, ClassRecord, MetaDataset, Split};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    #[serde(default)]
    pub train: Vec<String>,
    #[serde(default)]
    pub val: Vec<String>,
    #[serde(default)]
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: SplitManifest = toml::from_str(text).map_err(|e| Error::Config(format!("split manifest: {e}")))?;
        m.check_disjoint()?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn check_disjoint(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for name in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(name) {
                return Err(Error::ClassInMultipleSplits(name.clone()));
            }
        }
        Ok(())
    }
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "pgm" | "ppm" | "pnm")
    )
}

/// Decodes to `[C, H, W]` with values in `[0, 1]`; grayscale gives one
/// channel, colour images three.
fn decode<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let gray = matches!(
        img,
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLumaA16(_)
    );
    let (w, h) = (img.width() as usize, img.height() as usize);
    if gray {
        let buf = img.to_luma16();
        let data = buf.pixels().map(|p| T::lit(p.0[0] as f64 / 65535.0)).collect();
        Tensor::new(vec![1, h, w], data)
    } else {
        let buf = img.to_rgb16();
        let mut data = vec![T::zero(); 3 * h * w];
        for (i, p) in buf.pixels().enumerate() {
            for c in 0..3 {
                data[c * h * w + i] = T::lit(p.0[c] as f64 / 65535.0);
            }
        }
        Tensor::new(vec![3, h, w], data)
    }
}

fn load_class<T: Scalar>(dir: &Path, id: usize, name: &str, expected: &mut Option<([usize; 3], PathBuf)>) -> Result<ClassRecord<T>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.is_file() && is_image(p));
    files.sort();
    let mut images = Vec::with_capacity(files.len());
    for f in files {
        let t = decode::<T>(&f)?;
        let shape: [usize; 3] = t.shape().try_into().expect("decoded images are CHW");
        match expected {
            Some((want, _)) if *want != shape => {
                return Err(Error::ImageSizeMismatch {
                    path: f,
                    expected: (want[0], want[1], want[2]),
                    found: (shape[0], shape[1], shape[2]),
                });
            }
            Some(_) => {}
            None => *expected = Some((shape, f.clone())),
        }
        images.push(Arc::new(t));
    }
    if images.is_empty() {
        return Err(Error::InvalidArgument(format!("class directory {} has no images", dir.display())));
    }
    Ok(ClassRecord {
        id,
        name: name.to_string(),
        images,
    })
}

/// Reads the classes named in `manifest` from subdirectories of `root`.
/// Class ids are assigned in manifest order: train, then val, then test.
pub fn load_directory<T: Scalar>(root: impl AsRef<Path>, manifest: &SplitManifest) -> Result<MetaDataset<T>> {
    manifest.check_disjoint()?;
    let root = root.as_ref();
    let mut expected = None;
    let mut next_id = 0;
    let mut load_split = |names: &[String], split: Split| -> Result<Vec<ClassRecord<T>>> {
        let mut out = Vec::new();
        for name in names {
            let dir = root.join(name);
            if !dir.is_dir() {
                return Err(Error::InvalidArgument(format!("{split} class directory {} not found", dir.display())));
            }
            out.push(load_class(&dir, next_id, name, &mut expected)?);
            next_id += 1;
        }
        Ok(out)
    };
    let train = load_split(&manifest.train, Split::Train)?;
    let val = load_split(&manifest.val, Split::Val)?;
    let test = load_split(&manifest.test, Split::Test)?;
    let shape = expected
        .map(|(s, _)| s)
        .ok_or_else(|| Error::InvalidArgument("manifest names no classes".into()))?;
    let build = |classes: Vec<ClassRecord<T>>, split| {
        if classes.is_empty() {
            Ok(ClassIndexedDataset::empty(split, shape))
        } else {
            ClassIndexedDataset::new(split, classes)
        }
    };
    MetaDataset::new(build(train, Split::Train)?, build(val, Split::Val)?, build(test, Split::Test)?)
}
