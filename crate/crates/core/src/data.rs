//! Datasets: IDX parsing, the binary MNIST task and synthetic blobs.

use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Environment variable naming the directory holding the IDX files.
pub const DATA_DIR_ENV: &str = "IMPSAMP_DATA_DIR";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    inputs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, inputs: Vec<Vec<f64>>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let name = name.into();
        if inputs.is_empty() {
            return Err(Error::Dataset(format!("`{name}` is empty")));
        }
        if inputs.len() != labels.len() {
            return Err(Error::Dataset(format!(
                "`{name}` has {} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        let width = inputs[0].len();
        if inputs.iter().any(|x| x.len() != width) {
            return Err(Error::Dataset(format!("`{name}` has ragged inputs")));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Dataset(format!("`{name}` has label {y} >= {classes} classes")));
        }
        Ok(Dataset {
            name,
            inputs,
            labels,
            classes,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn input_len(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }
}

/// Images from an IDX3 file, scaled to `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub images: Vec<Vec<f64>>,
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Idx {
            offset,
            msg: format!("header truncated ({} bytes total)", bytes.len()),
        })
}

fn expect_magic(bytes: &[u8], magic: u32) -> Result<()> {
    let found = read_u32(bytes, 0)?;
    if found != magic {
        return Err(Error::Idx {
            offset: 0,
            msg: format!("magic {found} where {magic} was expected"),
        });
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], header: usize, dims: &[u32]) -> Result<&'a [u8]> {
    let len = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .ok_or_else(|| Error::Idx {
            offset: 4,
            msg: format!("dimensions {dims:?} overflow"),
        })?;
    let available = bytes.len() - header;
    if available < len {
        return Err(Error::Idx {
            offset: bytes.len(),
            msg: format!("payload truncated: {len} bytes declared, {available} present"),
        });
    }
    if available > len {
        return Err(Error::Idx {
            offset: header + len,
            msg: format!("{} unexpected trailing bytes", available - len),
        });
    }
    Ok(&bytes[header..])
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    expect_magic(bytes, IMAGE_MAGIC)?;
    let count = read_u32(bytes, 4)?;
    let rows = read_u32(bytes, 8)?;
    let cols = read_u32(bytes, 12)?;
    let data = payload(bytes, 16, &[count, rows, cols])?;
    let (rows, cols) = (rows as usize, cols as usize);
    let images = if rows * cols == 0 {
        vec![Vec::new(); count as usize]
    } else {
        data.chunks_exact(rows * cols)
            .map(|px| px.iter().map(|&b| f64::from(b) / 255.0).collect())
            .collect()
    };
    Ok(IdxImages { rows, cols, images })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    expect_magic(bytes, LABEL_MAGIC)?;
    let count = read_u32(bytes, 4)?;
    Ok(payload(bytes, 8, &[count])?.to_vec())
}

pub fn encode_idx_images(rows: usize, cols: usize, images: &[Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    for v in [IMAGE_MAGIC, images.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for img in images {
        assert_eq!(img.len(), rows * cols, "image size mismatch");
        out.extend_from_slice(img);
    }
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// A labelled image split (images + labels of equal count).
#[derive(Debug, Clone)]
pub struct LabelledImages {
    pub images: IdxImages,
    pub labels: Vec<u8>,
}

impl LabelledImages {
    pub fn from_idx(images: &[u8], labels: &[u8]) -> Result<Self> {
        let images = parse_idx_images(images)?;
        let labels = parse_idx_labels(labels)?;
        if images.images.len() != labels.len() {
            return Err(Error::Dataset(format!(
                "{} images but {} labels",
                images.images.len(),
                labels.len()
            )));
        }
        Ok(LabelledImages { images, labels })
    }

    pub fn load(dir: &Path, images: &str, labels: &str) -> Result<Self> {
        let read = |name: &str| {
            let path = dir.join(name);
            std::fs::read(&path).map_err(|e| Error::io(path, e))
        };
        Self::from_idx(&read(images)?, &read(labels)?)
    }
}

#[derive(Debug, Clone)]
pub struct Mnist {
    pub train: LabelledImages,
    pub test: LabelledImages,
}

impl Mnist {
    /// Reads the four standard (uncompressed) IDX files from `dir`.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        Ok(Mnist {
            train: LabelledImages::load(dir, TRAIN_IMAGES, TRAIN_LABELS)?,
            test: LabelledImages::load(dir, TEST_IMAGES, TEST_LABELS)?,
        })
    }
}

fn pools(split: &LabelledImages, digits: (u8, u8)) -> [Vec<usize>; 2] {
    let pick = |d: u8| {
        split
            .labels
            .iter()
            .enumerate()
            .filter(|(_, &y)| y == d)
            .map(|(i, _)| i)
            .collect::<Vec<_>>()
    };
    [pick(digits.0), pick(digits.1)]
}

/// Balanced two-digit training set: `n_train / 2` images of each digit,
/// drawn uniformly without replacement. `digits.0` maps to label 0.
pub fn binary_subset(split: &LabelledImages, digits: (u8, u8), n_train: usize, seed: u64) -> Result<Dataset> {
    if n_train == 0 || n_train % 2 != 0 {
        return Err(Error::InvalidArgument(format!("n_train must be even and positive, got {n_train}")));
    }
    let per_class = n_train / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(n_train);
    let mut labels = Vec::with_capacity(n_train);
    for (class, pool) in pools(split, digits).iter().enumerate() {
        if pool.len() < per_class {
            return Err(Error::Dataset(format!(
                "need {per_class} images of digit {}, only {} available",
                if class == 0 { digits.0 } else { digits.1 },
                pool.len()
            )));
        }
        for k in index::sample(&mut rng, pool.len(), per_class) {
            inputs.push(split.images.images[pool[k]].clone());
            labels.push(class);
        }
    }
    Dataset::new(format!("mnist{}{}-train{n_train}", digits.0, digits.1), inputs, labels, 2)
}

/// Every image of the two digits, relabelled to {0, 1}.
pub fn binary_split(split: &LabelledImages, digits: (u8, u8)) -> Result<Dataset> {
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (i, &y) in split.labels.iter().enumerate() {
        let class = if y == digits.0 {
            0
        } else if y == digits.1 {
            1
        } else {
            continue;
        };
        inputs.push(split.images.images[i].clone());
        labels.push(class);
    }
    Dataset::new(format!("mnist{}{}", digits.0, digits.1), inputs, labels, 2)
}

/// Two unit-variance Gaussian clusters of `n / 2` points centred at
/// `-separation / 2` and `+separation / 2` on the first axis.
pub fn synthetic_blobs(n: usize, dim: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || n % 2 != 0 || dim == 0 {
        return Err(Error::InvalidArgument(format!(
            "blobs need an even positive count and positive dimension, got n={n}, dim={dim}"
        )));
    }
    if !separation.is_finite() {
        return Err(Error::InvalidArgument("separation must be finite".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = usize::from(i >= n / 2);
        let centre = if class == 0 { -separation / 2.0 } else { separation / 2.0 };
        let mut x: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        x[0] += centre;
        inputs.push(x);
        labels.push(class);
    }
    Dataset::new(format!("blobs-{n}x{dim}-sep{separation}"), inputs, labels, 2)
}
