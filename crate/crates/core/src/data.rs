//! Synthetic template-plus-noise classification data, an IDX loader, and
//! deterministic shuffled batching.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::tensor_io;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images `(n, channels, side, side)` flattened row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub side: usize,
}

/// A labeled dataset is just a large batch.
pub type Dataset = Batch;

impl Batch {
    pub fn new(images: Vec<f64>, labels: Vec<usize>, channels: usize, side: usize) -> Result<Self> {
        let per = channels * side * side;
        if per == 0 || images.len() != labels.len() * per {
            return Err(Error::Invalid(format!(
                "{} pixel values do not hold {} images of {channels}x{side}x{side}",
                images.len(),
                labels.len()
            )));
        }
        if images.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                location: "batch images".into(),
            });
        }
        Ok(Self {
            images,
            labels,
            channels,
            side,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.side * self.side
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn select(&self, indices: &[usize]) -> Batch {
        let n = self.image_len();
        let mut images = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Batch {
            images,
            labels,
            channels: self.channels,
            side: self.side,
        }
    }

    pub fn take(&self, count: usize) -> Batch {
        let idx: Vec<usize> = (0..count.min(self.len())).collect();
        self.select(&idx)
    }

    pub fn concat(&self, other: &Batch) -> Result<Batch> {
        if self.channels != other.channels || self.side != other.side {
            return Err(Error::Invalid("cannot concatenate batches of different image shapes".into()));
        }
        let mut out = self.clone();
        out.images.extend_from_slice(&other.images);
        out.labels.extend_from_slice(&other.labels);
        Ok(out)
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut c = vec![0; classes];
        for &l in &self.labels {
            if l < classes {
                c[l] += 1;
            }
        }
        c
    }

    /// Persist in the checkpoint tensor format (`images` and `labels` tensors).
    pub fn save(&self, dir: &Path) -> Result<()> {
        let images = Matrix::from_vec(self.len(), self.image_len(), self.images.clone())?;
        let labels = Matrix::from_vec(
            self.len(),
            1,
            self.labels.iter().map(|&l| l as f64).collect(),
        )?;
        let meta = serde_json::json!({ "channels": self.channels, "side": self.side });
        tensor_io::write_dir(
            dir,
            "cdecay-dataset",
            meta,
            &[("images".into(), &images), ("labels".into(), &labels)],
        )
    }

    pub fn load(dir: &Path) -> Result<Batch> {
        let manifest = tensor_io::read_manifest(dir, "cdecay-dataset")?;
        let get = |name: &str| {
            manifest
                .tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::Manifest(format!("missing tensor {name}")))
                .and_then(|e| tensor_io::read_tensor(dir, e))
        };
        let field = |k: &str| {
            manifest.meta[k]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::Manifest(format!("missing meta field {k}")))
        };
        let images = get("images")?;
        let labels = get("labels")?
            .into_data()
            .into_iter()
            .map(|v| v as usize)
            .collect();
        Batch::new(images.into_data(), labels, field("channels")?, field("side")?)
    }
}

fn default_side() -> usize {
    16
}

fn default_channels() -> usize {
    1
}

fn default_contrast() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub classes: usize,
    pub samples_train: usize,
    pub samples_eval: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    #[serde(default = "default_side")]
    pub image_side: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    /// Standard deviation of template pixels around 0.5.
    #[serde(default = "default_contrast")]
    pub template_contrast: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            samples_train: 8192,
            samples_eval: 2048,
            noise_sigma: 0.25,
            seed: 0,
            image_side: default_side(),
            channels: default_channels(),
            template_contrast: default_contrast(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.samples_train == 0 || self.samples_eval == 0 {
            return Err(Error::Invalid("synthetic classes and sample counts must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(self.template_contrast >= 0.0) {
            return Err(Error::Invalid("noise_sigma and template_contrast must be nonnegative".into()));
        }
        if self.image_side == 0 || self.channels == 0 {
            return Err(Error::Invalid("image_side and channels must be positive".into()));
        }
        Ok(())
    }

    /// The per-class template images, `classes × image_len`.
    pub fn templates(&self) -> Vec<Vec<f64>> {
        let n = self.channels * self.image_side * self.image_side;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(0);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        (0..self.classes)
            .map(|_| {
                (0..n)
                    .map(|_| {
                        let z: f64 = normal.sample(&mut rng);
                        (0.5 + self.template_contrast * z).clamp(0.0, 1.0)
                    })
                    .collect()
            })
            .collect()
    }
}

/// Class `c` gets a fixed random template; samples are template plus Gaussian
/// noise clipped to `[0, 1]`. Labels cycle through the classes, so class
/// counts differ by at most one. Train and eval use disjoint noise streams.
pub fn synth_generate(cfg: &SynthConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let templates = cfg.templates();
    let make = |count: usize, stream: u64| -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(stream);
        let noise = Normal::new(0.0, 1.0).expect("unit normal");
        let mut images = Vec::with_capacity(count * templates[0].len());
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let c = i % cfg.classes;
            labels.push(c);
            for &t in &templates[c] {
                let z: f64 = noise.sample(&mut rng);
                images.push((t + cfg.noise_sigma * z).clamp(0.0, 1.0));
            }
        }
        Batch::new(images, labels, cfg.channels, cfg.image_side)
    };
    Ok((make(cfg.samples_train, 1)?, make(cfg.samples_eval, 2)?))
}

fn read_be_u32(bytes: &[u8], offset: usize, file: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::IdxTruncated {
            file: file.to_string(),
            offset: bytes.len(),
            needed: offset + 4,
        })
}

/// Parse an IDX image/label file pair (`0x803` ubyte images, `0x801` ubyte labels).
pub fn parse_idx(images: &[u8], labels: &[u8], images_name: &str, labels_name: &str) -> Result<Dataset> {
    let magic = read_be_u32(images, 0, images_name)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::IdxMagic {
            file: images_name.into(),
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let magic = read_be_u32(labels, 0, labels_name)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::IdxMagic {
            file: labels_name.into(),
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let n_img = read_be_u32(images, 4, images_name)? as usize;
    let rows = read_be_u32(images, 8, images_name)? as usize;
    let cols = read_be_u32(images, 12, images_name)? as usize;
    let n_lab = read_be_u32(labels, 4, labels_name)? as usize;
    if rows != cols {
        return Err(Error::Invalid(format!("IDX images must be square, got {rows}x{cols}")));
    }
    let need = 16 + n_img * rows * cols;
    if images.len() < need {
        return Err(Error::IdxTruncated {
            file: images_name.into(),
            offset: images.len(),
            needed: need,
        });
    }
    if labels.len() < 8 + n_lab {
        return Err(Error::IdxTruncated {
            file: labels_name.into(),
            offset: labels.len(),
            needed: 8 + n_lab,
        });
    }
    if n_img != n_lab {
        return Err(Error::IdxCountMismatch {
            images: n_img,
            labels: n_lab,
        });
    }
    let pixels = images[16..need].iter().map(|&b| b as f64 / 255.0).collect();
    let labels = labels[8..8 + n_lab].iter().map(|&b| b as usize).collect();
    Batch::new(pixels, labels, 1, rows)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = fs::read(images_path)?;
    let labels = fs::read(labels_path)?;
    parse_idx(
        &images,
        &labels,
        &images_path.display().to_string(),
        &labels_path.display().to_string(),
    )
}

/// Encode ubyte pixels and labels as an IDX file pair.
pub fn encode_idx(pixels: &[u8], labels: &[u8], side: usize) -> (Vec<u8>, Vec<u8>) {
    let n = labels.len();
    assert_eq!(pixels.len(), n * side * side);
    let mut img = Vec::with_capacity(16 + pixels.len());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(n as u32).to_be_bytes());
    img.extend_from_slice(&(side as u32).to_be_bytes());
    img.extend_from_slice(&(side as u32).to_be_bytes());
    img.extend_from_slice(pixels);
    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    (img, lab)
}

/// Shuffled index order for one epoch; a pure function of `(seed, epoch)`.
pub fn epoch_order(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

/// Batches of one epoch in shuffled order; the final partial batch is kept.
pub fn batches(dataset: &Dataset, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Invalid("batch_size must be at least 1".into()));
    }
    let order = epoch_order(dataset.len(), seed, epoch);
    Ok(order.chunks(batch_size).map(|idx| dataset.select(idx)).collect())
}

/// Endless stream of training batches cycling through epochs.
pub struct BatchStream<'a> {
    dataset: &'a Dataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl<'a> BatchStream<'a> {
    pub fn new(dataset: &'a Dataset, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || dataset.is_empty() {
            return Err(Error::Invalid("batch stream needs batch_size >= 1 and data".into()));
        }
        Ok(Self {
            dataset,
            batch_size,
            seed,
            epoch: 0,
            order: epoch_order(dataset.len(), seed, 0),
            pos: 0,
        })
    }

    pub fn next_batch(&mut self) -> Batch {
        if self.pos >= self.order.len() {
            self.epoch += 1;
            self.order = epoch_order(self.dataset.len(), self.seed, self.epoch);
            self.pos = 0;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let b = self.dataset.select(&self.order[self.pos..end]);
        self.pos = end;
        b
    }
}

/// Uniform random images for tests and probes.
pub fn random_batch(n: usize, channels: usize, side: usize, classes: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = (0..n * channels * side * side).map(|_| rng.random::<f64>()).collect();
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Batch {
        images,
        labels,
        channels,
        side,
    }
}
