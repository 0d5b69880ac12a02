//! Dataset ingestion, run configuration and checkpoints.

mod checkpoint;
mod cifar;
mod config;
mod idx;

use std::env;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use cifar::{load_cifar10_bin, CIFAR_RECORD_BYTES};
pub use config::{DatasetKind, RunConfig};
pub use idx::load_mnist_idx;

/// Environment variable naming the dataset root.
pub const DATA_DIR_ENV: &str = "BWMA_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Images in `N×C×H×W` layout with their class labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        let d = Self {
            images,
            labels,
            num_classes,
            split,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.ndim() != 4 || self.images.shape()[0] != self.labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("images {:?} with {} labels", self.images.shape(), self.labels.len()),
            ));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {l} outside [0, {})",
                self.num_classes
            )));
        }
        if !self.images.all_finite() {
            return Err(Error::NonFinite("dataset pixels".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape `[C, H, W]`.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.images.gather_outer(indices)?;
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }

    /// The first `n` samples (all of them if `n` exceeds the size).
    pub fn head(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        Ok(Dataset {
            images: self.images.slice_outer(0, n)?,
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
            split: self.split,
        })
    }
}

/// Sample order for `epoch` of a run seeded with `seed`.
pub fn epoch_permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Dataset root: an explicit path, else `BWMA_DATA_DIR`, else `./data`.
pub fn data_root(explicit: Option<&std::path::Path>) -> PathBuf {
    explicit
        .map(PathBuf::from)
        .or_else(|| env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Load MNIST from `<root>/mnist/{train,t10k}-{images-idx3,labels-idx1}-ubyte`.
pub fn load_mnist(root: &std::path::Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let dir = root.join("mnist");
    let pick = |kind: &str| {
        let a = dir.join(format!("{prefix}-{kind}-ubyte"));
        let b = dir.join(format!("{prefix}-{}-ubyte", kind.replacen('-', ".", 1)));
        if !a.exists() && b.exists() {
            b
        } else {
            a
        }
    };
    load_mnist_idx(&pick("images-idx3"), &pick("labels-idx1"), split)
}

/// Load CIFAR-10 from `<root>/cifar-10-batches-bin`.
pub fn load_cifar10(root: &std::path::Path, split: Split, mean: [f64; 3], std: [f64; 3]) -> Result<Dataset> {
    let dir = root.join("cifar-10-batches-bin");
    let paths: Vec<PathBuf> = match split {
        Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
        Split::Test => vec![dir.join("test_batch.bin")],
    };
    load_cifar10_bin(&paths, split, mean, std)
}
