//! Datasets, IDX loading and model files.

mod idx;
mod model_file;

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use idx::{encode_idx, load_idx_pair, load_mnist_dir, load_mnist_idx, parse_idx, read_idx, IdxArray};
pub use model_file::{decode_model, encode_model, load_model, save_model, ModelMeta, FORMAT_VERSION, MAGIC};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitKind {
    Full,
    Train,
    Val,
    Test,
}

/// Which part of a source a [`Dataset`] view holds and the seed that chose it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitTag {
    pub kind: SplitKind,
    pub seed: Option<u64>,
}

/// Images (`count × c × h × w`, values in `[0, 1]`) with integer labels.
///
/// Splits are index views over shared storage, so splitting never copies pixels.
#[derive(Clone, Debug)]
pub struct Dataset {
    images: Arc<Vec<f64>>,
    labels: Arc<Vec<usize>>,
    image_shape: [usize; 3],
    n_classes: usize,
    index: Vec<usize>,
    pub tag: SplitTag,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 {
            return Err(Error::shape("Dataset", format!("images must be 4-D, got {s:?}")));
        }
        if s[0] != labels.len() {
            return Err(Error::shape(
                "Dataset",
                format!("{} images but {} labels", s[0], labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Invalid(format!("label {bad} outside [0, {n_classes})")));
        }
        let image_shape = [s[1], s[2], s[3]];
        let n = labels.len();
        Ok(Self {
            images: Arc::new(images.into_data()),
            labels: Arc::new(labels),
            image_shape,
            n_classes,
            index: (0..n).collect(),
            tag: SplitTag {
                kind: SplitKind::Full,
                seed: None,
            },
        })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Indices into the underlying storage, in view order.
    pub fn source_indices(&self) -> &[usize] {
        &self.index
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[self.index[i]]
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n: usize = self.image_shape.iter().product();
        let src = self.index[i];
        &self.images[src * n..(src + 1) * n]
    }

    /// Stacks the samples at view positions `items` into a batch tensor.
    pub fn batch(&self, items: &[usize]) -> (Tensor, Vec<usize>) {
        let n: usize = self.image_shape.iter().product();
        let mut data = Vec::with_capacity(items.len() * n);
        let mut labels = Vec::with_capacity(items.len());
        for &i in items {
            data.extend_from_slice(self.image(i));
            labels.push(self.label(i));
        }
        let [c, h, w] = self.image_shape;
        (Tensor::from_parts(vec![items.len(), c, h, w], data), labels)
    }

    /// View holding view positions `items` of this dataset.
    pub fn subset(&self, items: &[usize], tag: SplitTag) -> Self {
        Self {
            index: items.iter().map(|&i| self.index[i]).collect(),
            tag,
            ..self.clone_shallow()
        }
    }

    /// First `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> Self {
        let items: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&items, self.tag)
    }

    pub fn with_tag(mut self, kind: SplitKind) -> Self {
        self.tag.kind = kind;
        self
    }

    fn clone_shallow(&self) -> Self {
        Self {
            images: Arc::clone(&self.images),
            labels: Arc::clone(&self.labels),
            image_shape: self.image_shape,
            n_classes: self.n_classes,
            index: Vec::new(),
            tag: self.tag,
        }
    }
}

/// Seeded shuffle, then the first `round(len · fraction)` samples become validation.
pub fn split_train_val(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Invalid(format!("validation fraction {fraction} not in (0, 1)")));
    }
    let n_val = (ds.len() as f64 * fraction).round() as usize;
    if n_val == 0 || n_val == ds.len() {
        return Err(Error::Invalid(format!(
            "fraction {fraction} of {} samples leaves an empty split",
            ds.len()
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (val, train) = order.split_at(n_val);
    let tag = |kind| SplitTag {
        kind,
        seed: Some(seed),
    };
    Ok((ds.subset(train, tag(SplitKind::Train)), ds.subset(val, tag(SplitKind::Val))))
}
