//! In-memory image datasets, loaders and samplers.

mod augment;
mod formats;
mod subset;
mod synth;

pub use augment::{augment, AugmentPolicy};
pub use formats::{load_cifar_binary, load_idx, write_cifar_binary, write_idx};
pub use subset::{sample_labeled_subset, LabeledSplit, SubsetMode, SubsetSpec};
pub use synth::{generate_synthetic, GlyphSet, SynthSpec, GLYPH_SIZE};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    Labeled,
    Unlabeled,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Labeled => "labeled",
            Split::Unlabeled => "unlabeled",
        }
    }
}

/// Images in `[0,1]` with shape `[N,C,H,W]`, stored in 32-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Option<Vec<usize>>,
    class_count: usize,
    split: Split,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, class_count: usize, split: Split) -> Result<Self> {
        let (n, ..) = images.dims4()?;
        if labels.len() != n {
            return Err(Error::shape("dataset", format!("{} labels for {n} images", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: class_count,
            });
        }
        Ok(Dataset {
            images,
            labels: Some(labels),
            class_count,
            split,
        })
    }

    /// A dataset whose labels are hidden; may be empty.
    pub fn unlabeled(images: Tensor<f32>, class_count: usize) -> Result<Self> {
        images.dims4()?;
        Ok(Dataset {
            images,
            labels: None,
            class_count,
            split: Split::Unlabeled,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let len: usize = self.image_shape().iter().product();
        &self.images.data()[i * len..(i + 1) * len]
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument(format!("{} split has no labels", self.split.as_str())))
    }

    pub fn has_labels(&self) -> bool {
        self.labels.is_some()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Images at `indices` as a batch tensor.
    pub fn batch<F: Element>(&self, indices: &[usize]) -> Tensor<F> {
        self.images.select_rows(indices).cast()
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Result<Vec<usize>> {
        let labels = self.labels()?;
        Ok(indices.iter().map(|&i| labels[i]).collect())
    }

    /// Sub-dataset of the given rows, keeping label visibility.
    pub fn subset(&self, indices: &[usize], split: Split) -> Dataset {
        Dataset {
            images: self.images.select_rows(indices),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            class_count: self.class_count,
            split,
        }
    }

    pub fn class_histogram(&self) -> Result<Vec<usize>> {
        let mut h = vec![0; self.class_count];
        for &l in self.labels()? {
            h[l] += 1;
        }
        Ok(h)
    }
}
