//! Labeled image datasets.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::synth::DomainSpec;
use crate::{Error, Real, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Unknown {
                kind: "split",
                name: s.into(),
            }),
        }
    }
}

/// Images stored `[N x H x W x C]` with values in `[0, 1]`, plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    images: Vec<f32>,
    labels: Vec<u32>,
    split: Split,
    spec: DomainSpec,
}

impl LabeledDataset {
    pub fn new(images: Vec<f32>, labels: Vec<u32>, split: Split, spec: DomainSpec) -> Result<Self> {
        let [h, w, c] = spec.image_size;
        if images.len() != labels.len() * h * w * c {
            return Err(Error::ShapeMismatch(alloc::format!(
                "{} labels need {} pixel values, got {}",
                labels.len(),
                labels.len() * h * w * c,
                images.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= spec.num_classes) {
            return Err(Error::LabelOutOfRange {
                label: l as usize,
                num_classes: spec.num_classes,
            });
        }
        Ok(Self {
            images,
            labels,
            split,
            spec,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn spec(&self) -> &DomainSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// Per-sample model input shape `[C, H, W]`.
    pub fn input_shape(&self) -> [usize; 3] {
        let [h, w, c] = self.spec.image_size;
        [c, h, w]
    }

    /// Raw `[N x H x W x C]` pixel block.
    pub fn images(&self) -> &[f32] {
        &self.images
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }

    fn image_len(&self) -> usize {
        self.spec.image_size.iter().product()
    }

    /// Selected samples as a `[B, C, H, W]` model input.
    pub fn batch<T: Real>(&self, idx: &[usize]) -> Tensor<T> {
        let [h, w, c] = self.spec.image_size;
        let per = self.image_len();
        let mut data = vec![T::zero(); idx.len() * per];
        for (b, &i) in idx.iter().enumerate() {
            let src = &self.images[i * per..(i + 1) * per];
            let dst = &mut data[b * per..(b + 1) * per];
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        dst[(ch * h + y) * w + x] = T::of(src[(y * w + x) * c + ch] as f64);
                    }
                }
            }
        }
        Tensor::from_vec(&[idx.len(), c, h, w], data).expect("sized above")
    }

    pub fn batch_labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i] as usize).collect()
    }

    /// A new dataset holding the selected samples in the given order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        let per = self.image_len();
        let mut images = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            images.extend_from_slice(&self.images[i * per..(i + 1) * per]);
        }
        Self {
            images,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
            spec: self.spec.clone(),
        }
    }

    /// Same samples with replacement labels.
    pub fn relabeled(&self, labels: Vec<u32>) -> Result<Self> {
        Self::new(self.images.clone(), labels, self.split, self.spec.clone())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.spec.num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// SHA-256 over the pixel block and the labels.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::with_capacity(self.images.len() * 4);
        for v in &self.images {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        h.update(&buf);
        buf.clear();
        for l in &self.labels {
            buf.extend_from_slice(&l.to_le_bytes());
        }
        h.update(&buf);
        hex::encode(h.finalize())
    }
}

/// The three disjoint splits of one generated domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSplits {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
}

impl DomainSplits {
    pub fn get(&self, split: Split) -> &LabeledDataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}
