use alloc::vec::Vec;

use crate::data::LabeledDataset;
use crate::models::{ParamModule, StudentModel, TeacherPipeline};
use crate::{Error, Real, Result, Tensor};

/// Inference batch size for evaluation and feature extraction.
pub(crate) const EVAL_CHUNK: usize = 128;

/// Anything that maps an image batch to class logits.
pub trait Classifier<T: Real> {
    fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
}

impl<T: Real> Classifier<T> for TeacherPipeline<T> {
    fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward(x)
    }
}

impl<T: Real> Classifier<T> for StudentModel<T> {
    fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward(x)
    }
}

fn chunks(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n)
        .step_by(EVAL_CHUNK)
        .map(move |s| (s..(s + EVAL_CHUNK).min(n)).collect())
}

/// Logits for every sample of `ds`, in order.
pub fn predict_logits<T: Real, C: Classifier<T> + ?Sized>(
    model: &C,
    ds: &LabeledDataset,
) -> Result<Tensor<T>> {
    if ds.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let parts = chunks(ds.len())
        .map(|idx| model.logits(&ds.batch::<T>(&idx)))
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
}

/// Fraction of samples whose argmax logit equals the label.
pub fn evaluate<T: Real, C: Classifier<T> + ?Sized>(model: &C, ds: &LabeledDataset) -> Result<f64> {
    let logits = predict_logits(model, ds)?;
    Ok(accuracy(&logits, &ds.labels_usize()))
}

pub(crate) fn accuracy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let hits = logits
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// Module outputs for every sample of `ds`, in order.
pub fn extract_features<T: Real>(
    module: &ParamModule<T>,
    ds: &LabeledDataset,
) -> Result<Tensor<T>> {
    if ds.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let parts = chunks(ds.len())
        .map(|idx| module.forward(&ds.batch::<T>(&idx)))
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
}

/// Applies `module` to a large batch in fixed-size chunks.
pub fn map_in_chunks<T: Real>(module: &ParamModule<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let parts = chunks(x.batch())
        .map(|idx| module.forward(&x.gather_rows(&idx)))
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
}

/// Splits an epoch's sample order into consecutive minibatches. The final
/// short batch is kept.
pub(crate) fn minibatches(order: &[usize], batch_size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(batch_size.max(1))
}

/// Running means of the loss terms over one epoch.
#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct EpochMeans {
    n: usize,
    hits: usize,
    ce: f64,
    kl: f64,
    mmd: f64,
    total: f64,
}

impl EpochMeans {
    pub fn add(&mut self, batch: usize, hits: usize, ce: f64, kl: f64, mmd: f64, total: f64) {
        let w = batch as f64;
        self.n += batch;
        self.hits += hits;
        self.ce += ce * w;
        self.kl += kl * w;
        self.mmd += mmd * w;
        self.total += total * w;
    }

    fn mean(&self, v: f64) -> f64 {
        v / self.n.max(1) as f64
    }

    pub fn ce(&self) -> f64 {
        self.mean(self.ce)
    }
    pub fn kl(&self) -> f64 {
        self.mean(self.kl)
    }
    pub fn mmd(&self) -> f64 {
        self.mean(self.mmd)
    }
    pub fn total(&self) -> f64 {
        self.mean(self.total)
    }
    pub fn top1(&self) -> f64 {
        self.hits as f64 / self.n.max(1) as f64
    }
}

pub(crate) fn batch_hits<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    logits
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count()
}

/// Aborts a run when any loss component is not finite.
pub(crate) fn check_finite(
    phase: &str,
    epoch: usize,
    batch: usize,
    ce: f64,
    kl: f64,
    mmd: f64,
    total: f64,
) -> Result<()> {
    if [ce, kl, mmd, total].iter().all(|v| v.is_finite()) {
        return Ok(());
    }
    Err(Error::NonFiniteLoss {
        phase: phase.into(),
        epoch,
        batch,
        ce,
        kl,
        mmd,
    })
}
