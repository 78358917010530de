//! Supervised pretraining of the stand-in foundation extractor on the broad
//! domain.

use serde::{Deserialize, Serialize};

use crate::data::{DomainSplits, Split};
use crate::models::{ArchSpec, ParamModule};
use crate::objectives::cross_entropy_grad;
use crate::optim::{cosine_lr, Sgd, SgdConfig};
use crate::record::{MetricRow, Phase, RunRecord};
use crate::train::{
    accuracy, batch_hits, check_finite, extract_features, map_in_chunks, minibatches, EpochMeans,
};
use crate::{rng, Error, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Channel width of the first convolution.
    pub width: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 32,
            width: 16,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.width == 0 {
            return Err(Error::InvalidConfig(
                "batch_size and width must be positive".into(),
            ));
        }
        self.sgd().validate()
    }

    fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

/// A frozen extractor together with how well it classified the broad domain.
#[derive(Debug, Clone)]
pub struct PretrainedExtractor<T> {
    pub extractor: ParamModule<T>,
    pub broad_test_top1: f64,
    pub record: RunRecord,
}

/// Trains a teacher extractor plus a throwaway pooled linear head on the broad
/// domain, then discards the head and freezes the extractor.
pub fn pretrain_teacher_extractor<T: Real>(
    broad: &DomainSplits,
    cfg: &PretrainConfig,
) -> Result<PretrainedExtractor<T>> {
    cfg.validate()?;
    let train = &broad.train;
    if train.is_empty() {
        return Err(Error::Empty("broad training split"));
    }
    let input = train.input_shape();
    let mut extractor: ParamModule<T> = ArchSpec::TeacherExtractor {
        input,
        width: cfg.width,
    }
    .build("teacher.extractor", cfg.seed)?;
    let k = train.num_classes();
    let mut head: ParamModule<T> = ParamModule::build(
        "pretrain.head",
        ArchSpec::Custom {
            label: "pooled-linear".into(),
        },
        extractor.output_shape(),
        cfg.seed,
        |b| {
            b.global_avg_pool()?.linear("fc", k, 1.0)?;
            Ok(())
        },
    )?;
    let mut opt_e = Sgd::new(&extractor, cfg.sgd());
    let mut opt_h = Sgd::new(&head, cfg.sgd());
    let mut record = RunRecord::new(cfg.seed);
    let labels = train.labels_usize();

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
        let order = rng::epoch_order(cfg.seed, "pretrain", epoch, train.len());
        let mut means = EpochMeans::default();
        for (bi, idx) in minibatches(&order, cfg.batch_size).enumerate() {
            let x = train.batch::<T>(idx);
            let y: alloc::vec::Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let (f, tape_e) = extractor.forward_train(&x)?;
            let (logits, tape_h) = head.forward_train(&f)?;
            let (ce, g) = cross_entropy_grad(&logits, &y)?;
            check_finite("pretrain", epoch, bi, ce, 0.0, 0.0, ce)?;
            means.add(idx.len(), batch_hits(&logits, &y), ce, 0.0, 0.0, ce);
            let mut gh = head.zero_grads();
            let gf = head.backward(tape_h, g, Some(&mut gh));
            let mut ge = extractor.zero_grads();
            extractor.backward(tape_e, gf, Some(&mut ge));
            opt_h.step(&mut head, &gh, lr)?;
            opt_e.step(&mut extractor, &ge, lr)?;
        }
        record.rows.push(MetricRow {
            epoch,
            phase: Phase::Pretrain,
            split: Split::Train,
            ce: Some(means.ce()),
            kl: None,
            mmd: None,
            total_loss: Some(means.total()),
            top1: Some(means.top1()),
            lr,
        });
    }

    let broad_test_top1 = if broad.test.is_empty() {
        0.0
    } else {
        let logits = map_in_chunks(&head, &extract_features(&extractor, &broad.test)?)?;
        accuracy(&logits, &broad.test.labels_usize())
    };
    record.rows.push(MetricRow {
        epoch: cfg.epochs.saturating_sub(1),
        phase: Phase::Pretrain,
        split: Split::Test,
        ce: None,
        kl: None,
        mmd: None,
        total_loss: None,
        top1: Some(broad_test_top1),
        lr: cosine_lr(cfg.lr, cfg.epochs, cfg.epochs),
    });
    extractor.freeze();
    Ok(PretrainedExtractor {
        extractor,
        broad_test_top1,
        record,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_domain, DomainSpec};

    #[test]
    fn returns_a_frozen_extractor_that_learned_something() {
        let spec = DomainSpec {
            num_classes: 3,
            samples_per_class: 30,
            image_size: [16, 16, 3],
            ..DomainSpec::default_broad(5)
        };
        let splits = generate_domain(&spec).unwrap();
        let cfg = PretrainConfig {
            epochs: 6,
            width: 4,
            batch_size: 16,
            ..Default::default()
        };
        let out = pretrain_teacher_extractor::<f32>(&splits, &cfg).unwrap();
        assert!(out.extractor.is_frozen());
        assert!(out.record.is_well_formed());
        let rows: alloc::vec::Vec<_> = out.record.rows_for(Phase::Pretrain, Split::Train).collect();
        assert_eq!(rows.len(), 6);
        assert!(rows[5].ce.unwrap() < rows[0].ce.unwrap());
        assert!((0.0..=1.0).contains(&out.broad_test_top1));
    }

    #[test]
    fn zero_batch_size_is_rejected() {
        let spec = DomainSpec {
            num_classes: 2,
            samples_per_class: 10,
            image_size: [8, 8, 3],
            ..DomainSpec::default_broad(1)
        };
        let splits = generate_domain(&spec).unwrap();
        let cfg = PretrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(matches!(
            pretrain_teacher_extractor::<f32>(&splits, &cfg),
            Err(Error::InvalidConfig(_))
        ));
    }
}
