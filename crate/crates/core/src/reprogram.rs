//! Stage one: fit a projector and a task-aligned head on top of the frozen
//! extractor, using target labels and optionally an MMD penalty that pulls
//! broad and target features together in the projected space.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, Split};
use crate::domain_gap::{median_heuristic_bandwidth, mmd_with_grad, Estimator, KernelKind};
use crate::models::{
    build_projector, compose_teacher, ClassifierHead, ParamModule, ProjectorKind, TeacherPipeline,
};
use crate::objectives::{cross_entropy, reprogram_loss_grad, LossConfig};
use crate::optim::{cosine_lr, Sgd, SgdConfig};
use crate::record::{MetricRow, ModuleSnapshot, Phase, RunRecord};
use crate::train::{accuracy, batch_hits, check_finite, extract_features, minibatches, EpochMeans};
use crate::{rng, Error, Real, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReprogramConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub projector: ProjectorKind,
    pub loss: LossConfig,
}

impl Default for ReprogramConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 32,
            seed: 0,
            projector: ProjectorKind::TeacherBlock,
            loss: LossConfig::default(),
        }
    }
}

impl ReprogramConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.sgd().validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if self.loss.mmd_weight > 0.0 && self.batch_size < 2 {
            return Err(Error::InvalidConfig(
                "the MMD term needs batch_size >= 2".into(),
            ));
        }
        Ok(())
    }

    pub(crate) fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

/// Fresh projector and task-aligned head on top of a frozen extractor. The
/// head maps `student_feature_dim` features to `num_classes` logits so it can
/// later be copied into the student.
pub fn build_proxy_space<T: Real>(
    extractor: ParamModule<T>,
    projector: ProjectorKind,
    num_classes: usize,
    student_feature_dim: usize,
    seed: u64,
) -> Result<TeacherPipeline<T>> {
    if !extractor.is_frozen() {
        return Err(Error::NotFrozen(extractor.name().into()));
    }
    let proj = build_projector(
        projector,
        extractor.output_shape(),
        student_feature_dim,
        seed,
    )?;
    let head = ClassifierHead::new("teacher.head", student_feature_dim, num_classes, seed)?;
    compose_teacher(extractor, proj, head)
}

/// Trains the projector and head of `pipeline` on `train`.
///
/// `eval` adds a top-1 row per epoch for that split. `broad`, when given and
/// `cfg.loss.mmd_weight > 0`, supplies equal-sized batches for the MMD term
/// (biased estimator, RBF kernel whose bandwidth is fixed from the first batch
/// pair). The returned pipeline is fully frozen.
pub fn train_proxy<T: Real>(
    mut pipeline: TeacherPipeline<T>,
    train: &LabeledDataset,
    eval: Option<&LabeledDataset>,
    broad: Option<&LabeledDataset>,
    cfg: &ReprogramConfig,
) -> Result<(TeacherPipeline<T>, RunRecord)> {
    cfg.validate()?;
    if train.num_classes() > pipeline.num_classes() {
        return Err(Error::LabelOutOfRange {
            label: train.num_classes() - 1,
            num_classes: pipeline.num_classes(),
        });
    }
    let mut record = RunRecord::new(cfg.seed);
    if cfg.epochs == 0 {
        pipeline.freeze_all();
        return Ok((pipeline, record));
    }
    if train.is_empty() {
        return Err(Error::Empty("target training split"));
    }
    let use_mmd = cfg.loss.mmd_weight > 0.0 && broad.is_some();
    let feats = extract_features(pipeline.extractor(), train)?;
    let eval_feats = eval
        .map(|d| extract_features(pipeline.extractor(), d))
        .transpose()?;
    let broad_feats = match broad {
        Some(b) if use_mmd => Some(extract_features(pipeline.extractor(), b)?),
        _ => None,
    };
    let labels = train.labels_usize();

    // The frozen extractor is checksummed on entry and again after training.
    record.snapshots.push(ModuleSnapshot {
        epoch: 0,
        phase: Phase::Reprogram,
        module: pipeline.extractor().name().into(),
        checksum: pipeline.extractor().checksum(),
    });
    let (projector, head) = pipeline.trainable_mut();
    projector.unfreeze();
    head.module_mut().unfreeze();
    let mut opt_p = Sgd::new(projector, cfg.sgd());
    let mut opt_h = Sgd::new(head.module(), cfg.sgd());
    let mut sigma: Option<f64> = None;

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
        let order = rng::epoch_order(cfg.seed, "reprogram", epoch, train.len());
        let broad_order = broad_feats
            .as_ref()
            .map(|b| rng::epoch_order(cfg.seed, "reprogram.broad", epoch, b.batch()));
        let mut means = EpochMeans::default();
        let mut pos = 0;
        for (bi, idx) in minibatches(&order, cfg.batch_size).enumerate() {
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let (z, tape_p) = projector.forward_train(&feats.gather_rows(idx))?;
            let (logits, tape_h) = head.module().forward_train(&z)?;

            let mut mmd_term = None;
            let mut broad_pass = None;
            if let (Some(bf), Some(bo)) = (&broad_feats, &broad_order) {
                if idx.len() >= 2 {
                    let bidx: Vec<usize> =
                        (0..idx.len()).map(|j| bo[(pos + j) % bo.len()]).collect();
                    let (zb, tape_b) = projector.forward_train(&bf.gather_rows(&bidx))?;
                    let s = match sigma {
                        Some(s) => s,
                        None => *sigma.insert(median_heuristic_bandwidth(&z, &zb)?),
                    };
                    let (v, gz, gzb) =
                        mmd_with_grad(&z, &zb, KernelKind::Rbf, s, Estimator::Biased)?;
                    mmd_term = Some(v);
                    broad_pass = Some((tape_b, gz, gzb));
                }
            }
            pos += idx.len();

            let (total, g_logits) = reprogram_loss_grad(&logits, &y, mmd_term, &cfg.loss)?;
            let ce = cross_entropy(&logits, &y)?;
            check_finite(
                "reprogram",
                epoch,
                bi,
                ce,
                0.0,
                mmd_term.unwrap_or(0.0),
                total,
            )?;
            means.add(
                idx.len(),
                batch_hits(&logits, &y),
                ce,
                0.0,
                mmd_term.unwrap_or(0.0),
                total,
            );

            let mut gh = head.module().zero_grads();
            let mut gz = head.module().backward(tape_h, g_logits, Some(&mut gh));
            let mut gp = projector.zero_grads();
            if let Some((tape_b, gx, gy)) = broad_pass {
                let w = T::of(cfg.loss.mmd_weight);
                gz.data_mut()
                    .iter_mut()
                    .zip(gx.data())
                    .for_each(|(a, b)| *a += w * *b);
                let gy = Tensor::from_vec(gy.shape(), gy.data().iter().map(|v| w * *v).collect())?;
                projector.backward(tape_b, gy, Some(&mut gp));
            }
            projector.backward(tape_p, gz, Some(&mut gp));
            opt_h.step(head.module_mut(), &gh, lr)?;
            opt_p.step(projector, &gp, lr)?;
        }
        record.rows.push(MetricRow {
            epoch,
            phase: Phase::Reprogram,
            split: Split::Train,
            ce: Some(means.ce()),
            kl: None,
            mmd: use_mmd.then(|| means.mmd()),
            total_loss: Some(means.total()),
            top1: Some(means.top1()),
            lr,
        });
        if let (Some(ev), Some(ef)) = (eval, &eval_feats) {
            let logits = head.forward(&projector.forward(ef)?)?;
            record.rows.push(MetricRow {
                epoch,
                phase: Phase::Reprogram,
                split: ev.split(),
                ce: None,
                kl: None,
                mmd: None,
                total_loss: None,
                top1: Some(accuracy(&logits, &ev.labels_usize())),
                lr,
            });
        }
        record.snapshots.push(ModuleSnapshot {
            epoch,
            phase: Phase::Reprogram,
            module: head.module().name().into(),
            checksum: head.checksum(),
        });
    }
    pipeline.freeze_all();
    record.snapshots.push(ModuleSnapshot {
        epoch: cfg.epochs,
        phase: Phase::Reprogram,
        module: pipeline.extractor().name().into(),
        checksum: pipeline.extractor().checksum(),
    });
    Ok((pipeline, record))
}
