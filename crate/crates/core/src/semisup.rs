//! Distillation when only a fraction of the target training labels is kept.
//! The teacher's argmax labels stand in for the removed ones.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::distill::{distill_student, DistillConfig, DistillData, Strategy};
use crate::models::{transfer_classifier, StudentKind, StudentModel, TeacherPipeline};
use crate::record::RunRecord;
use crate::train::predict_logits;
use crate::{rng, Error, Real, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SemiSupConfig {
    pub labeled_fraction: f64,
    pub use_unlabeled: bool,
}

impl Default for SemiSupConfig {
    fn default() -> Self {
        Self {
            labeled_fraction: 0.1,
            use_unlabeled: true,
        }
    }
}

impl SemiSupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(Error::InvalidConfig(alloc::format!(
                "labeled_fraction must lie in (0, 1], got {}",
                self.labeled_fraction
            )));
        }
        Ok(())
    }
}

/// Indices of the labeled and unlabeled parts of a training split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// Keeps `ceil(fraction * n_c)` randomly chosen samples of every class `c`
/// labeled. Both index lists are in dataset order.
pub fn partition_labels(ds: &LabeledDataset, fraction: f64, seed: u64) -> Result<Partition> {
    SemiSupConfig {
        labeled_fraction: fraction,
        use_unlabeled: true,
    }
    .validate()?;
    let mut keep = alloc::vec![false; ds.len()];
    for class in 0..ds.num_classes() {
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.label(i) == class).collect();
        let n_keep = libm::ceil(fraction * members.len() as f64 - 1e-9) as usize;
        rng::shuffle(
            &mut rng::stream(seed, "semisup.partition", class as u64),
            &mut members,
        );
        for &i in &members[..n_keep.min(members.len())] {
            keep[i] = true;
        }
    }
    let (labeled, unlabeled) = (0..ds.len()).partition(|&i| keep[i]);
    Ok(Partition { labeled, unlabeled })
}

/// Teacher argmax labels and logits for every sample of `ds`.
pub fn pseudo_label<T: Real>(
    teacher: &TeacherPipeline<T>,
    ds: &LabeledDataset,
) -> Result<(Vec<usize>, Tensor<T>)> {
    if ds.is_empty() {
        return Err(Error::Empty("unlabeled set"));
    }
    let logits = predict_logits(teacher, ds)?;
    Ok((logits.argmax_rows(), logits))
}

/// Progressive distillation on the labeled part of `train`, plus the
/// pseudo-labeled remainder when `semi.use_unlabeled` is set. The teacher
/// should have been reprogrammed on the labeled part only.
///
/// Returns the student, the record, and the partition used.
pub fn train_semisup<T: Real>(
    kind: StudentKind,
    teacher: &TeacherPipeline<T>,
    train: &LabeledDataset,
    eval: Option<&LabeledDataset>,
    semi: &SemiSupConfig,
    cfg: &DistillConfig,
) -> Result<(StudentModel<T>, RunRecord, Partition)> {
    semi.validate()?;
    cfg.validate()?;
    let part = partition_labels(train, semi.labeled_fraction, cfg.seed)?;
    let mut order = part.labeled.clone();
    if semi.use_unlabeled {
        order.extend_from_slice(&part.unlabeled);
    }
    let combined = train.subset(&order);
    let (pseudo, logits) = pseudo_label(teacher, &combined)?;
    let n_labeled = part.labeled.len();
    let targets: Vec<usize> = (0..combined.len())
        .map(|i| {
            if i < n_labeled {
                combined.label(i)
            } else {
                pseudo[i]
            }
        })
        .collect();
    let data = DistillData::with_targets(&combined, targets, logits, eval)?;

    let cfg = DistillConfig {
        strategy: Strategy::Progressive,
        ..*cfg
    };
    let mut student =
        StudentModel::init(kind, train.input_shape(), teacher.num_classes(), cfg.seed)?;
    transfer_classifier(teacher.head(), student.head_mut())?;
    let record = distill_student(&mut student, teacher, &data, &cfg)?;
    Ok((student, record, part))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::distill::run_strategy;
    use crate::models::{ArchSpec, ProjectorKind};
    use crate::reprogram::{build_proxy_space, train_proxy, ReprogramConfig};
    use crate::synth::{generate_domain, DomainSpec};
    use crate::train::evaluate;

    fn splits() -> crate::data::DomainSplits {
        let spec = DomainSpec {
            samples_per_class: 40,
            image_size: [16, 16, 3],
            ..DomainSpec::default_target(4)
        };
        generate_domain(&spec).unwrap()
    }

    fn teacher(train: &LabeledDataset) -> TeacherPipeline<f32> {
        let mut ext = ArchSpec::TeacherExtractor {
            input: [3, 16, 16],
            width: 4,
        }
        .build::<f32>("teacher.extractor", 1)
        .unwrap();
        ext.freeze();
        let p = build_proxy_space(
            ext,
            ProjectorKind::Conv3x3,
            5,
            StudentKind::Tiny.feature_dim(),
            0,
        )
        .unwrap();
        train_proxy(
            p,
            train,
            None,
            None,
            &ReprogramConfig {
                epochs: 4,
                lr: 0.05,
                ..Default::default()
            },
        )
        .unwrap()
        .0
    }

    #[test]
    fn partition_keeps_the_ceiling_per_class() {
        let d = splits();
        let part = partition_labels(&d.train, 0.1, 3).unwrap();
        let counts = d.train.class_counts();
        let kept = d.train.subset(&part.labeled).class_counts();
        for (n, k) in counts.iter().zip(&kept) {
            assert_eq!(*k, (0.1 * *n as f64).ceil() as usize);
        }
        assert_eq!(part.labeled.len() + part.unlabeled.len(), d.train.len());
        assert!(part.labeled.windows(2).all(|w| w[0] < w[1]));
        assert!(part.unlabeled.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(partition_labels(&d.train, 0.1, 3).unwrap(), part);
        assert_ne!(partition_labels(&d.train, 0.1, 4).unwrap(), part);
        assert!(partition_labels(&d.train, 0.0, 3).is_err());
        assert!(partition_labels(&d.train, 1.2, 3).is_err());
    }

    #[test]
    fn pseudo_labels_agree_with_evaluation() {
        let d = splits();
        let t = teacher(&d.train);
        let (labels, logits) = pseudo_label(&t, &d.train).unwrap();
        let agree = labels
            .iter()
            .zip(d.train.labels())
            .filter(|(a, b)| **a == **b as usize)
            .count();
        assert_eq!(
            agree as f64 / d.train.len() as f64,
            evaluate(&t, &d.train).unwrap()
        );
        assert_eq!(pseudo_label(&t, &d.train).unwrap(), (labels, logits));
        assert!(matches!(
            pseudo_label(&t, &d.train.subset(&[])),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn full_labels_without_unlabeled_match_progressive() {
        let d = splits();
        let t = teacher(&d.train);
        let cfg = DistillConfig {
            total_epochs: 2,
            batch_size: 16,
            ..Default::default()
        };
        let semi = SemiSupConfig {
            labeled_fraction: 1.0,
            use_unlabeled: false,
        };
        let (s1, r1, part) =
            train_semisup(StudentKind::Tiny, &t, &d.train, Some(&d.test), &semi, &cfg).unwrap();
        assert!(part.unlabeled.is_empty());
        let data = DistillData::new(&t, &d.train, Some(&d.test)).unwrap();
        let (s2, r2) = run_strategy(StudentKind::Tiny, &t, &data, &cfg).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(s1, s2);
        assert!(r1.final_top1(Split::Test).is_some());
    }
}
