//! Comparators for the two-stage method, all trained for the same student
//! epoch budget.

use crate::data::LabeledDataset;
use crate::distill::{run_strategy, DistillConfig, DistillData, Strategy};
use crate::models::{
    build_projector, compose_teacher, ClassifierHead, ParamModule, ProjectorKind, StudentKind,
    StudentModel, TeacherPipeline,
};
use crate::record::RunRecord;
use crate::reprogram::{train_proxy, ReprogramConfig};
use crate::{Error, Real, Result};

pub use crate::distill::train_from_scratch;

/// A baseline's adapted teacher, the distilled student, and both records.
#[derive(Debug, Clone)]
pub struct BaselineOutcome<T> {
    pub teacher: TeacherPipeline<T>,
    pub teacher_record: RunRecord,
    pub student: StudentModel<T>,
    pub student_record: RunRecord,
}

/// Teacher head sized to what `kind` passes through unchanged: the pooled
/// feature vector for the identity projector, the flattened output otherwise.
fn wide_teacher<T: Real>(
    extractor: ParamModule<T>,
    kind: ProjectorKind,
    num_classes: usize,
    seed: u64,
) -> Result<TeacherPipeline<T>> {
    if !extractor.is_frozen() {
        return Err(Error::NotFrozen(extractor.name().into()));
    }
    let dim = match kind {
        ProjectorKind::Identity => crate::models::pooled_dim(extractor.output_shape()),
        _ => extractor.output_dim(),
    };
    let proj = build_projector(kind, extractor.output_shape(), dim, seed)?;
    let head = ClassifierHead::new("teacher.head", dim, num_classes, seed)?;
    compose_teacher(extractor, proj, head)
}

fn adapt_then_distill<T: Real>(
    kind: ProjectorKind,
    extractor: ParamModule<T>,
    student: StudentKind,
    train: &LabeledDataset,
    eval: Option<&LabeledDataset>,
    rcfg: &ReprogramConfig,
    dcfg: &DistillConfig,
) -> Result<BaselineOutcome<T>> {
    let pipeline = wide_teacher(extractor, kind, train.num_classes(), rcfg.seed)?;
    let rcfg = ReprogramConfig {
        projector: kind,
        loss: crate::objectives::LossConfig {
            mmd_weight: 0.0,
            ..rcfg.loss
        },
        ..*rcfg
    };
    let (teacher, teacher_record) = train_proxy(pipeline, train, eval, None, &rcfg)?;
    let data = DistillData::new(&teacher, train, eval)?;
    let (student, student_record) = run_strategy(
        student,
        &teacher,
        &data,
        &DistillConfig {
            strategy: Strategy::Normal,
            ..*dcfg
        },
    )?;
    Ok(BaselineOutcome {
        teacher,
        teacher_record,
        student,
        student_record,
    })
}

/// Linear probing: a fresh head on the raw extractor features (no projector),
/// followed by vanilla distillation into a student with a random head.
pub fn linear_probe_baseline<T: Real>(
    extractor: ParamModule<T>,
    student: StudentKind,
    train: &LabeledDataset,
    eval: Option<&LabeledDataset>,
    rcfg: &ReprogramConfig,
    dcfg: &DistillConfig,
) -> Result<BaselineOutcome<T>> {
    adapt_then_distill(
        ProjectorKind::Identity,
        extractor,
        student,
        train,
        eval,
        rcfg,
        dcfg,
    )
}

/// Reprogramming with a residual bottleneck adapter after the extractor and a
/// head on its output, then vanilla distillation with no classifier transfer.
pub fn mrkd_baseline<T: Real>(
    extractor: ParamModule<T>,
    student: StudentKind,
    train: &LabeledDataset,
    eval: Option<&LabeledDataset>,
    rcfg: &ReprogramConfig,
    dcfg: &DistillConfig,
) -> Result<BaselineOutcome<T>> {
    adapt_then_distill(
        ProjectorKind::BottleneckAdapter,
        extractor,
        student,
        train,
        eval,
        rcfg,
        dcfg,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ArchSpec;
    use crate::synth::{generate_domain, DomainSpec};

    fn setup() -> (crate::data::DomainSplits, ParamModule<f32>) {
        let spec = DomainSpec {
            samples_per_class: 20,
            image_size: [16, 16, 3],
            ..DomainSpec::default_target(6)
        };
        let mut ext = ArchSpec::TeacherExtractor {
            input: [3, 16, 16],
            width: 4,
        }
        .build::<f32>("teacher.extractor", 1)
        .unwrap();
        ext.freeze();
        (generate_domain(&spec).unwrap(), ext)
    }

    fn cfgs() -> (ReprogramConfig, DistillConfig) {
        (
            ReprogramConfig {
                epochs: 3,
                lr: 0.05,
                ..Default::default()
            },
            DistillConfig {
                total_epochs: 3,
                batch_size: 16,
                ..Default::default()
            },
        )
    }

    #[test]
    fn linear_probe_trains_only_the_head() {
        let (d, ext) = setup();
        let before = ext.checksum();
        let (rc, dc) = cfgs();
        let out = linear_probe_baseline(ext, StudentKind::Tiny, &d.train, Some(&d.test), &rc, &dc)
            .unwrap();
        assert_eq!(out.teacher.extractor().checksum(), before);
        assert_eq!(out.teacher.projector().num_params(), 0);
        assert_eq!(
            out.teacher.head().feature_dim(),
            out.teacher.extractor().output_shape()[0]
        );
        assert_eq!(
            out.student_record
                .rows
                .iter()
                .filter(|r| r.split == crate::data::Split::Train)
                .count(),
            3
        );
    }

    #[test]
    fn mrkd_adapts_without_touching_the_backbone() {
        let (d, ext) = setup();
        let before = ext.checksum();
        let fresh = wide_teacher(ext.clone(), ProjectorKind::BottleneckAdapter, 5, 0).unwrap();
        let (rc, dc) = cfgs();
        let out = mrkd_baseline(ext, StudentKind::Tiny, &d.train, None, &rc, &dc).unwrap();
        assert_eq!(out.teacher.extractor().checksum(), before);
        assert_ne!(
            out.teacher.projector().checksum(),
            fresh.projector().checksum()
        );
        assert_eq!(out.student_record.rows.len(), dc.total_epochs);
    }

    #[test]
    fn identity_projector_matches_head_on_raw_features() {
        let (d, ext) = setup();
        let (rc, _) = cfgs();
        let t = wide_teacher(ext.clone(), ProjectorKind::Identity, 5, rc.seed).unwrap();
        let (t, r1) = train_proxy(
            t,
            &d.train,
            None,
            None,
            &ReprogramConfig {
                projector: ProjectorKind::Identity,
                ..rc
            },
        )
        .unwrap();
        let dim = crate::models::pooled_dim(ext.output_shape());
        let head = ClassifierHead::new("teacher.head", dim, 5, rc.seed).unwrap();
        let flat =
            build_projector(ProjectorKind::Identity, ext.output_shape(), dim, rc.seed).unwrap();
        let (t2, r2) = train_proxy(
            compose_teacher(ext, flat, head).unwrap(),
            &d.train,
            None,
            None,
            &rc,
        )
        .unwrap();
        assert_eq!(r1, r2);
        assert_eq!(t.checksums(), t2.checksums());
    }
}
