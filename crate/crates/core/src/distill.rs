//! Stage two: transfer the task-aligned head into a student and distill the
//! proxy space into it.
//!
//! Four schedules share one epoch budget:
//!
//! * `normal`: random student head, joint training for every epoch.
//! * `proxy_transfer`: copied head kept fixed, extractor-only training.
//! * `proxy_copy`: copied head, joint training.
//! * `progressive`: copied head, an extractor-only phase followed by a joint
//!   phase, split by `phase_split`.
//!
//! Each phase starts a fresh cosine schedule and fresh momentum buffers.
//! Minibatch order depends on the global epoch index only, so a progressive
//! run with `phase_split` 0 or 1 replays `proxy_copy` or `proxy_transfer`
//! exactly.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, Split};
use crate::models::{transfer_classifier, StudentKind, StudentModel, TeacherPipeline};
use crate::objectives::{cross_entropy_grad, distill_loss_grad, LossConfig};
use crate::optim::{cosine_lr, Sgd, SgdConfig};
use crate::record::{MetricRow, ModuleSnapshot, Phase, RunRecord};
use crate::train::{batch_hits, check_finite, evaluate, minibatches, predict_logits, EpochMeans};
use crate::{rng, Error, Real, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Normal,
    ProxyTransfer,
    ProxyCopy,
    #[default]
    Progressive,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Normal,
        Strategy::ProxyTransfer,
        Strategy::ProxyCopy,
        Strategy::Progressive,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Normal => "normal",
            Strategy::ProxyTransfer => "proxy_transfer",
            Strategy::ProxyCopy => "proxy_copy",
            Strategy::Progressive => "progressive",
        }
    }

    /// Whether the student starts from a copy of the teacher head.
    pub fn copies_head(self) -> bool {
        self != Strategy::Normal
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s.chars().map(|c| if c == '-' { '_' } else { c }).collect();
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == norm)
            .ok_or_else(|| Error::Unknown {
                kind: "distillation strategy",
                name: s.into(),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub total_epochs: usize,
    /// Fraction of `total_epochs` spent in the extractor-only phase of the
    /// progressive schedule.
    pub phase_split: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub strategy: Strategy,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            total_epochs: 400,
            phase_split: 0.5,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 32,
            seed: 0,
            loss: LossConfig::default(),
            strategy: Strategy::Progressive,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.sgd().validate()?;
        if self.total_epochs == 0 {
            return Err(Error::InvalidConfig(
                "total_epochs must be at least 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.phase_split) {
            return Err(Error::InvalidConfig(alloc::format!(
                "phase_split must lie in [0, 1], got {}",
                self.phase_split
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
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

    /// Epochs of the extractor-only phase in a progressive run.
    pub fn extractor_epochs(&self) -> usize {
        libm::round(self.total_epochs as f64 * self.phase_split) as usize
    }

    /// Epochs of the joint phase in a progressive run.
    pub fn global_epochs(&self) -> usize {
        self.total_epochs - self.extractor_epochs().min(self.total_epochs)
    }
}

/// Training inputs for the student: images, the labels used by the CE term,
/// cached teacher logits for the KL term, and an optional evaluation split.
#[derive(Debug, Clone)]
pub struct DistillData<'a, T> {
    train: &'a LabeledDataset,
    targets: Vec<usize>,
    teacher_logits: Option<Tensor<T>>,
    eval: Option<&'a LabeledDataset>,
}

impl<'a, T: Real> DistillData<'a, T> {
    /// Ground-truth labels plus the teacher's logits on every training image.
    pub fn new(
        teacher: &TeacherPipeline<T>,
        train: &'a LabeledDataset,
        eval: Option<&'a LabeledDataset>,
    ) -> Result<Self> {
        let logits = predict_logits(teacher, train)?;
        Ok(Self {
            train,
            targets: train.labels_usize(),
            teacher_logits: Some(logits),
            eval,
        })
    }

    /// Labels only; the KL term is dropped.
    pub fn supervised(train: &'a LabeledDataset, eval: Option<&'a LabeledDataset>) -> Self {
        Self {
            train,
            targets: train.labels_usize(),
            teacher_logits: None,
            eval,
        }
    }

    /// Explicit CE targets and teacher logits, one row per training image.
    pub fn with_targets(
        train: &'a LabeledDataset,
        targets: Vec<usize>,
        teacher_logits: Tensor<T>,
        eval: Option<&'a LabeledDataset>,
    ) -> Result<Self> {
        if targets.len() != train.len() || teacher_logits.batch() != train.len() {
            return Err(Error::ShapeMismatch(alloc::format!(
                "{} images, {} targets, {} teacher rows",
                train.len(),
                targets.len(),
                teacher_logits.batch()
            )));
        }
        Ok(Self {
            train,
            targets,
            teacher_logits: Some(teacher_logits),
            eval,
        })
    }

    pub fn train(&self) -> &LabeledDataset {
        self.train
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn teacher_logits(&self) -> Option<&Tensor<T>> {
        self.teacher_logits.as_ref()
    }
}

fn check_teacher<T: Real>(teacher: &TeacherPipeline<T>) -> Result<()> {
    if !teacher.is_fully_frozen() {
        return Err(Error::NotFrozen("teacher pipeline".into()));
    }
    Ok(())
}

fn check_head_transferred<T: Real>(
    student: &StudentModel<T>,
    teacher: &TeacherPipeline<T>,
) -> Result<()> {
    if student.head().checksum() != teacher.head().checksum() {
        return Err(Error::Precondition(
            "student head must equal the teacher head before the extractor phase".into(),
        ));
    }
    Ok(())
}

/// Extractor-only phase of a progressive run: `cfg.extractor_epochs()` epochs
/// with the student head held fixed.
pub fn distill_extractor_phase<T: Real>(
    student: &mut StudentModel<T>,
    teacher: &TeacherPipeline<T>,
    data: &DistillData<'_, T>,
    cfg: &DistillConfig,
) -> Result<RunRecord> {
    cfg.validate()?;
    check_teacher(teacher)?;
    check_head_transferred(student, teacher)?;
    let mut record = RunRecord::new(cfg.seed);
    run_phase(
        student,
        data,
        cfg,
        Phase::Extractor,
        cfg.extractor_epochs(),
        0,
        &mut record,
    )?;
    Ok(record)
}

/// Joint phase of a progressive run: the remaining epochs, continuing the
/// global epoch count after the extractor phase.
pub fn distill_global_phase<T: Real>(
    student: &mut StudentModel<T>,
    teacher: &TeacherPipeline<T>,
    data: &DistillData<'_, T>,
    cfg: &DistillConfig,
) -> Result<RunRecord> {
    cfg.validate()?;
    check_teacher(teacher)?;
    let mut record = RunRecord::new(cfg.seed);
    run_phase(
        student,
        data,
        cfg,
        Phase::Global,
        cfg.global_epochs(),
        cfg.extractor_epochs(),
        &mut record,
    )?;
    Ok(record)
}

/// Fresh student of family `kind` trained from `teacher` under
/// `cfg.strategy`.
pub fn run_strategy<T: Real>(
    kind: StudentKind,
    teacher: &TeacherPipeline<T>,
    data: &DistillData<'_, T>,
    cfg: &DistillConfig,
) -> Result<(StudentModel<T>, RunRecord)> {
    cfg.validate()?;
    check_teacher(teacher)?;
    let mut student = StudentModel::init(
        kind,
        data.train.input_shape(),
        teacher.num_classes(),
        cfg.seed,
    )?;
    if cfg.strategy.copies_head() {
        transfer_classifier(teacher.head(), student.head_mut())?;
    }
    let record = distill_student(&mut student, teacher, data, cfg)?;
    Ok((student, record))
}

/// Runs `cfg.strategy` on an existing student. For the head-copying
/// strategies the student head must already equal the teacher head.
pub fn distill_student<T: Real>(
    student: &mut StudentModel<T>,
    teacher: &TeacherPipeline<T>,
    data: &DistillData<'_, T>,
    cfg: &DistillConfig,
) -> Result<RunRecord> {
    cfg.validate()?;
    check_teacher(teacher)?;
    if cfg.strategy.copies_head() {
        check_head_transferred(student, teacher)?;
    }
    let mut record = RunRecord::new(cfg.seed);
    let n = cfg.total_epochs;
    snapshot_teacher(&mut record, teacher, 0);
    match cfg.strategy {
        Strategy::Normal | Strategy::ProxyCopy => {
            run_phase(student, data, cfg, Phase::Global, n, 0, &mut record)?
        }
        Strategy::ProxyTransfer => {
            run_phase(student, data, cfg, Phase::Extractor, n, 0, &mut record)?
        }
        Strategy::Progressive => {
            let e = cfg.extractor_epochs();
            run_phase(student, data, cfg, Phase::Extractor, e, 0, &mut record)?;
            run_phase(student, data, cfg, Phase::Global, n - e, e, &mut record)?;
        }
    }
    snapshot_teacher(&mut record, teacher, n);
    Ok(record)
}

/// Checksums of the three teacher stages, recorded under the global phase.
fn snapshot_teacher<T: Real>(record: &mut RunRecord, teacher: &TeacherPipeline<T>, epoch: usize) {
    let names = [
        teacher.extractor().name(),
        teacher.projector().name(),
        teacher.head().module().name(),
    ];
    for (name, checksum) in names.into_iter().zip(teacher.checksums()) {
        record.snapshots.push(ModuleSnapshot {
            epoch,
            phase: Phase::Global,
            module: name.into(),
            checksum,
        });
    }
}

/// Supervised training of a fresh student with CE only, for the same epoch
/// budget.
pub fn train_from_scratch<T: Real>(
    kind: StudentKind,
    train: &LabeledDataset,
    eval: Option<&LabeledDataset>,
    cfg: &DistillConfig,
) -> Result<(StudentModel<T>, RunRecord)> {
    cfg.validate()?;
    let mut student = StudentModel::init(kind, train.input_shape(), train.num_classes(), cfg.seed)?;
    let data = DistillData::supervised(train, eval);
    let mut record = RunRecord::new(cfg.seed);
    run_phase(
        &mut student,
        &data,
        cfg,
        Phase::Global,
        cfg.total_epochs,
        0,
        &mut record,
    )?;
    Ok((student, record))
}

fn run_phase<T: Real>(
    student: &mut StudentModel<T>,
    data: &DistillData<'_, T>,
    cfg: &DistillConfig,
    phase: Phase,
    epochs: usize,
    epoch_offset: usize,
    record: &mut RunRecord,
) -> Result<()> {
    if epochs == 0 {
        return Ok(());
    }
    let train = data.train;
    if train.is_empty() {
        return Err(Error::Empty("student training set"));
    }
    let train_head = phase != Phase::Extractor;
    let (extractor, head) = student.parts_mut();
    extractor.unfreeze();
    if train_head {
        head.module_mut().unfreeze();
    } else {
        head.module_mut().freeze();
    }
    let mut opt_e = Sgd::new(extractor, cfg.sgd());
    let mut opt_h = Sgd::new(head.module(), cfg.sgd());
    let tag = phase.as_str();

    for e in 0..epochs {
        let epoch = epoch_offset + e;
        let lr = cosine_lr(cfg.lr, e, epochs);
        let order = rng::epoch_order(cfg.seed, "distill", epoch, train.len());
        let mut means = EpochMeans::default();
        for (bi, idx) in minibatches(&order, cfg.batch_size).enumerate() {
            let x = train.batch::<T>(idx);
            let y: Vec<usize> = idx.iter().map(|&i| data.targets[i]).collect();
            let (f, tape_e) = extractor.forward_train(&x)?;
            let (logits, tape_h) = head.module().forward_train(&f)?;
            let (ce, kl, total, g) = match &data.teacher_logits {
                Some(t) => {
                    let (l, g) = distill_loss_grad(&logits, &t.gather_rows(idx), &y, &cfg.loss)?;
                    (l.ce, l.kl, l.total, g)
                }
                None => {
                    let (ce, mut g) = cross_entropy_grad(&logits, &y)?;
                    let w = T::of(cfg.loss.ce_weight);
                    g.data_mut().iter_mut().for_each(|v| *v *= w);
                    (ce, 0.0, cfg.loss.ce_weight * ce, g)
                }
            };
            check_finite(tag, epoch, bi, ce, kl, 0.0, total)?;
            means.add(idx.len(), batch_hits(&logits, &y), ce, kl, 0.0, total);
            let mut gh = train_head.then(|| head.module().zero_grads());
            let gf = head.module().backward(tape_h, g, gh.as_mut());
            let mut ge = extractor.zero_grads();
            extractor.backward(tape_e, gf, Some(&mut ge));
            opt_e.step(extractor, &ge, lr)?;
            if let Some(gh) = &gh {
                opt_h.step(head.module_mut(), gh, lr)?;
            }
        }
        record.rows.push(MetricRow {
            epoch,
            phase,
            split: Split::Train,
            ce: Some(means.ce()),
            kl: data.teacher_logits.is_some().then(|| means.kl()),
            mmd: None,
            total_loss: Some(means.total()),
            top1: Some(means.top1()),
            lr,
        });
        record.snapshots.push(ModuleSnapshot {
            epoch,
            phase,
            module: "student.head".into(),
            checksum: head.checksum(),
        });
        if let Some(ev) = data.eval {
            let top1 = evaluate(&StudentView { extractor, head }, ev)?;
            record.rows.push(MetricRow {
                epoch,
                phase,
                split: ev.split(),
                ce: None,
                kl: None,
                mmd: None,
                total_loss: None,
                top1: Some(top1),
                lr,
            });
        }
    }
    // The head is trainable again once the phase ends.
    head.module_mut().unfreeze();
    Ok(())
}

struct StudentView<'a, T> {
    extractor: &'a crate::models::ParamModule<T>,
    head: &'a crate::models::ClassifierHead<T>,
}

impl<T: Real> crate::train::Classifier<T> for StudentView<'_, T> {
    fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.head.forward(&self.extractor.forward(x)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ArchSpec, ProjectorKind};
    use crate::objectives::cross_entropy;
    use crate::reprogram::{build_proxy_space, train_proxy, ReprogramConfig};
    use crate::synth::{generate_domain, DomainSpec};

    struct Fixture {
        splits: crate::data::DomainSplits,
        teacher: TeacherPipeline<f32>,
    }

    fn fixture() -> Fixture {
        let spec = DomainSpec {
            samples_per_class: 24,
            image_size: [16, 16, 3],
            ..DomainSpec::default_target(9)
        };
        let splits = generate_domain(&spec).unwrap();
        let mut ext = ArchSpec::TeacherExtractor {
            input: [3, 16, 16],
            width: 4,
        }
        .build::<f32>("teacher.extractor", 1)
        .unwrap();
        ext.freeze();
        let p = build_proxy_space(
            ext,
            ProjectorKind::TeacherBlock,
            5,
            StudentKind::Tiny.feature_dim(),
            2,
        )
        .unwrap();
        let cfg = ReprogramConfig {
            epochs: 5,
            lr: 0.05,
            ..Default::default()
        };
        let (teacher, _) = train_proxy(p, &splits.train, None, None, &cfg).unwrap();
        Fixture { splits, teacher }
    }

    fn cfg(strategy: Strategy, epochs: usize, split: f64) -> DistillConfig {
        DistillConfig {
            total_epochs: epochs,
            phase_split: split,
            strategy,
            batch_size: 16,
            ..Default::default()
        }
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
        }
        assert_eq!(
            "proxy-copy".parse::<Strategy>().unwrap(),
            Strategy::ProxyCopy
        );
        assert!(matches!(
            "greedy".parse::<Strategy>(),
            Err(Error::Unknown { .. })
        ));
    }

    #[test]
    fn phase_epochs_split_the_budget() {
        let c = cfg(Strategy::Progressive, 7, 0.5);
        assert_eq!(c.extractor_epochs() + c.global_epochs(), 7);
        assert_eq!(cfg(Strategy::Progressive, 10, 0.0).extractor_epochs(), 0);
        assert_eq!(cfg(Strategy::Progressive, 10, 1.0).global_epochs(), 0);
        assert!(cfg(Strategy::Progressive, 10, 1.5).validate().is_err());
        assert!(cfg(Strategy::Progressive, 0, 0.5).validate().is_err());
    }

    #[test]
    fn extractor_phase_keeps_the_head_and_teacher_fixed() {
        let fx = fixture();
        let data = DistillData::new(&fx.teacher, &fx.splits.train, Some(&fx.splits.test)).unwrap();
        let c = cfg(Strategy::Progressive, 6, 0.5);
        let mut s = StudentModel::init(StudentKind::Tiny, [3, 16, 16], 5, 0).unwrap();
        let teacher_before = fx.teacher.checksums();
        assert!(matches!(
            distill_extractor_phase(&mut s, &fx.teacher, &data, &c),
            Err(Error::Precondition(_))
        ));
        transfer_classifier(fx.teacher.head(), s.head_mut()).unwrap();
        let head0 = s.head().checksum();
        let ext0 = s.extractor().checksum();
        let rec = distill_extractor_phase(&mut s, &fx.teacher, &data, &c).unwrap();
        assert_eq!(s.head().checksum(), head0);
        assert_ne!(s.extractor().checksum(), ext0);
        assert_eq!(rec.snapshots.len(), 3);
        assert!(rec.snapshots.iter().all(|sn| sn.checksum == head0));
        let rec2 = distill_global_phase(&mut s, &fx.teacher, &data, &c).unwrap();
        assert_ne!(s.head().checksum(), head0);
        assert_eq!(rec2.rows[0].epoch, 3);
        assert_eq!(fx.teacher.checksums(), teacher_before);
    }

    #[test]
    fn zero_epoch_phase_leaves_the_student_unchanged() {
        let fx = fixture();
        let data = DistillData::new(&fx.teacher, &fx.splits.train, None).unwrap();
        let mut s = StudentModel::init(StudentKind::Tiny, [3, 16, 16], 5, 0).unwrap();
        transfer_classifier(fx.teacher.head(), s.head_mut()).unwrap();
        let before = s.clone();
        let rec = distill_extractor_phase(
            &mut s,
            &fx.teacher,
            &data,
            &cfg(Strategy::Progressive, 4, 0.0),
        )
        .unwrap();
        assert!(rec.rows.is_empty());
        assert_eq!(s, before);
    }

    #[test]
    fn degenerate_splits_replay_the_single_phase_strategies() {
        let fx = fixture();
        let data = DistillData::new(&fx.teacher, &fx.splits.train, Some(&fx.splits.test)).unwrap();
        let run = |s, split| {
            run_strategy(StudentKind::Tiny, &fx.teacher, &data, &cfg(s, 4, split)).unwrap()
        };
        let (s0, r0) = run(Strategy::Progressive, 0.0);
        let (sc, rc) = run(Strategy::ProxyCopy, 0.5);
        assert_eq!(r0, rc);
        assert_eq!(s0, sc);
        let (s1, r1) = run(Strategy::Progressive, 1.0);
        let (st, rt) = run(Strategy::ProxyTransfer, 0.5);
        assert_eq!(r1, rt);
        assert_eq!(s1, st);
    }

    #[test]
    fn ce_only_fine_tuning_reduces_training_loss() {
        let fx = fixture();
        let data = DistillData::new(&fx.teacher, &fx.splits.train, None).unwrap();
        let mut c = cfg(Strategy::ProxyCopy, 6, 0.5);
        c.loss.kd_weight = 0.0;
        let (s0, _) = run_strategy(
            StudentKind::Tiny,
            &fx.teacher,
            &data,
            &DistillConfig {
                total_epochs: 1,
                lr: 1e-9,
                ..c
            },
        )
        .unwrap();
        let (s1, _) = run_strategy(StudentKind::Tiny, &fx.teacher, &data, &c).unwrap();
        let labels = fx.splits.train.labels_usize();
        let ce = |s: &StudentModel<f32>| {
            cross_entropy(&predict_logits(s, &fx.splits.train).unwrap(), &labels).unwrap()
        };
        assert!(ce(&s1) <= ce(&s0));
    }

    #[test]
    fn runs_are_reproducible() {
        let fx = fixture();
        let data = DistillData::new(&fx.teacher, &fx.splits.train, Some(&fx.splits.val)).unwrap();
        let c = cfg(Strategy::Progressive, 3, 0.5);
        let a = run_strategy(StudentKind::Tiny, &fx.teacher, &data, &c).unwrap();
        let b = run_strategy(StudentKind::Tiny, &fx.teacher, &data, &c).unwrap();
        assert_eq!(a.1, b.1);
        assert_eq!(a.0, b.0);
        assert!(a.1.is_well_formed());
    }

    #[test]
    fn scratch_training_has_no_kl_column() {
        let fx = fixture();
        let (_, rec) = train_from_scratch::<f32>(
            StudentKind::Tiny,
            &fx.splits.train,
            Some(&fx.splits.test),
            &cfg(Strategy::Normal, 2, 0.5),
        )
        .unwrap();
        assert!(rec.rows.iter().all(|r| r.kl.is_none()));
        assert_eq!(rec.rows_for(Phase::Global, Split::Test).count(), 2);
    }
}
