//! Experiment orchestration: input resolution, per-seed runs and summary rows.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use proxykd_core::baselines::{linear_probe_baseline, mrkd_baseline, train_from_scratch};
use proxykd_core::data::{DomainSplits, LabeledDataset, Split};
use proxykd_core::distill::{run_strategy, DistillConfig, DistillData, Strategy};
use proxykd_core::domain_gap::{measure_gap, mmd, Estimator, KernelSpec};
use proxykd_core::models::{ParamModule, StudentModel, TeacherPipeline};
use proxykd_core::objectives::LossConfig;
use proxykd_core::pretrain::pretrain_teacher_extractor;
use proxykd_core::record::RunRecord;
use proxykd_core::reprogram::{build_proxy_space, train_proxy, ReprogramConfig};
use proxykd_core::semisup::{partition_labels, train_semisup, SemiSupConfig};
use proxykd_core::synth::generate_domain;
use proxykd_core::{evaluate, rng, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{
    load_extractor, load_teacher, read_manifest, save_extractor, save_student, save_teacher,
};
use crate::config::{BaselineKind, ExperimentConfig};
use crate::dataset::load_splits;
use crate::error::{HarnessError, Result};
use crate::metrics::write_record;

pub const SUMMARY_FILE: &str = "summary.csv";
pub const EXTRACTOR_DIR: &str = "teacher_extractor";

/// One line of a results table: a method evaluated at one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub config_hash: String,
    pub seed: u64,
    pub method: String,
    /// Held-out top-1 of the teacher the method distilled from.
    pub teacher_top1: Option<f64>,
    pub student_top1: Option<f64>,
    pub mmd_before: Option<f64>,
    pub mmd_after: Option<f64>,
    /// `ok`, or `failed: <reason>`.
    pub status: String,
    /// Record stem relative to the output directory.
    pub record: String,
}

impl SummaryRow {
    fn new(cfg_hash: &str, seed: u64, method: &str, record: String) -> Self {
        Self {
            config_hash: cfg_hash.into(),
            seed,
            method: method.into(),
            teacher_top1: None,
            student_top1: None,
            mmd_before: None,
            mmd_after: None,
            status: "ok".into(),
            record,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Datasets and the frozen extractor shared by all seeds.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub broad: DomainSplits,
    pub target: DomainSplits,
    pub extractor: ParamModule<f32>,
    /// Broad training images made available to the MMD term.
    pub broad_subset: LabeledDataset,
}

/// Result of a multi-seed run. Seeds that failed are listed in `failures`
/// and still get a summary row with a `failed` status.
#[derive(Debug)]
pub struct Outcome {
    pub rows: Vec<SummaryRow>,
    pub failures: Vec<(u64, HarnessError)>,
}

impl Outcome {
    /// Process exit code: the first failure's, or 0.
    pub fn exit_code(&self) -> i32 {
        self.failures.first().map_or(0, |(_, e)| e.exit_code())
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(HarnessError::MissingArtifact {
            path: path.to_path_buf(),
        })
    }
}

/// Checks that every referenced artifact exists before any compute starts.
pub fn check_artifacts(cfg: &ExperimentConfig) -> Result<()> {
    let paths = [
        &cfg.data.broad_dir,
        &cfg.data.target_dir,
        &cfg.teacher.extractor,
        &cfg.teacher.pipeline,
    ];
    for p in paths.into_iter().flatten() {
        require(p)?;
    }
    if let Some(p) = &cfg.teacher.extractor {
        require(&p.join(crate::checkpoint::MANIFEST))?;
    }
    if let Some(p) = &cfg.teacher.pipeline {
        require(&p.join(crate::checkpoint::MANIFEST))?;
    }
    Ok(())
}

pub fn load_or_generate(
    dir: Option<&Path>,
    spec: &proxykd_core::synth::DomainSpec,
) -> Result<DomainSplits> {
    match dir {
        Some(d) => load_splits(d),
        None => Ok(generate_domain(spec)?),
    }
}

fn pretrain_key(cfg: &ExperimentConfig) -> String {
    let v = serde_json::json!({
        "broad": cfg.data.broad,
        "broad_dir": cfg.data.broad_dir,
        "pretrain": cfg.pretrain,
    });
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}

/// Pretrains the broad-domain extractor and writes its checkpoint and record
/// under `out`. Returns the frozen extractor.
pub fn pretrain_to(
    cfg: &ExperimentConfig,
    broad: &DomainSplits,
    out: &Path,
) -> Result<ParamModule<f32>> {
    let dir = out.join(EXTRACTOR_DIR);
    let start = Instant::now();
    let pre = pretrain_teacher_extractor::<f32>(broad, &cfg.pretrain)?;
    let mut record = pre.record;
    record.config_hash = cfg.hash();
    record.wall_clock_secs = start.elapsed().as_secs_f64();
    write_record(out, "pretrain", &record)?;
    let mut meta = BTreeMap::new();
    meta.insert("broad_test_top1".into(), pre.broad_test_top1.into());
    meta.insert("pretrain_key".into(), pretrain_key(cfg).into());
    meta.insert("seed".into(), cfg.pretrain.seed.into());
    save_extractor(&dir, &pre.extractor, meta)?;
    log::info!(
        "pretrained extractor: broad test top-1 {:.4}",
        pre.broad_test_top1
    );
    Ok(pre.extractor)
}

/// Loads the configured extractor, reuses one pretrained earlier into `out`
/// with identical settings, or pretrains a new one.
pub fn resolve_extractor(
    cfg: &ExperimentConfig,
    broad: &DomainSplits,
    out: &Path,
) -> Result<ParamModule<f32>> {
    if let Some(p) = &cfg.teacher.extractor {
        return Ok(load_extractor(p)?.0);
    }
    let dir = out.join(EXTRACTOR_DIR);
    if let Ok(m) = read_manifest(&dir) {
        if m.metadata.get("pretrain_key").and_then(|v| v.as_str())
            == Some(pretrain_key(cfg).as_str())
        {
            log::info!("reusing extractor in {}", dir.display());
            return Ok(load_extractor(&dir)?.0);
        }
    }
    pretrain_to(cfg, broad, out)
}

/// Resolves datasets and the extractor, failing fast on missing inputs.
pub fn prepare(cfg: &ExperimentConfig, out: &Path) -> Result<Inputs> {
    check_artifacts(cfg)?;
    let broad = load_or_generate(cfg.data.broad_dir.as_deref(), &cfg.data.broad)?;
    let target = load_or_generate(cfg.data.target_dir.as_deref(), &cfg.data.target)?;
    let extractor = if cfg.teacher.pipeline.is_some() && cfg.teacher.extractor.is_none() {
        load_teacher(cfg.teacher.pipeline.as_deref().expect("checked"))?
            .0
            .extractor()
            .clone()
    } else {
        resolve_extractor(cfg, &broad, out)?
    };
    let broad_subset = match cfg.data.broad_subset {
        Some(n) if n < broad.train.len() => {
            let mut idx: Vec<usize> = (0..broad.train.len()).collect();
            rng::shuffle(
                &mut rng::stream(cfg.pretrain.seed, "broad.subset", 0),
                &mut idx,
            );
            idx.truncate(n);
            idx.sort_unstable();
            broad.train.subset(&idx)
        }
        _ => broad.train.clone(),
    };
    Ok(Inputs {
        broad,
        target,
        extractor,
        broad_subset,
    })
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

fn rel(out: &Path, dir: &Path, stem: &str) -> String {
    dir.strip_prefix(out)
        .unwrap_or(dir)
        .join(stem)
        .to_string_lossy()
        .replace('\\', "/")
}

fn finish(mut record: RunRecord, hash: &str, start: Instant) -> RunRecord {
    record.config_hash = hash.into();
    record.wall_clock_secs = start.elapsed().as_secs_f64();
    record
}

/// Stage one for one seed: fresh proxy space trained on `train`. The MMD term
/// uses `broad` when the loss weight is positive.
pub fn reprogram_seed(
    cfg: &ExperimentConfig,
    inputs: &Inputs,
    train: &LabeledDataset,
    rcfg: &ReprogramConfig,
) -> Result<(TeacherPipeline<f32>, RunRecord)> {
    let start = Instant::now();
    let pipeline = build_proxy_space(
        inputs.extractor.clone(),
        rcfg.projector,
        inputs.target.train.num_classes(),
        cfg.student.feature_dim(),
        rcfg.seed,
    )?;
    let broad = (rcfg.loss.mmd_weight > 0.0).then_some(&inputs.broad_subset);
    let (t, record) = train_proxy(pipeline, train, Some(&inputs.target.test), broad, rcfg)?;
    Ok((t, finish(record, &cfg.hash(), start)))
}

/// MMD between broad and target test features, before and after the projector.
pub fn domain_gap(teacher: &TeacherPipeline<f32>, inputs: &Inputs) -> Result<(f64, f64)> {
    let (before, after) = measure_gap(
        teacher.extractor(),
        Some(teacher.projector()),
        &inputs.broad.test,
        &inputs.target.test,
        &KernelSpec::default(),
        Estimator::Unbiased,
    )?;
    Ok((before.value, after.expect("projector given").value))
}

/// Unbiased MMD (default kernel) between two headerless CSV feature dumps.
pub fn feature_gap(broad: &Path, target: &Path) -> Result<f64> {
    let x = read_features(broad)?;
    let y = read_features(target)?;
    Ok(mmd(&x, &y, &KernelSpec::default(), Estimator::Unbiased)?.value)
}

fn read_features(path: &Path) -> Result<Tensor<f64>> {
    if !path.is_file() {
        return Err(HarnessError::MissingArtifact {
            path: path.to_path_buf(),
        });
    }
    let mut rd = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(HarnessError::csv(path))?;
    let mut rows = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec.map_err(HarnessError::csv(path))?;
        let row = rec
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| {
                HarnessError::config(path.display().to_string(), format!("row {}: {e}", i + 1))
            })?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(HarnessError::config(
            path.display().to_string(),
            "no feature rows",
        ));
    }
    if rows.iter().any(|r| r.len() != rows[0].len()) {
        return Err(HarnessError::config(
            path.display().to_string(),
            "rows differ in length",
        ));
    }
    Ok(Tensor::from_rows(&rows)?)
}

fn teacher_meta(
    cfg: &ExperimentConfig,
    seed: u64,
    top1: f64,
) -> BTreeMap<String, serde_json::Value> {
    let mut meta = BTreeMap::new();
    meta.insert("config_hash".into(), cfg.hash().into());
    meta.insert("seed".into(), seed.into());
    meta.insert("teacher_top1".into(), top1.into());
    meta
}

/// Loads the configured teacher pipeline or reprograms one for `seed`,
/// writing its record and checkpoint under `dir`.
pub fn teacher_for_seed(
    cfg: &ExperimentConfig,
    inputs: &Inputs,
    seed: u64,
    dir: &Path,
) -> Result<(TeacherPipeline<f32>, f64)> {
    if let Some(p) = &cfg.teacher.pipeline {
        let (t, _) = load_teacher(p)?;
        let top1 = evaluate(&t, &inputs.target.test)?;
        return Ok((t, top1));
    }
    let rcfg = ReprogramConfig {
        seed,
        ..cfg.reprogram
    };
    let (t, record) = reprogram_seed(cfg, inputs, &inputs.target.train, &rcfg)?;
    write_record(dir, "reprogram", &record)?;
    let top1 = record.final_top1(Split::Test).unwrap_or(f64::NAN);
    save_teacher(&dir.join("teacher"), &t, teacher_meta(cfg, seed, top1))?;
    Ok((t, top1))
}

fn run_seed(
    cfg: &ExperimentConfig,
    inputs: &Inputs,
    seed: u64,
    out: &Path,
) -> Result<Vec<SummaryRow>> {
    let hash = cfg.hash();
    let dir = seed_dir(out, seed);
    fs::create_dir_all(&dir).map_err(HarnessError::io(&dir))?;
    let (train, test) = (&inputs.target.train, &inputs.target.test);
    let needs_teacher = !cfg.strategies.is_empty()
        || cfg.baselines.contains(&BaselineKind::VanillaKd)
        || cfg.measure_gap;
    let teacher = if needs_teacher {
        Some(teacher_for_seed(cfg, inputs, seed, &dir)?)
    } else {
        None
    };
    let gap = match (&teacher, cfg.measure_gap) {
        (Some((t, _)), true) => Some(domain_gap(t, inputs)?),
        _ => None,
    };
    let dcfg = DistillConfig {
        seed,
        ..cfg.distill
    };
    let mut rows = Vec::new();
    let mut push = |method: &str,
                    teacher_top1: Option<f64>,
                    student: &StudentModel<f32>,
                    record: RunRecord,
                    gap: Option<(f64, f64)>|
     -> Result<()> {
        let stem = method.replace('-', "_");
        write_record(&dir, &stem, &record)?;
        let mut meta = BTreeMap::new();
        meta.insert("config_hash".into(), hash.clone().into());
        meta.insert("seed".into(), seed.into());
        meta.insert("method".into(), method.into());
        save_student(&dir.join(format!("{stem}_student")), student, meta)?;
        let mut row = SummaryRow::new(&hash, seed, method, rel(out, &dir, &stem));
        row.teacher_top1 = teacher_top1;
        row.student_top1 = record.final_top1(Split::Test);
        if let Some((b, a)) = gap {
            row.mmd_before = Some(b);
            row.mmd_after = Some(a);
        }
        rows.push(row);
        Ok(())
    };

    if let Some((t, top1)) = &teacher {
        let data = DistillData::new(t, train, Some(test))?;
        for &s in &cfg.strategies {
            let start = Instant::now();
            let (student, record) = run_strategy(
                cfg.student,
                t,
                &data,
                &DistillConfig {
                    strategy: s,
                    ..dcfg
                },
            )?;
            push(
                s.as_str(),
                Some(*top1),
                &student,
                finish(record, &hash, start),
                gap,
            )?;
        }
        if cfg.baselines.contains(&BaselineKind::VanillaKd) {
            let start = Instant::now();
            let (student, record) = run_strategy(
                cfg.student,
                t,
                &data,
                &DistillConfig {
                    strategy: Strategy::Normal,
                    ..dcfg
                },
            )?;
            push(
                BaselineKind::VanillaKd.as_str(),
                Some(*top1),
                &student,
                finish(record, &hash, start),
                None,
            )?;
        }
    }
    let rcfg = ReprogramConfig {
        seed,
        ..cfg.reprogram
    };
    for &b in &cfg.baselines {
        let start = Instant::now();
        match b {
            BaselineKind::Scratch => {
                let (student, record) =
                    train_from_scratch::<f32>(cfg.student, train, Some(test), &dcfg)?;
                push(
                    b.as_str(),
                    None,
                    &student,
                    finish(record, &hash, start),
                    None,
                )?;
            }
            BaselineKind::Lin | BaselineKind::Mrkd => {
                let run = if b == BaselineKind::Lin {
                    linear_probe_baseline::<f32>
                } else {
                    mrkd_baseline::<f32>
                };
                let outcome = run(
                    inputs.extractor.clone(),
                    cfg.student,
                    train,
                    Some(test),
                    &rcfg,
                    &dcfg,
                )?;
                let teacher_record = finish(outcome.teacher_record, &hash, start);
                write_record(&dir, &format!("{}_teacher", b.as_str()), &teacher_record)?;
                let record = finish(outcome.student_record, &hash, start);
                push(
                    b.as_str(),
                    teacher_record.final_top1(Split::Test),
                    &outcome.student,
                    record,
                    None,
                )?;
            }
            BaselineKind::VanillaKd => {}
        }
    }
    Ok(rows)
}

fn failed_row(cfg: &ExperimentConfig, seed: u64, method: &str, err: &HarnessError) -> SummaryRow {
    SummaryRow {
        status: format!("failed: {err}"),
        ..SummaryRow::new(&cfg.hash(), seed, method, String::new())
    }
}

/// Runs `per_seed` for every configured seed, collecting rows and failures,
/// then writes the summary and aggregate tables.
pub(crate) fn over_seeds(
    cfg: &ExperimentConfig,
    out: &Path,
    label: &str,
    mut per_seed: impl FnMut(u64) -> Result<Vec<SummaryRow>>,
) -> Result<Outcome> {
    fs::create_dir_all(out).map_err(HarnessError::io(out))?;
    let resolved = out.join("config.resolved.toml");
    fs::write(&resolved, cfg.to_toml()).map_err(HarnessError::io(&resolved))?;
    let mut outcome = Outcome {
        rows: Vec::new(),
        failures: Vec::new(),
    };
    for &seed in &cfg.seeds {
        match per_seed(seed) {
            Ok(rows) => outcome.rows.extend(rows),
            Err(e) => {
                log::error!("seed {seed} failed: {e}");
                outcome.rows.push(failed_row(cfg, seed, label, &e));
                outcome.failures.push((seed, e));
            }
        }
    }
    write_summary(&out.join(SUMMARY_FILE), &outcome.rows)?;
    if outcome.rows.iter().any(SummaryRow::is_ok) {
        crate::tabulate::tabulate(out, out)?;
    }
    Ok(outcome)
}

/// Stage one then stage two for every seed, plus configured baselines.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let inputs = prepare(cfg, out)?;
    run_experiment_with(cfg, &inputs, out)
}

/// [`run_experiment`] with inputs that were already resolved.
pub fn run_experiment_with(cfg: &ExperimentConfig, inputs: &Inputs, out: &Path) -> Result<Outcome> {
    over_seeds(cfg, out, "experiment", |seed| {
        run_seed(cfg, inputs, seed, out)
    })
}

/// Labeled-only versus pseudo-labeled distillation at
/// `cfg.semisup.labeled_fraction`, with a teacher reprogrammed on the
/// labeled part only.
pub fn run_semisup(cfg: &ExperimentConfig, inputs: &Inputs, out: &Path) -> Result<Outcome> {
    let hash = cfg.hash();
    over_seeds(cfg, out, "semisup", |seed| {
        let dir = seed_dir(out, seed);
        let train = &inputs.target.train;
        let part = partition_labels(train, cfg.semisup.labeled_fraction, seed)?;
        let labeled = train.subset(&part.labeled);
        let rcfg = ReprogramConfig {
            seed,
            ..cfg.reprogram
        };
        let (teacher, record) = reprogram_seed(cfg, inputs, &labeled, &rcfg)?;
        write_record(&dir, "semisup_reprogram", &record)?;
        let top1 = record.final_top1(Split::Test);
        let dcfg = DistillConfig {
            seed,
            ..cfg.distill
        };
        let mut rows = Vec::new();
        for (method, use_unlabeled) in [("semisup-labeled-only", false), ("semisup-pseudo", true)] {
            let start = Instant::now();
            let semi = SemiSupConfig {
                use_unlabeled,
                ..cfg.semisup
            };
            let (_, record, _) = train_semisup(
                cfg.student,
                &teacher,
                train,
                Some(&inputs.target.test),
                &semi,
                &dcfg,
            )?;
            let stem = method.replace('-', "_");
            let record = finish(record, &hash, start);
            write_record(&dir, &stem, &record)?;
            let mut row = SummaryRow::new(&hash, seed, method, rel(out, &dir, &stem));
            row.teacher_top1 = top1;
            row.student_top1 = record.final_top1(Split::Test);
            rows.push(row);
        }
        Ok(rows)
    })
}

/// Domain gap before and after reprogramming, with and without the MMD term.
/// With a configured teacher pipeline, only that pipeline is measured.
pub fn run_domain_gap(cfg: &ExperimentConfig, inputs: &Inputs, out: &Path) -> Result<Outcome> {
    let hash = cfg.hash();
    over_seeds(cfg, out, "domain-gap", |seed| {
        let dir = seed_dir(out, seed);
        let mut rows = Vec::new();
        if let Some(p) = &cfg.teacher.pipeline {
            let (t, _) = load_teacher(p)?;
            let (b, a) = domain_gap(&t, inputs)?;
            let mut row = SummaryRow::new(&hash, seed, "pipeline", String::new());
            row.teacher_top1 = Some(evaluate(&t, &inputs.target.test)?);
            (row.mmd_before, row.mmd_after) = (Some(b), Some(a));
            return Ok(vec![row]);
        }
        let weight = if cfg.reprogram.loss.mmd_weight > 0.0 {
            cfg.reprogram.loss.mmd_weight
        } else {
            1.0
        };
        for (method, mmd_weight) in [("reprogram-ce", 0.0), ("reprogram-mmd", weight)] {
            let rcfg = ReprogramConfig {
                seed,
                loss: LossConfig {
                    mmd_weight,
                    ..cfg.reprogram.loss
                },
                ..cfg.reprogram
            };
            let (t, record) = reprogram_seed(cfg, inputs, &inputs.target.train, &rcfg)?;
            let stem = method.replace('-', "_");
            write_record(&dir, &stem, &record)?;
            let (b, a) = domain_gap(&t, inputs)?;
            let mut row = SummaryRow::new(&hash, seed, method, rel(out, &dir, &stem));
            row.teacher_top1 = record.final_top1(Split::Test);
            (row.mmd_before, row.mmd_after) = (Some(b), Some(a));
            rows.push(row);
        }
        Ok(rows)
    })
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(HarnessError::csv(path))?;
    for r in rows {
        w.serialize(r).map_err(HarnessError::csv(path))?;
    }
    w.flush().map_err(HarnessError::io(path))
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    if !path.is_file() {
        return Err(HarnessError::MissingArtifact {
            path: path.to_path_buf(),
        });
    }
    let mut rd = csv::Reader::from_path(path).map_err(HarnessError::csv(path))?;
    rd.deserialize()
        .map(|r| r.map_err(HarnessError::csv(path)))
        .collect()
}
