//! Command-line interface.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use proxykd_core::data::Split;
use proxykd_core::distill::Strategy;
use proxykd_core::evaluate;

use crate::checkpoint::{load_student, load_teacher, read_manifest, CheckpointKind};
use crate::config::{BaselineKind, ExperimentConfig};
use crate::dataset::save_splits;
use crate::error::{HarnessError, Result};
use crate::experiment::{
    load_or_generate, prepare, pretrain_to, run_domain_gap, run_experiment_with, run_semisup,
    teacher_for_seed, Outcome, SummaryRow,
};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "PROXYKD_OUTPUT_ROOT";
/// Output root used when neither `--out`, the config nor the environment names one.
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";

#[derive(Debug, Parser)]
#[command(
    name = "proxykd",
    version,
    about = "Reprogram a frozen extractor into a proxy space and distill it into a small student"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Request bitwise-reproducible runs (always the case in this build).
    #[arg(long, global = true)]
    pub deterministic: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DomainChoice {
    Broad,
    Target,
    Both,
}

#[derive(Debug, Args)]
pub struct Inputs {
    /// Target dataset directory (`train.pxd`, `val.pxd`, `test.pxd`).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Frozen extractor checkpoint directory.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate and save the broad and/or target datasets.
    GenData {
        #[arg(long, value_enum, default_value = "both")]
        domain: DomainChoice,
    },
    /// Pretrain the stand-in foundation extractor on the broad domain.
    PretrainTeacher,
    /// Stage one: train a projector and task-aligned head per seed.
    Reprogram {
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Stage one (unless a teacher pipeline is given) then stage two per seed.
    Distill {
        #[command(flatten)]
        inputs: Inputs,
        /// Reprogrammed teacher checkpoint; skips stage one.
        #[arg(long)]
        teacher_pipeline: Option<PathBuf>,
        /// Comma-separated strategies; overrides the config list.
        #[arg(long, value_delimiter = ',', value_parser = parse_strategy)]
        strategy: Vec<Strategy>,
    },
    /// Run one comparison method.
    Baseline {
        #[arg(value_enum)]
        kind: BaselineKind,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Labeled-only versus pseudo-labeled distillation.
    Semisup {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        labeled_fraction: Option<f64>,
    },
    /// Broad/target MMD before and after the projector, or between two
    /// feature dumps.
    DomainGap {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        teacher_pipeline: Option<PathBuf>,
        /// Headerless CSV of broad-domain features, one sample per row.
        #[arg(long, requires = "target_features")]
        broad_features: Option<PathBuf>,
        /// Headerless CSV of target-domain features, one sample per row.
        #[arg(long, requires = "broad_features")]
        target_features: Option<PathBuf>,
    },
    /// Top-1 accuracy of a teacher or student checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
    },
    /// Aggregate summary files into a table and plots.
    Tabulate {
        /// Directory searched for summary files; defaults to the output directory.
        #[arg(long)]
        results: Option<PathBuf>,
    },
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    s.parse().map_err(|e: proxykd_core::Error| e.to_string())
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    s.parse().map_err(|e: proxykd_core::Error| e.to_string())
}

/// `--out`, then the config's `output_dir`, then the environment, then
/// [`DEFAULT_OUTPUT_ROOT`].
pub fn output_dir(flag: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    cfg.deterministic |= common.deterministic;
    Ok(cfg)
}

fn apply_inputs(cfg: &mut ExperimentConfig, inputs: &Inputs) {
    if let Some(d) = &inputs.dataset {
        cfg.data.target_dir = Some(d.clone());
    }
    if let Some(t) = &inputs.teacher {
        cfg.teacher.extractor = Some(t.clone());
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

fn print_rows(rows: &[SummaryRow]) {
    let x100 = |v: Option<f64>| fmt_opt(v.map(|x| 100.0 * x));
    println!(
        "{:<6} {:<22} {:>8} {:>8} {:>10} {:>10} {:>10} {:>10}  status",
        "seed",
        "method",
        "teacher",
        "student",
        "mmd_before",
        "mmd_after",
        "before_x100",
        "after_x100"
    );
    for r in rows {
        println!(
            "{:<6} {:<22} {:>8} {:>8} {:>10} {:>10} {:>10} {:>10}  {}",
            r.seed,
            r.method,
            fmt_opt(r.teacher_top1),
            fmt_opt(r.student_top1),
            fmt_opt(r.mmd_before),
            fmt_opt(r.mmd_after),
            x100(r.mmd_before),
            x100(r.mmd_after),
            r.status
        );
    }
}

fn report(outcome: Outcome) -> i32 {
    print_rows(&outcome.rows);
    outcome.exit_code()
}

/// Executes a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    let mut cfg = load_config(&cli.common)?;
    let out = output_dir(cli.common.out.as_deref(), &cfg);
    match cli.command {
        Command::GenData { domain } => {
            if let Some(s) = cli.common.seed {
                cfg.data.broad.seed = s;
                cfg.data.target.seed = s;
            }
            cfg.validate()?;
            let which: &[(&str, &proxykd_core::synth::DomainSpec)] = match domain {
                DomainChoice::Broad => &[("broad", &cfg.data.broad)],
                DomainChoice::Target => &[("target", &cfg.data.target)],
                DomainChoice::Both => &[("broad", &cfg.data.broad), ("target", &cfg.data.target)],
            };
            for (name, spec) in which {
                let splits = load_or_generate(None, spec)?;
                let dir = out.join("data").join(name);
                save_splits(&splits, &dir)?;
                println!(
                    "{name}: {} / {} / {} samples -> {}",
                    splits.train.len(),
                    splits.val.len(),
                    splits.test.len(),
                    dir.display()
                );
            }
            Ok(0)
        }
        Command::PretrainTeacher => {
            if let Some(s) = cli.common.seed {
                cfg.pretrain.seed = s;
            }
            cfg.validate()?;
            crate::experiment::check_artifacts(&cfg)?;
            let broad = load_or_generate(cfg.data.broad_dir.as_deref(), &cfg.data.broad)?;
            pretrain_to(&cfg, &broad, &out)?;
            let m = read_manifest(&out.join(crate::experiment::EXTRACTOR_DIR))?;
            println!(
                "broad test top-1: {}",
                m.metadata
                    .get("broad_test_top1")
                    .map(|v| v.to_string())
                    .unwrap_or_default()
            );
            Ok(0)
        }
        Command::Reprogram { inputs } => {
            apply_inputs(&mut cfg, &inputs);
            cfg.validate()?;
            let prepared = prepare(&cfg, &out)?;
            let outcome = crate::experiment::over_seeds(&cfg, &out, "reprogram", |seed| {
                let dir = out.join(format!("seed_{seed}"));
                let (_, top1) = teacher_for_seed(&cfg, &prepared, seed, &dir)?;
                let mut row = SummaryRow {
                    config_hash: cfg.hash(),
                    seed,
                    method: "reprogram".into(),
                    teacher_top1: Some(top1),
                    student_top1: None,
                    mmd_before: None,
                    mmd_after: None,
                    status: "ok".into(),
                    record: format!("seed_{seed}/reprogram"),
                };
                if cfg.measure_gap {
                    let (t, _) = load_teacher(&dir.join("teacher"))?;
                    let (b, a) = crate::experiment::domain_gap(&t, &prepared)?;
                    (row.mmd_before, row.mmd_after) = (Some(b), Some(a));
                }
                Ok(vec![row])
            })?;
            Ok(report(outcome))
        }
        Command::Distill {
            inputs,
            teacher_pipeline,
            strategy,
        } => {
            apply_inputs(&mut cfg, &inputs);
            if teacher_pipeline.is_some() {
                cfg.teacher.pipeline = teacher_pipeline;
            }
            if !strategy.is_empty() {
                cfg.strategies = strategy;
            }
            cfg.validate()?;
            let prepared = prepare(&cfg, &out)?;
            Ok(report(run_experiment_with(&cfg, &prepared, &out)?))
        }
        Command::Baseline { kind, inputs } => {
            apply_inputs(&mut cfg, &inputs);
            cfg.strategies.clear();
            cfg.baselines = vec![kind];
            cfg.measure_gap = false;
            cfg.validate()?;
            let prepared = prepare(&cfg, &out)?;
            Ok(report(run_experiment_with(&cfg, &prepared, &out)?))
        }
        Command::Semisup {
            inputs,
            labeled_fraction,
        } => {
            apply_inputs(&mut cfg, &inputs);
            if let Some(f) = labeled_fraction {
                cfg.semisup.labeled_fraction = f;
            }
            cfg.validate()?;
            let prepared = prepare(&cfg, &out)?;
            Ok(report(run_semisup(&cfg, &prepared, &out)?))
        }
        Command::DomainGap {
            broad_features: Some(b),
            target_features: Some(t),
            ..
        } => {
            let value = crate::experiment::feature_gap(&b, &t)?;
            fs::create_dir_all(&out).map_err(HarnessError::io(&out))?;
            let path = out.join("domain_gap_features.csv");
            let text = format!(
                "broad,target,mmd,mmd_x100\n{},{},{value:?},{:?}\n",
                b.display(),
                t.display(),
                100.0 * value
            );
            fs::write(&path, text).map_err(HarnessError::io(&path))?;
            println!(
                "{}",
                serde_json::json!({ "broad": b, "target": t, "mmd": value, "mmd_x100": 100.0 * value })
            );
            Ok(0)
        }
        Command::DomainGap {
            inputs,
            teacher_pipeline,
            ..
        } => {
            apply_inputs(&mut cfg, &inputs);
            if teacher_pipeline.is_some() {
                cfg.teacher.pipeline = teacher_pipeline;
            }
            cfg.validate()?;
            let prepared = prepare(&cfg, &out)?;
            Ok(report(run_domain_gap(&cfg, &prepared, &out)?))
        }
        Command::Eval {
            checkpoint,
            dataset,
            split,
        } => {
            cfg.validate()?;
            let manifest = read_manifest(&checkpoint)?;
            let data = load_or_generate(
                dataset.as_deref().or(cfg.data.target_dir.as_deref()),
                &cfg.data.target,
            )?;
            let ds = data.get(split);
            let top1 = match manifest.kind {
                CheckpointKind::TeacherPipeline => evaluate(&load_teacher(&checkpoint)?.0, ds)?,
                CheckpointKind::Student => evaluate(&load_student(&checkpoint)?.0, ds)?,
                CheckpointKind::Extractor => {
                    return Err(HarnessError::config(
                        "checkpoint",
                        "an extractor checkpoint has no classifier to evaluate",
                    ))
                }
            };
            println!(
                "{}",
                serde_json::json!({ "checkpoint": checkpoint, "split": split, "top1": top1 })
            );
            Ok(0)
        }
        Command::Tabulate { results } => {
            let results = results.unwrap_or_else(|| out.clone());
            let rep = crate::tabulate::tabulate(&results, &out)?;
            for r in &rep.rows {
                let s = r
                    .student
                    .map(|s| format!("{:.4} ± {}", s.mean, fmt_opt(s.std)))
                    .unwrap_or_else(|| "-".into());
                println!("{:<22} n={:<3} student {}", r.method, r.seeds, s);
            }
            for f in &rep.files {
                println!("wrote {}", f.display());
            }
            Ok(0)
        }
    }
}
