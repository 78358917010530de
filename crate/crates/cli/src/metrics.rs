//! RunRecord files.
//!
//! `<stem>.csv` holds one row per `(epoch, phase, split)`; empty cells mean
//! the metric does not apply. `<stem>.checksums.csv` lists per-epoch module
//! checksums, and `<stem>.meta.json` carries the header metadata. Wall-clock
//! time lives only in the metadata file so that the two CSVs are identical
//! across reruns of the same config and seed.

use std::fs;
use std::path::{Path, PathBuf};

use proxykd_core::data::Split;
use proxykd_core::record::{MetricRow, ModuleSnapshot, Phase, RunRecord};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const COLUMNS: [&str; 9] = [
    "epoch",
    "phase",
    "split",
    "ce",
    "kl",
    "mmd",
    "total_loss",
    "top1",
    "lr",
];

/// Header metadata stored next to the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub config_hash: String,
    pub seed: u64,
    pub wall_clock_secs: f64,
    pub artifact_version: String,
    pub revision: String,
}

/// Revision string for provenance: `PROXYKD_REVISION` at build time, or the
/// crate version.
pub fn revision() -> String {
    option_env!("PROXYKD_REVISION")
        .map(str::to_string)
        .unwrap_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION")))
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

pub fn record_csv(record: &RunRecord) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(COLUMNS).expect("in-memory write");
    for r in &record.rows {
        w.write_record([
            r.epoch.to_string(),
            r.phase.to_string(),
            r.split.to_string(),
            cell(r.ce),
            cell(r.kl),
            cell(r.mmd),
            cell(r.total_loss),
            cell(r.top1),
            format!("{:?}", r.lr),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

pub fn snapshots_csv(record: &RunRecord) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "phase", "module", "checksum"])
        .expect("in-memory write");
    for s in &record.snapshots {
        w.write_record([
            s.epoch.to_string(),
            s.phase.to_string(),
            s.module.clone(),
            s.checksum.clone(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

/// Paths written by [`write_record`].
#[derive(Debug, Clone)]
pub struct RecordFiles {
    pub metrics: PathBuf,
    pub checksums: PathBuf,
    pub meta: PathBuf,
}

impl RecordFiles {
    pub fn for_stem(dir: &Path, stem: &str) -> Self {
        Self {
            metrics: dir.join(format!("{stem}.csv")),
            checksums: dir.join(format!("{stem}.checksums.csv")),
            meta: dir.join(format!("{stem}.meta.json")),
        }
    }
}

pub fn write_record(dir: &Path, stem: &str, record: &RunRecord) -> Result<RecordFiles> {
    fs::create_dir_all(dir).map_err(HarnessError::io(dir))?;
    let files = RecordFiles::for_stem(dir, stem);
    fs::write(&files.metrics, record_csv(record)).map_err(HarnessError::io(&files.metrics))?;
    fs::write(&files.checksums, snapshots_csv(record))
        .map_err(HarnessError::io(&files.checksums))?;
    let meta = RecordMeta {
        config_hash: record.config_hash.clone(),
        seed: record.seed,
        wall_clock_secs: record.wall_clock_secs,
        artifact_version: record.artifact_version.clone(),
        revision: revision(),
    };
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&files.meta, json).map_err(HarnessError::io(&files.meta))?;
    Ok(files)
}

fn parse_opt(s: &str, path: &Path, line: u64) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| HarnessError::Corrupt {
        path: path.to_path_buf(),
        offset: line,
        message: format!("bad number `{s}` on line {line}"),
    })
}

/// Reads the three files written by [`write_record`] back into a record.
pub fn read_record(dir: &Path, stem: &str) -> Result<RunRecord> {
    let files = RecordFiles::for_stem(dir, stem);
    for p in [&files.metrics, &files.checksums, &files.meta] {
        if !p.is_file() {
            return Err(HarnessError::MissingArtifact { path: p.clone() });
        }
    }
    let meta_text = fs::read_to_string(&files.meta).map_err(HarnessError::io(&files.meta))?;
    let meta: RecordMeta = serde_json::from_str(&meta_text).map_err(|e| HarnessError::Corrupt {
        path: files.meta.clone(),
        offset: 0,
        message: e.to_string(),
    })?;
    let mut record = RunRecord {
        config_hash: meta.config_hash,
        seed: meta.seed,
        wall_clock_secs: meta.wall_clock_secs,
        artifact_version: meta.artifact_version,
        ..Default::default()
    };
    let path = &files.metrics;
    let mut rd = csv::Reader::from_path(path).map_err(HarnessError::csv(path))?;
    for row in rd.records() {
        let row = row.map_err(HarnessError::csv(path))?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let bad = |what: &str| HarnessError::Corrupt {
            path: path.clone(),
            offset: row.position().map(|p| p.byte()).unwrap_or(0),
            message: format!("bad {what} on line {line}"),
        };
        let get = |i: usize| row.get(i).unwrap_or("");
        record.rows.push(MetricRow {
            epoch: get(0).parse().map_err(|_| bad("epoch"))?,
            phase: get(1).parse::<Phase>().map_err(|_| bad("phase"))?,
            split: get(2).parse::<Split>().map_err(|_| bad("split"))?,
            ce: parse_opt(get(3), path, line)?,
            kl: parse_opt(get(4), path, line)?,
            mmd: parse_opt(get(5), path, line)?,
            total_loss: parse_opt(get(6), path, line)?,
            top1: parse_opt(get(7), path, line)?,
            lr: parse_opt(get(8), path, line)?.ok_or_else(|| bad("lr"))?,
        });
    }
    let path = &files.checksums;
    let mut rd = csv::Reader::from_path(path).map_err(HarnessError::csv(path))?;
    for row in rd.records() {
        let row = row.map_err(HarnessError::csv(path))?;
        let bad = || HarnessError::Corrupt {
            path: path.clone(),
            offset: row.position().map(|p| p.byte()).unwrap_or(0),
            message: "bad checksum row".into(),
        };
        record.snapshots.push(ModuleSnapshot {
            epoch: row.get(0).and_then(|s| s.parse().ok()).ok_or_else(bad)?,
            phase: row.get(1).and_then(|s| s.parse().ok()).ok_or_else(bad)?,
            module: row.get(2).ok_or_else(bad)?.to_string(),
            checksum: row.get(3).ok_or_else(bad)?.to_string(),
        });
    }
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RunRecord {
        let mut r = RunRecord::new(7);
        r.config_hash = "abc".into();
        r.wall_clock_secs = 1.25;
        r.rows.push(MetricRow {
            epoch: 0,
            phase: Phase::Extractor,
            split: Split::Train,
            ce: Some(1.0 / 3.0),
            kl: Some(0.1),
            mmd: None,
            total_loss: Some(0.1 + 1.0 / 3.0),
            top1: Some(0.5),
            lr: 0.05,
        });
        r.rows.push(MetricRow {
            split: Split::Test,
            ce: None,
            kl: None,
            total_loss: None,
            top1: Some(0.25),
            ..r.rows[0]
        });
        r.snapshots.push(ModuleSnapshot {
            epoch: 0,
            phase: Phase::Extractor,
            module: "student.head".into(),
            checksum: "ff".into(),
        });
        r
    }

    #[test]
    fn csv_has_one_row_per_metric_row_and_blank_cells_for_missing_values() {
        let text = record_csv(&sample());
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], COLUMNS.join(","));
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[2], "0,extractor,test,,,,,0.25,0.05");
    }

    #[test]
    fn files_round_trip_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let r = sample();
        write_record(dir.path(), "run", &r).unwrap();
        assert_eq!(read_record(dir.path(), "run").unwrap(), r);
        assert!(matches!(
            read_record(dir.path(), "other"),
            Err(HarnessError::MissingArtifact { .. })
        ));
    }
}
