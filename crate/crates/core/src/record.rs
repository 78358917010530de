//! Per-epoch training metrics.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::{Error, Result};

/// Which loop produced a metric row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    /// Foundation-extractor pretraining on the broad domain.
    Pretrain,
    /// Projector and task-aligned head on target data.
    Reprogram,
    /// Student extractor only, head fixed.
    Extractor,
    /// Student extractor and head together.
    Global,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Reprogram => "reprogram",
            Phase::Extractor => "extractor",
            Phase::Global => "global",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Phase::Pretrain,
            Phase::Reprogram,
            Phase::Extractor,
            Phase::Global,
        ]
        .into_iter()
        .find(|p| p.as_str() == s)
        .ok_or_else(|| Error::Unknown {
            kind: "phase",
            name: s.into(),
        })
    }
}

/// One `(epoch, phase, split)` row. Loss columns that do not apply to a row
/// are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub phase: Phase,
    pub split: Split,
    pub ce: Option<f64>,
    pub kl: Option<f64>,
    pub mmd: Option<f64>,
    pub total_loss: Option<f64>,
    pub top1: Option<f64>,
    pub lr: f64,
}

/// Checksum of one module taken at the end of an epoch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleSnapshot {
    pub epoch: usize,
    pub phase: Phase,
    pub module: String,
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunRecord {
    pub rows: Vec<MetricRow>,
    pub snapshots: Vec<ModuleSnapshot>,
    pub config_hash: String,
    pub seed: u64,
    pub wall_clock_secs: f64,
    pub artifact_version: String,
}

impl RunRecord {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            artifact_version: crate::VERSION.into(),
            ..Default::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Appends another record's rows and snapshots.
    pub fn extend(&mut self, other: RunRecord) {
        self.rows.extend(other.rows);
        self.snapshots.extend(other.snapshots);
    }

    pub fn rows_for(&self, phase: Phase, split: Split) -> impl Iterator<Item = &MetricRow> {
        self.rows
            .iter()
            .filter(move |r| r.phase == phase && r.split == split)
    }

    /// The last row for a split, across phases.
    pub fn last(&self, split: Split) -> Option<&MetricRow> {
        self.rows.iter().rev().find(|r| r.split == split)
    }

    /// Final top-1 on the given split.
    pub fn final_top1(&self, split: Split) -> Option<f64> {
        self.last(split).and_then(|r| r.top1)
    }

    /// Epochs strictly increase within each phase and every loss is finite.
    pub fn is_well_formed(&self) -> bool {
        let finite = |v: Option<f64>| v.is_none_or(f64::is_finite);
        let mut last: Vec<(Phase, Split, usize)> = Vec::new();
        for r in &self.rows {
            if !(finite(r.ce) && finite(r.kl) && finite(r.mmd) && finite(r.total_loss)) {
                return false;
            }
            match last
                .iter_mut()
                .find(|(p, s, _)| *p == r.phase && *s == r.split)
            {
                Some((_, _, e)) => {
                    if r.epoch <= *e {
                        return false;
                    }
                    *e = r.epoch;
                }
                None => last.push((r.phase, r.split, r.epoch)),
            }
        }
        true
    }
}
