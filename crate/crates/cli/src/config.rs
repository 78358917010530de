//! Experiment configuration files (TOML).
//!
//! Every table rejects unknown keys, and schema errors name the offending key
//! path. The config hash is a SHA-256 over canonical JSON (sorted keys, no
//! whitespace, output directory excluded), so formatting and key order do not
//! change it.

use std::fs;
use std::path::{Path, PathBuf};

use proxykd_core::distill::{DistillConfig, Strategy};
use proxykd_core::models::StudentKind;
use proxykd_core::pretrain::PretrainConfig;
use proxykd_core::reprogram::ReprogramConfig;
use proxykd_core::semisup::SemiSupConfig;
use proxykd_core::synth::DomainSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Comparison methods that are not part of the two-stage pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    /// Student trained on labels only.
    Scratch,
    /// Linear probe on the frozen extractor, then vanilla distillation.
    Lin,
    /// Bottleneck adapter after the extractor, then vanilla distillation.
    Mrkd,
    /// Vanilla distillation from the reprogrammed teacher (random student head).
    VanillaKd,
}

impl BaselineKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BaselineKind::Scratch => "scratch",
            BaselineKind::Lin => "lin",
            BaselineKind::Mrkd => "mrkd",
            BaselineKind::VanillaKd => "vanilla-kd",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Generator settings for the broad domain, used when `broad_dir` is unset.
    pub broad: DomainSpec,
    /// Generator settings for the target domain, used when `target_dir` is unset.
    pub target: DomainSpec,
    /// Directory holding `train.pxd`, `val.pxd` and `test.pxd` for the broad domain.
    pub broad_dir: Option<PathBuf>,
    pub target_dir: Option<PathBuf>,
    /// Number of broad training images available to the MMD term; all of
    /// them when unset.
    pub broad_subset: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            broad: DomainSpec::default_broad(0),
            target: DomainSpec::default_target(0),
            broad_dir: None,
            target_dir: None,
            broad_subset: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    /// Frozen extractor checkpoint. Pretrained on the broad domain when unset.
    pub extractor: Option<PathBuf>,
    /// Reprogrammed teacher checkpoint. Stage one is skipped when set.
    pub pipeline: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Accepted for interface compatibility; every run is deterministic.
    #[serde(default = "default_true")]
    pub deterministic: bool,
    #[serde(default = "default_student")]
    pub student: StudentKind,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<Strategy>,
    #[serde(default)]
    pub baselines: Vec<BaselineKind>,
    /// Measure the broad/target MMD before and after the projector.
    #[serde(default)]
    pub measure_gap: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub teacher: TeacherConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub reprogram: ReprogramConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub semisup: SemiSupConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_true() -> bool {
    true
}

fn default_student() -> StudentKind {
    StudentKind::Small
}

fn default_strategies() -> Vec<Strategy> {
    vec![Strategy::Progressive]
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seeds: default_seeds(),
            deterministic: true,
            student: default_student(),
            strategies: default_strategies(),
            baselines: Vec::new(),
            measure_gap: false,
            output_dir: None,
            data: DataConfig::default(),
            teacher: TeacherConfig::default(),
            pretrain: PretrainConfig::default(),
            reprogram: ReprogramConfig::default(),
            distill: DistillConfig::default(),
            semisup: SemiSupConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates TOML text.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text)
            .map_err(|e| HarnessError::config("<document>", e.message()))?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            HarnessError::config(
                if key == "." { "<root>".into() } else { key },
                e.into_inner().message(),
            )
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(HarnessError::MissingArtifact {
                path: path.to_path_buf(),
            });
        }
        let text = fs::read_to_string(path).map_err(HarnessError::io(path))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Semantic checks that the schema cannot express.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(HarnessError::config(
                "schema_version",
                format!(
                    "found {}, this build reads {}",
                    self.schema_version, SCHEMA_VERSION
                ),
            ));
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::config(
                "seeds",
                "at least one seed is required",
            ));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(HarnessError::config("seeds", "seeds must be distinct"));
        }
        let section =
            |key: &'static str| move |e: proxykd_core::Error| HarnessError::config(key, e);
        self.data.broad.validate().map_err(section("data.broad"))?;
        self.data
            .target
            .validate()
            .map_err(section("data.target"))?;
        if self.data.broad.label_space_id == self.data.target.label_space_id {
            return Err(HarnessError::config(
                "data.target.label_space_id",
                "broad and target label spaces must differ",
            ));
        }
        if self.data.broad_subset == Some(0) {
            return Err(HarnessError::config(
                "data.broad_subset",
                "must be positive when set",
            ));
        }
        self.pretrain.validate().map_err(section("pretrain"))?;
        self.reprogram.validate().map_err(section("reprogram"))?;
        self.distill.validate().map_err(section("distill"))?;
        self.semisup.validate().map_err(section("semisup"))?;
        Ok(())
    }

    /// Canonical JSON: sorted keys, no whitespace, output directory removed.
    pub fn canonical_json(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("output_dir");
        }
        value.to_string()
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_only_needs_a_schema_version() {
        let cfg = ExperimentConfig::from_toml("schema_version = 1").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert!(
            matches!(ExperimentConfig::from_toml(""), Err(HarnessError::Config { key, .. }) if key.contains("root") || key.contains("schema"))
        );
    }

    #[test]
    fn unknown_keys_are_reported_with_their_path() {
        let err = ExperimentConfig::from_toml("schema_version = 1\n[distill]\nphase_splt = 0.3\n")
            .unwrap_err();
        match err {
            HarnessError::Config { key, message } => {
                assert_eq!(key, "distill.phase_splt");
                assert!(message.contains("phase_splt"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        let err = ExperimentConfig::from_toml(
            "schema_version = 1\n[reprogram.loss]\ntemperature = \"hot\"\n",
        )
        .unwrap_err();
        assert!(
            matches!(err, HarnessError::Config { ref key, .. } if key == "reprogram.loss.temperature"),
            "{err}"
        );
    }

    #[test]
    fn semantic_errors_name_the_section() {
        let err = ExperimentConfig::from_toml("schema_version = 1\n[distill]\nphase_split = 1.5\n")
            .unwrap_err();
        assert!(matches!(err, HarnessError::Config { ref key, .. } if key == "distill"));
        assert_eq!(err.exit_code(), 2);
        let err = ExperimentConfig::from_toml("schema_version = 2").unwrap_err();
        assert!(matches!(err, HarnessError::Config { ref key, .. } if key == "schema_version"));
        assert!(ExperimentConfig::from_toml("schema_version = 1\nseeds = [1, 1]").is_err());
    }

    #[test]
    fn hash_ignores_formatting_key_order_and_output_dir() {
        let a = "schema_version = 1\nseeds = [1, 2]\n[distill]\nlr = 0.02\ntotal_epochs = 10\n";
        let b = "[distill]\ntotal_epochs   = 10\nlr = 0.02\n\n[reprogram]\n";
        let b = format!("seeds = [1,2]\nschema_version = 1\noutput_dir = \"elsewhere\"\n{b}");
        let ca = ExperimentConfig::from_toml(a).unwrap();
        let cb = ExperimentConfig::from_toml(&b).unwrap();
        assert_eq!(ca.hash(), cb.hash());
        let cc = ExperimentConfig::from_toml(&a.replace("0.02", "0.03")).unwrap();
        assert_ne!(ca.hash(), cc.hash());
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = ExperimentConfig {
            seeds: vec![3, 4],
            baselines: vec![BaselineKind::Lin],
            ..Default::default()
        };
        cfg.teacher.extractor = Some("ckpt/teacher".into());
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }
}
