//! Checkpoint directories: `manifest.json` plus one little-endian `f32` blob
//! per module, parameters concatenated in module order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use proxykd_core::models::{
    compose_teacher, ArchSpec, ClassifierHead, ParamModule, StudentModel, TeacherPipeline,
};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointKind {
    Extractor,
    TeacherPipeline,
    Student,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleEntry {
    pub role: String,
    pub name: String,
    pub arch: ArchSpec,
    pub frozen: bool,
    pub checksum: String,
    pub file: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub artifact_version: String,
    pub modules: Vec<ModuleEntry>,
    /// Free-form provenance, e.g. broad-domain accuracy or the config hash.
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl Manifest {
    pub fn module(&self, role: &str) -> Option<&ModuleEntry> {
        self.modules.iter().find(|m| m.role == role)
    }
}

fn write_modules(
    dir: &Path,
    kind: CheckpointKind,
    modules: &[(&str, &ParamModule<f32>)],
    metadata: BTreeMap<String, serde_json::Value>,
) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(HarnessError::io(dir))?;
    let mut entries = Vec::new();
    for (role, m) in modules {
        let file = format!("{role}.bin");
        let mut bytes = Vec::with_capacity(4 * m.num_params());
        for p in m.params() {
            for v in &p.value {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(HarnessError::io(&path))?;
        entries.push(ModuleEntry {
            role: role.to_string(),
            name: m.name().into(),
            arch: m.arch().clone(),
            frozen: m.is_frozen(),
            checksum: m.checksum(),
            file,
            tensors: m
                .params()
                .iter()
                .map(|p| TensorEntry {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                })
                .collect(),
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind,
        artifact_version: proxykd_core::VERSION.into(),
        modules: entries,
        metadata,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(HarnessError::io(&path))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    if !path.is_file() {
        return Err(HarnessError::MissingArtifact { path });
    }
    let text = fs::read_to_string(&path).map_err(HarnessError::io(&path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| HarnessError::Corrupt {
        path: path.clone(),
        offset: byte_offset(&text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(HarnessError::VersionMismatch {
            path,
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    Ok(manifest)
}

fn byte_offset(text: &str, line: usize, column: usize) -> u64 {
    let before: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    (before + column.saturating_sub(1)) as u64
}

/// Rebuilds a module from its manifest entry and blob, then checks that the
/// recomputed checksum matches the recorded one.
fn read_module(dir: &Path, entry: &ModuleEntry) -> Result<ParamModule<f32>> {
    let path = dir.join(&entry.file);
    if !path.is_file() {
        return Err(HarnessError::MissingArtifact { path });
    }
    let corrupt = |offset: usize, message: String| HarnessError::Corrupt {
        path: path.clone(),
        offset: offset as u64,
        message,
    };
    let mut module: ParamModule<f32> = entry.arch.build(&entry.name, 0)?;
    let layout: Vec<TensorEntry> = module
        .params()
        .iter()
        .map(|p| TensorEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
        })
        .collect();
    if layout != entry.tensors {
        return Err(corrupt(
            0,
            format!(
                "tensor layout of `{}` does not match its architecture",
                entry.role
            ),
        ));
    }
    let bytes = fs::read(&path).map_err(HarnessError::io(&path))?;
    let mut values = Vec::with_capacity(layout.len());
    let mut off = 0;
    for t in &layout {
        let n: usize = t.shape.iter().product();
        let Some(chunk) = bytes.get(off..off + 4 * n) else {
            return Err(corrupt(
                bytes.len(),
                format!("blob ends inside tensor `{}`", t.name),
            ));
        };
        values.push(
            chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect(),
        );
        off += 4 * n;
    }
    if off != bytes.len() {
        return Err(corrupt(
            off,
            format!("{} trailing bytes", bytes.len() - off),
        ));
    }
    module.load_values(values)?;
    if entry.frozen {
        module.freeze();
    }
    if module.checksum() != entry.checksum {
        return Err(corrupt(
            0,
            format!("checksum of `{}` does not match the manifest", entry.role),
        ));
    }
    Ok(module)
}

fn read_kind(dir: &Path, kind: CheckpointKind) -> Result<Manifest> {
    let manifest = read_manifest(dir)?;
    if manifest.kind != kind {
        return Err(HarnessError::config(
            "checkpoint",
            format!(
                "{} holds a {:?} checkpoint, expected {:?}",
                dir.display(),
                manifest.kind,
                kind
            ),
        ));
    }
    Ok(manifest)
}

fn module_for(dir: &Path, manifest: &Manifest, role: &str) -> Result<ParamModule<f32>> {
    let entry = manifest.module(role).ok_or_else(|| HarnessError::Corrupt {
        path: dir.join(MANIFEST),
        offset: 0,
        message: format!("no `{role}` module listed"),
    })?;
    read_module(dir, entry)
}

pub fn save_extractor(
    dir: &Path,
    m: &ParamModule<f32>,
    metadata: BTreeMap<String, serde_json::Value>,
) -> Result<Manifest> {
    write_modules(
        dir,
        CheckpointKind::Extractor,
        &[("extractor", m)],
        metadata,
    )
}

pub fn load_extractor(dir: &Path) -> Result<(ParamModule<f32>, Manifest)> {
    let manifest = read_kind(dir, CheckpointKind::Extractor)?;
    Ok((module_for(dir, &manifest, "extractor")?, manifest))
}

pub fn save_teacher(
    dir: &Path,
    t: &TeacherPipeline<f32>,
    metadata: BTreeMap<String, serde_json::Value>,
) -> Result<Manifest> {
    write_modules(
        dir,
        CheckpointKind::TeacherPipeline,
        &[
            ("extractor", t.extractor()),
            ("projector", t.projector()),
            ("head", t.head().module()),
        ],
        metadata,
    )
}

pub fn load_teacher(dir: &Path) -> Result<(TeacherPipeline<f32>, Manifest)> {
    let manifest = read_kind(dir, CheckpointKind::TeacherPipeline)?;
    let extractor = module_for(dir, &manifest, "extractor")?;
    let projector = module_for(dir, &manifest, "projector")?;
    let head = ClassifierHead::from_module(module_for(dir, &manifest, "head")?)?;
    let mut t = compose_teacher(extractor, projector, head)?;
    if t.projector().is_frozen() && t.head().module().is_frozen() {
        t.freeze_all();
    }
    Ok((t, manifest))
}

pub fn save_student(
    dir: &Path,
    s: &StudentModel<f32>,
    metadata: BTreeMap<String, serde_json::Value>,
) -> Result<Manifest> {
    write_modules(
        dir,
        CheckpointKind::Student,
        &[("extractor", s.extractor()), ("head", s.head().module())],
        metadata,
    )
}

pub fn load_student(dir: &Path) -> Result<(StudentModel<f32>, Manifest)> {
    let manifest = read_kind(dir, CheckpointKind::Student)?;
    let extractor = module_for(dir, &manifest, "extractor")?;
    let head = ClassifierHead::from_module(module_for(dir, &manifest, "head")?)?;
    Ok((StudentModel::new(extractor, head)?, manifest))
}

/// Path of a module blob inside a checkpoint directory.
pub fn blob_path(dir: &Path, manifest: &Manifest, role: &str) -> Option<PathBuf> {
    manifest.module(role).map(|m| dir.join(&m.file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proxykd_core::models::{ProjectorKind, StudentKind};
    use proxykd_core::reprogram::build_proxy_space;

    fn extractor() -> ParamModule<f32> {
        let mut e: ParamModule<f32> = ArchSpec::TeacherExtractor {
            input: [3, 16, 16],
            width: 4,
        }
        .build("teacher.extractor", 3)
        .unwrap();
        e.freeze();
        e
    }

    #[test]
    fn teacher_round_trip_keeps_checksums_and_freeze_state() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = build_proxy_space(
            extractor(),
            ProjectorKind::TeacherBlock,
            5,
            StudentKind::Tiny.feature_dim(),
            1,
        )
        .unwrap();
        t.freeze_all();
        let mut meta = BTreeMap::new();
        meta.insert("seed".into(), 1.into());
        save_teacher(dir.path(), &t, meta).unwrap();
        let (back, manifest) = load_teacher(dir.path()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.checksums(), t.checksums());
        assert!(back.is_fully_frozen());
        assert_eq!(manifest.metadata["seed"], 1);
    }

    #[test]
    fn student_and_extractor_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = StudentModel::<f32>::init(StudentKind::Small, [3, 16, 16], 4, 9).unwrap();
        save_student(&dir.path().join("s"), &s, BTreeMap::new()).unwrap();
        assert_eq!(load_student(&dir.path().join("s")).unwrap().0, s);
        let e = extractor();
        let m = save_extractor(&dir.path().join("e"), &e, BTreeMap::new()).unwrap();
        assert!(m.modules[0].frozen);
        let (back, _) = load_extractor(&dir.path().join("e")).unwrap();
        assert!(back.is_frozen());
        assert_eq!(back.checksum(), e.checksum());
    }

    #[test]
    fn damaged_checkpoints_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let e = extractor();
        let m = save_extractor(dir.path(), &e, BTreeMap::new()).unwrap();
        let blob = blob_path(dir.path(), &m, "extractor").unwrap();
        let mut bytes = fs::read(&blob).unwrap();
        bytes[10] ^= 0x40;
        fs::write(&blob, &bytes).unwrap();
        assert!(matches!(
            load_extractor(dir.path()),
            Err(HarnessError::Corrupt { .. })
        ));
        bytes.truncate(bytes.len() - 3);
        fs::write(&blob, &bytes).unwrap();
        assert!(matches!(
            load_extractor(dir.path()),
            Err(HarnessError::Corrupt { .. })
        ));
        assert!(matches!(
            load_student(dir.path()),
            Err(HarnessError::Config { .. })
        ));
        assert!(matches!(
            load_extractor(&dir.path().join("nope")),
            Err(HarnessError::MissingArtifact { .. })
        ));
    }
}
