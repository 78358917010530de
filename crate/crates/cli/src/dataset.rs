//! Binary dataset files.
//!
//! Layout, all integers little-endian:
//!
//! | offset      | size          | content                                   |
//! |-------------|---------------|-------------------------------------------|
//! | 0           | 8             | magic `PXKDDATA`                          |
//! | 8           | 4             | `u32` schema version                      |
//! | 12          | 4             | `u32` header length `L`                   |
//! | 16          | `L`           | UTF-8 JSON header (split, count, spec)    |
//! | 16 + L      | `4 * N*H*W*C` | `f32` pixels, `[N, H, W, C]` row-major    |
//! | after that  | `4 * N`       | `i32` labels                              |
//!
//! Nothing may follow the label block.

use std::fs;
use std::path::{Path, PathBuf};

use proxykd_core::data::{DomainSplits, LabeledDataset, Split};
use proxykd_core::synth::DomainSpec;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const MAGIC: &[u8; 8] = b"PXKDDATA";
pub const SCHEMA_VERSION: u32 = 1;
/// File extension used for dataset files.
pub const EXTENSION: &str = "pxd";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    split: Split,
    count: usize,
    spec: DomainSpec,
}

pub fn encode_dataset(ds: &LabeledDataset) -> Vec<u8> {
    let header = Header {
        split: ds.split(),
        count: ds.len(),
        spec: ds.spec().clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 4 * (ds.images().len() + ds.len()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in ds.images() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &l in ds.labels() {
        out.extend_from_slice(&(l as i32).to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, offset: usize, message: impl Into<String>) -> HarnessError {
        HarnessError::Corrupt {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.corrupt(
                self.bytes.len(),
                format!(
                    "file ends while reading {what} ({n} bytes needed from offset {})",
                    self.pos
                ),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }
}

/// Parses a dataset from bytes. `path` is only used in error messages.
pub fn decode_dataset(bytes: &[u8], path: &Path) -> Result<LabeledDataset> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    if r.take(MAGIC.len(), "magic bytes")? != MAGIC {
        return Err(r.corrupt(0, "bad magic bytes"));
    }
    let version = r.u32("schema version")?;
    if version != SCHEMA_VERSION {
        return Err(HarnessError::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: SCHEMA_VERSION,
        });
    }
    let len = r.u32("header length")? as usize;
    let header_at = r.pos;
    let header: Header = serde_json::from_slice(r.take(len, "header")?).map_err(|e| {
        r.corrupt(
            header_at + e.column().saturating_sub(1),
            format!("unreadable header: {e}"),
        )
    })?;
    let [h, w, c] = header.spec.image_size;
    let pixels = header
        .count
        .checked_mul(h * w * c)
        .ok_or_else(|| r.corrupt(header_at, "sample count overflows"))?;
    let images: Vec<f32> = r
        .take(
            pixels
                .checked_mul(4)
                .ok_or_else(|| r.corrupt(header_at, "sample count overflows"))?,
            "image block",
        )?
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let labels_at = r.pos;
    let raw = r.take(header.count * 4, "label block")?;
    let mut labels = Vec::with_capacity(header.count);
    for (i, b) in raw.chunks_exact(4).enumerate() {
        let l = i32::from_le_bytes(b.try_into().expect("4 bytes"));
        if l < 0 || l as usize >= header.spec.num_classes {
            return Err(r.corrupt(
                labels_at + 4 * i,
                format!("label {l} outside 0..{}", header.spec.num_classes),
            ));
        }
        labels.push(l as u32);
    }
    if r.pos != bytes.len() {
        return Err(r.corrupt(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(LabeledDataset::new(
        images,
        labels,
        header.split,
        header.spec,
    )?)
}

pub fn save_dataset(ds: &LabeledDataset, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(HarnessError::io(dir))?;
    }
    fs::write(path, encode_dataset(ds)).map_err(HarnessError::io(path))
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    if !path.exists() {
        return Err(HarnessError::MissingArtifact {
            path: path.to_path_buf(),
        });
    }
    let bytes = fs::read(path).map_err(HarnessError::io(path))?;
    decode_dataset(&bytes, path)
}

/// `dir/<split>.pxd`
pub fn split_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{split}.{EXTENSION}"))
}

/// Writes the three splits of a domain into `dir`.
pub fn save_splits(splits: &DomainSplits, dir: &Path) -> Result<()> {
    for split in [Split::Train, Split::Val, Split::Test] {
        save_dataset(splits.get(split), &split_path(dir, split))?;
    }
    Ok(())
}

pub fn load_splits(dir: &Path) -> Result<DomainSplits> {
    if !dir.is_dir() {
        return Err(HarnessError::MissingArtifact {
            path: dir.to_path_buf(),
        });
    }
    Ok(DomainSplits {
        train: load_dataset(&split_path(dir, Split::Train))?,
        val: load_dataset(&split_path(dir, Split::Val))?,
        test: load_dataset(&split_path(dir, Split::Test))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proxykd_core::synth::generate_domain;

    fn small() -> LabeledDataset {
        let spec = DomainSpec {
            num_classes: 3,
            samples_per_class: 10,
            image_size: [8, 8, 3],
            ..DomainSpec::default_target(2)
        };
        generate_domain(&spec).unwrap().train
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let ds = small();
        let back = decode_dataset(&encode_dataset(&ds), Path::new("mem")).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.checksum(), ds.checksum());
    }

    #[test]
    fn every_truncation_is_reported_as_corrupt() {
        let bytes = encode_dataset(&small());
        for cut in [0, 5, 11, 15, 40, bytes.len() / 2, bytes.len() - 1] {
            match decode_dataset(&bytes[..cut], Path::new("mem")) {
                Err(HarnessError::Corrupt { offset, .. }) => assert!(offset as usize <= cut),
                other => panic!("cut at {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn trailing_bytes_and_bad_labels_are_located() {
        let mut bytes = encode_dataset(&small());
        let n = bytes.len();
        bytes.push(0);
        assert!(
            matches!(decode_dataset(&bytes, Path::new("mem")), Err(HarnessError::Corrupt { offset, .. }) if offset as usize == n)
        );
        bytes.pop();
        bytes[n - 4..].copy_from_slice(&7i32.to_le_bytes());
        assert!(
            matches!(decode_dataset(&bytes, Path::new("mem")), Err(HarnessError::Corrupt { offset, .. }) if offset as usize == n - 4)
        );
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let mut bytes = encode_dataset(&small());
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        let err = decode_dataset(&bytes, Path::new("mem")).unwrap_err();
        assert!(matches!(
            err,
            HarnessError::VersionMismatch {
                found: 2,
                expected: 1,
                ..
            }
        ));
        let msg = err.to_string();
        assert!(
            msg.contains("version 2") && msg.contains("version 1"),
            "{msg}"
        );
    }
}
