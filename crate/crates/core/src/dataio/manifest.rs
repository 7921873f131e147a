//! Dataset manifests: a JSON index over a companion tensor archive.
//!
//! ```json
//! {
//!   "version": 1,
//!   "d": 64,
//!   "archive": "fixture.ovma",
//!   "encoder": {"synthesize": {"width": 64, "blocks": 4, "heads": 1,
//!               "context_length": 77, "init_std": 0.02, "seed": 7}},
//!   "provenance": "free text",
//!   "classes": [
//!     {"id": "c00", "name": "class 0", "split": "base",
//!      "exemplars": "class.c00.exemplars", "text": "class.c00.text",
//!      "targets": "class.c00.targets"}
//!   ]
//! }
//! ```
//!
//! `encoder` may instead be `{"archive": {"heads": 8}}`, meaning the encoder
//! weights are stored under `lang.*` in the companion archive.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    normalize_rows, read_archive, write_archive, write_atomic, ClassReferenceSet, TensorArchive,
};
use crate::encoders::{LanguageConfig, LanguageEncoder};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Base,
    Novel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEntry {
    pub id: String,
    #[serde(default)]
    pub name: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exemplars: Option<String>,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub targets: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum EncoderSpec {
    Synthesize(LanguageConfig),
    Archive { heads: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub d: usize,
    pub archive: String,
    pub encoder: EncoderSpec,
    #[serde(default)]
    pub provenance: String,
    pub classes: Vec<ClassEntry>,
}

impl DatasetManifest {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Manifest(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_json().as_bytes())
    }

    /// Checks the manifest on its own: version, unique non-empty ids, width.
    pub fn validate_shape(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!(
                "unsupported manifest version {} (expected {MANIFEST_VERSION})",
                self.version
            )));
        }
        if self.d == 0 {
            return Err(Error::Manifest("d must be positive".into()));
        }
        if let EncoderSpec::Synthesize(cfg) = &self.encoder {
            cfg.validate()?;
            if cfg.width != self.d {
                return Err(Error::Manifest(format!(
                    "encoder width {} but d = {}",
                    cfg.width, self.d
                )));
            }
        }
        let mut seen = HashSet::new();
        for c in &self.classes {
            if c.id.is_empty() {
                return Err(Error::Manifest("empty class id".into()));
            }
            if !seen.insert(c.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate class id {:?}", c.id)));
            }
        }
        Ok(())
    }

    /// Checks that every key resolves to a finite `[rows x d]` matrix.
    pub fn validate(&self, archive: &TensorArchive) -> Result<()> {
        self.validate_shape()?;
        for c in &self.classes {
            let keys = [
                ("exemplars", c.exemplars.as_ref()),
                ("text", Some(&c.text)),
                ("targets", c.targets.as_ref()),
            ];
            for (role, key) in keys {
                let Some(key) = key else { continue };
                let t = archive.get(key).ok_or_else(|| {
                    Error::Manifest(format!("class {}: {role} key {key:?} not in archive", c.id))
                })?;
                if t.dims().len() != 2 || t.dims()[1] != self.d || t.dims()[0] == 0 {
                    return Err(Error::Manifest(format!(
                        "class {}: {role} tensor {key:?} has dims {:?}, expected [rows>0, {}]",
                        c.id,
                        t.dims(),
                        self.d
                    )));
                }
                if !t.is_finite() {
                    return Err(Error::Manifest(format!(
                        "class {}: {role} tensor {key:?} is not finite",
                        c.id
                    )));
                }
            }
        }
        if let EncoderSpec::Archive { heads } = &self.encoder {
            let enc = LanguageEncoder::<f32>::read_from(archive, *heads)?;
            if enc.width() != self.d {
                return Err(Error::Manifest(format!(
                    "archived encoder width {} but d = {}",
                    enc.width(),
                    self.d
                )));
            }
        }
        Ok(())
    }

    pub fn class_ids(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.id.clone()).collect()
    }

    /// Manifest restricted to one split, class order preserved.
    pub fn filter_split(&self, split: Split) -> Self {
        let mut out = self.clone();
        out.classes.retain(|c| c.split == split);
        out
    }
}

/// Partitions classes by sorted id: the first `ceil(fraction * C)` are base.
pub fn split_base_novel(
    manifest: &DatasetManifest,
    fraction: f64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Validation(format!(
            "split fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let mut sorted = manifest.classes.clone();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let n_base = (fraction * sorted.len() as f64).ceil() as usize;
    if n_base == 0 || n_base >= sorted.len() {
        return Err(Error::Validation(format!(
            "fraction {fraction} of {} classes leaves an empty side",
            sorted.len()
        )));
    }
    let novel_classes = sorted.split_off(n_base);
    let relabel = |classes: Vec<ClassEntry>, split: Split| {
        let mut m = manifest.clone();
        m.classes = classes
            .into_iter()
            .map(|c| ClassEntry { split, ..c })
            .collect();
        m
    };
    Ok((
        relabel(sorted, Split::Base),
        relabel(novel_classes, Split::Novel),
    ))
}

/// A validated manifest with its archive loaded.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub archive: TensorArchive,
    pub manifest_path: Option<PathBuf>,
}

impl Dataset {
    pub fn new(manifest: DatasetManifest, archive: TensorArchive) -> Result<Self> {
        manifest.validate(&archive)?;
        Ok(Self {
            manifest,
            archive,
            manifest_path: None,
        })
    }

    /// Writes `<prefix>.manifest.json` and the archive it names, next to it.
    pub fn save(&self, manifest_path: impl AsRef<Path>) -> Result<()> {
        let manifest_path = manifest_path.as_ref();
        let dir = manifest_path.parent().unwrap_or_else(|| Path::new(""));
        write_archive(dir.join(&self.manifest.archive), &self.archive)?;
        self.manifest.write(manifest_path)
    }

    pub fn with_manifest(&self, manifest: DatasetManifest) -> Result<Self> {
        manifest.validate(&self.archive)?;
        Ok(Self {
            manifest,
            archive: self.archive.clone(),
            manifest_path: self.manifest_path.clone(),
        })
    }

    pub fn language_encoder<T: Scalar>(&self) -> Result<LanguageEncoder<T>> {
        match &self.manifest.encoder {
            EncoderSpec::Synthesize(cfg) => LanguageEncoder::synthesize(cfg.clone()),
            EncoderSpec::Archive { heads } => {
                Ok(LanguageEncoder::<f32>::read_from(&self.archive, *heads)?.cast())
            }
        }
    }

    /// Per-class references in manifest order, labels `0..C`. Exemplar and
    /// target rows are L2-normalized here.
    pub fn references<T: Scalar>(&self) -> Result<Vec<ClassReferenceSet<T>>> {
        let load = |key: &str| -> Result<Tensor<T>> { Ok(self.archive.require(key)?.cast()) };
        self.manifest
            .classes
            .iter()
            .enumerate()
            .map(|(label, c)| {
                let features = |key: Option<&String>| -> Result<Option<Tensor<T>>> {
                    key.map(|k| {
                        let mut t = load(k)?;
                        normalize_rows(&mut t)
                            .map_err(|e| Error::Manifest(format!("class {}: {e}", c.id)))?;
                        Ok(t)
                    })
                    .transpose()
                };
                Ok(ClassReferenceSet {
                    id: c.id.clone(),
                    label,
                    exemplars: features(c.exemplars.as_ref())?,
                    text: load(&c.text)?,
                    targets: features(c.targets.as_ref())?,
                })
            })
            .collect()
    }
}

/// Reads a manifest, the archive it names (relative to the manifest), and
/// validates them against each other.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
    let manifest_path = manifest_path.as_ref();
    let manifest = DatasetManifest::read(manifest_path)?;
    manifest.validate_shape()?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new(""));
    let archive = read_archive(dir.join(&manifest.archive))?;
    let mut ds = Dataset::new(manifest, archive)?;
    ds.manifest_path = Some(manifest_path.to_path_buf());
    Ok(ds)
}
