use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub image_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attr_label: Option<u8>,
}

impl SampleRecord {
    pub fn new(id: impl Into<String>, image_path: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            image_path: image_path.into(),
            feature_path: None,
            latent_path: None,
            mask_path: None,
            attr_label: None,
        }
    }

    fn paths(&self) -> impl Iterator<Item = (&'static str, &str)> {
        [
            ("image_path", Some(self.image_path.as_str())),
            ("feature_path", self.feature_path.as_deref()),
            ("latent_path", self.latent_path.as_deref()),
            ("mask_path", self.mask_path.as_deref()),
        ]
        .into_iter()
        .filter_map(|(field, p)| p.map(|p| (field, p)))
    }
}

/// List of samples plus the generator layer their features came from.
///
/// Paths inside records are relative to the directory holding the manifest
/// file; `base_dir` is that directory and is not serialized.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub feature_layer: i32,
    pub samples: Vec<SampleRecord>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(feature_layer: i32, base_dir: impl Into<PathBuf>) -> Self {
        Self {
            version: MANIFEST_VERSION,
            feature_layer,
            samples: Vec::new(),
            base_dir: base_dir.into(),
        }
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    /// Expresses `target` relative to this manifest's directory.
    pub fn relative_path(&self, target: &Path) -> Result<String> {
        relative_to(&self.base_dir, target)
    }

    pub fn get(&self, id: &str) -> Option<&SampleRecord> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Checks version, id uniqueness, label values and that every referenced
    /// path exists relative to `dir`.
    pub fn validate_in(&self, dir: &Path) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::UnsupportedVersion {
                version: self.version,
            });
        }
        let mut seen = HashSet::new();
        for s in &self.samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::DuplicateId { id: s.id.clone() });
            }
            if let Some(b) = s.attr_label {
                if b > 1 {
                    return Err(
                        Error::invalid("attr_label", format!("{b} is not 0 or 1")).in_sample(&s.id)
                    );
                }
            }
            for (field, p) in s.paths() {
                if p.is_empty() || !dir.join(p).exists() {
                    return Err(Error::DanglingPath {
                        id: s.id.clone(),
                        field,
                        path: p.to_string(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn parse(json: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut m: DatasetManifest = serde_json::from_str(json)?;
        m.base_dir = base_dir.into();
        m.validate_in(&m.base_dir)?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub fn relative_to(base: &Path, target: &Path) -> Result<String> {
    let base = std::fs::canonicalize(base).map_err(|e| Error::io(base, e))?;
    let target = match std::fs::canonicalize(target) {
        Ok(t) => t,
        // Not created yet: canonicalize the parent and re-attach the file name.
        Err(_) => {
            let parent = parent_dir(target);
            let parent = std::fs::canonicalize(&parent).map_err(|e| Error::io(&parent, e))?;
            parent.join(target.file_name().unwrap_or_default())
        }
    };
    let rel = pathdiff::diff_paths(&target, &base).unwrap_or(target);
    Ok(rel.to_string_lossy().replace('\\', "/"))
}

pub fn write_manifest(m: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    m.validate_in(&parent_dir(path))?;
    super::write_atomic(path, m.to_json().as_bytes())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    DatasetManifest::parse(&text, parent_dir(path))
}
