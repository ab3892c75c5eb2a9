use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{KnowledgeBundle, KnowledgeId};

/// Prompt-set version recorded in every cache file.
pub const CACHE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("no cached knowledge for class `{class}`, image `{image_id}`")]
    NotFound { class: String, image_id: String },
    #[error("failed to parse knowledge cache {}: {source}", path.display())]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("knowledge cache {} has version {found}, expected {expected}", path.display())]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("i/o error on knowledge cache {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Incomplete(#[from] super::KnowledgeError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEntry {
    #[serde(rename = "Ka")]
    pub ka: String,
    #[serde(rename = "Kb")]
    pub kb: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageEntry {
    pub class: String,
    #[serde(rename = "Kc")]
    pub kc: String,
    #[serde(rename = "Kd")]
    pub kd: String,
    #[serde(rename = "Ke")]
    pub ke: String,
    #[serde(rename = "Kf")]
    pub kf: String,
    #[serde(rename = "Kg")]
    pub kg: String,
}

/// On-disk knowledge store for one split. Class-level texts are keyed by
/// class name, scene-level texts by image id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnowledgeCache {
    pub version: u32,
    pub classes: BTreeMap<String, ClassEntry>,
    pub images: BTreeMap<String, ImageEntry>,
}

impl Default for KnowledgeCache {
    fn default() -> Self {
        Self {
            version: CACHE_VERSION,
            classes: BTreeMap::new(),
            images: BTreeMap::new(),
        }
    }
}

pub(super) fn assemble(
    class_name: &str,
    image_id: &str,
    class: &ClassEntry,
    scene: &ImageEntry,
) -> KnowledgeBundle {
    let texts = [
        (KnowledgeId::Ka, &class.ka),
        (KnowledgeId::Kb, &class.kb),
        (KnowledgeId::Kc, &scene.kc),
        (KnowledgeId::Kd, &scene.kd),
        (KnowledgeId::Ke, &scene.ke),
        (KnowledgeId::Kf, &scene.kf),
        (KnowledgeId::Kg, &scene.kg),
    ]
    .into_iter()
    .map(|(k, v)| (k, v.clone()))
    .collect();
    KnowledgeBundle {
        class_name: class_name.to_string(),
        image_id: image_id.to_string(),
        texts,
    }
}

impl KnowledgeCache {
    pub fn has_class(&self, class: &str) -> bool {
        self.classes.contains_key(class)
    }

    pub fn has_image(&self, image_id: &str) -> bool {
        self.images.contains_key(image_id)
    }

    pub fn insert_class(&mut self, class: &str, entry: ClassEntry) {
        self.classes.insert(class.to_string(), entry);
    }

    pub fn insert_image(&mut self, image_id: &str, entry: ImageEntry) {
        self.images.insert(image_id.to_string(), entry);
    }

    /// Splits a complete bundle into its class-level and scene-level entries.
    pub fn store(&mut self, bundle: &KnowledgeBundle) -> Result<(), CacheError> {
        bundle.validate()?;
        let text = |id| bundle.texts[&id].clone();
        self.insert_class(
            &bundle.class_name,
            ClassEntry {
                ka: text(KnowledgeId::Ka),
                kb: text(KnowledgeId::Kb),
            },
        );
        self.insert_image(
            &bundle.image_id,
            ImageEntry {
                class: bundle.class_name.clone(),
                kc: text(KnowledgeId::Kc),
                kd: text(KnowledgeId::Kd),
                ke: text(KnowledgeId::Ke),
                kf: text(KnowledgeId::Kf),
                kg: text(KnowledgeId::Kg),
            },
        );
        Ok(())
    }

    pub fn load(&self, class: &str, image_id: &str) -> Result<KnowledgeBundle, CacheError> {
        let not_found = || CacheError::NotFound {
            class: class.to_string(),
            image_id: image_id.to_string(),
        };
        let class_entry = self.classes.get(class).ok_or_else(not_found)?;
        let scene = self
            .images
            .get(image_id)
            .filter(|e| e.class == class)
            .ok_or_else(not_found)?;
        Ok(assemble(class, image_id, class_entry, scene))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("cache serializes");
        s.push('\n');
        s
    }

    pub fn read(path: &Path) -> Result<Self, CacheError> {
        let bytes = std::fs::read(path).map_err(|source| CacheError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cache: KnowledgeCache =
            serde_json::from_slice(&bytes).map_err(|source| CacheError::Parse {
                path: path.to_path_buf(),
                source,
            })?;
        if cache.version != CACHE_VERSION {
            return Err(CacheError::Version {
                path: path.to_path_buf(),
                found: cache.version,
                expected: CACHE_VERSION,
            });
        }
        Ok(cache)
    }

    /// Reads `path` if it exists, otherwise returns an empty cache.
    pub fn read_or_default(path: &Path) -> Result<Self, CacheError> {
        if path.exists() {
            Self::read(path)
        } else {
            Ok(Self::default())
        }
    }

    /// Atomic write: the file is replaced by rename, so readers never see a partial cache.
    pub fn write(&self, path: &Path) -> Result<(), CacheError> {
        let io = |source| CacheError::Io {
            path: path.to_path_buf(),
            source,
        };
        let dir = match path.parent() {
            Some(d) if !d.as_os_str().is_empty() => d,
            _ => Path::new("."),
        };
        std::fs::create_dir_all(dir).map_err(io)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
        tmp.write_all(self.to_json().as_bytes()).map_err(io)?;
        tmp.as_file().sync_all().map_err(io)?;
        tmp.persist(path).map_err(|e| io(e.error))?;
        Ok(())
    }
}
