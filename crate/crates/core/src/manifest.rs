//! JSON dataset manifest. Paths are stored as written and resolved against
//! the manifest's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Rect;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub image: PathBuf,
    /// 8-bit labels: 0 background, 1 road, 2 and up obstacle instances.
    pub label_mask: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub obstacle_mask: Option<PathBuf>,
    /// Precomputed 16-bit edge map, used when the edge source is `file`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_map: Option<PathBuf>,
    pub obstacles: Vec<Rect>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub records: Vec<ManifestRecord>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(records: Vec<ManifestRecord>, base_dir: impl Into<PathBuf>) -> Self {
        Self { version: MANIFEST_VERSION, records, base_dir: base_dir.into() }
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// Parses without touching the referenced files.
    pub fn from_json(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut m: Self = serde_json::from_str(text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Format(format!("manifest version {} (expected {})", m.version, MANIFEST_VERSION)));
        }
        m.base_dir = base_dir.into();
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Reads the manifest and checks that every referenced file exists and
    /// every box lies inside its image.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self::from_json(&text, base)?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = std::collections::HashSet::new();
        for r in &self.records {
            if !ids.insert(&r.id) {
                return Err(Error::InvalidInput(format!("duplicate record id {:?}", r.id)));
            }
            let files = [Some(&r.image), Some(&r.label_mask), r.obstacle_mask.as_ref(), r.edge_map.as_ref()];
            for f in files.into_iter().flatten() {
                let p = self.resolve(f);
                if !p.is_file() {
                    return Err(Error::InvalidInput(format!("record {}: missing file {}", r.id, p.display())));
                }
            }
            let image = self.resolve(&r.image);
            let (w, h) = image::image_dimensions(&image).map_err(|e| Error::image(&image, e))?;
            for b in &r.obstacles {
                if b.is_empty() || !b.fits_in(w, h) {
                    return Err(Error::InvalidInput(format!("record {}: box {b:?} outside the {w}x{h} image", r.id)));
                }
            }
        }
        Ok(())
    }
}
