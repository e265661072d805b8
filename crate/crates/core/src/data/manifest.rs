//! CSV dataset manifest: `id,image_path,disease,group,split,mask_path`.
//!
//! Paths are stored relative to the manifest's directory. Empty strings mean
//! an absent group or mask.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{rejected, Error, Result};
use crate::labels::{Disease, HierLabel, LabelMap};
use crate::tensor::Tensor;

pub const HEADER: [&str; 6] = ["id", "image_path", "disease", "group", "split", "mask_path"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(rejected(format!("invalid split {other:?}"))),
        }
    }
}

/// Whether groups live under a disease or stand alone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ManifestKind {
    Hierarchical,
    Unconstrained,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub id: String,
    pub image_path: String,
    pub disease: Option<Disease>,
    pub group: Option<String>,
    pub split: Split,
    pub mask_path: Option<String>,
}

impl ManifestRecord {
    pub fn label(&self) -> HierLabel {
        HierLabel { disease: self.disease.clone(), group: self.group.clone() }
    }
}

#[derive(Serialize, Deserialize)]
struct Row {
    id: String,
    image_path: String,
    disease: String,
    group: String,
    split: String,
    mask_path: String,
}

fn non_empty(s: String) -> Option<String> {
    (!s.is_empty()).then_some(s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub kind: ManifestKind,
    /// Directory relative paths are resolved against.
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    /// Checks id uniqueness and the labeling rules of `kind`; file existence
    /// is left to [`DatasetManifest::check_files`].
    pub fn new(kind: ManifestKind, root: impl Into<PathBuf>, records: Vec<ManifestRecord>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for r in &records {
            if r.id.is_empty() || r.image_path.is_empty() {
                return Err(rejected("record with empty id or image path"));
            }
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
            match kind {
                ManifestKind::Hierarchical if r.disease.is_none() => {
                    return Err(rejected(format!("{}: hierarchical record without disease", r.id)));
                }
                ManifestKind::Unconstrained if r.disease.is_none() && r.group.is_none() => {
                    return Err(rejected(format!("{}: record carries neither disease nor group", r.id)));
                }
                _ => {}
            }
        }
        Ok(Self { kind, root: root.into(), records })
    }

    pub fn parse(text: &str, kind: ManifestKind, root: impl Into<PathBuf>) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let header = reader.headers()?.clone();
        if header.iter().ne(HEADER) {
            return Err(Error::Format(format!("manifest header must be {}", HEADER.join(","))));
        }
        let mut records = Vec::new();
        for row in reader.deserialize::<Row>() {
            let row = row?;
            records.push(ManifestRecord {
                disease: if row.disease.is_empty() { None } else { Some(row.disease.parse()?) },
                split: row.split.parse()?,
                id: row.id,
                image_path: row.image_path,
                group: non_empty(row.group),
                mask_path: non_empty(row.mask_path),
            });
        }
        Self::new(kind, root, records)
    }

    /// Parses and checks that every referenced file exists.
    pub fn load(path: impl AsRef<Path>, kind: ManifestKind) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self::parse(&text, kind, root)?;
        m.check_files()?;
        Ok(m)
    }

    pub fn check_files(&self) -> Result<()> {
        for r in &self.records {
            for rel in std::iter::once(&r.image_path).chain(&r.mask_path) {
                if !self.root.join(rel).is_file() {
                    return Err(rejected(format!("{}: missing file {rel}", r.id)));
                }
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(HEADER)?;
        for r in &self.records {
            w.serialize(Row {
                id: r.id.clone(),
                image_path: r.image_path.clone(),
                disease: r.disease.as_ref().map(|d| d.to_string()).unwrap_or_default(),
                group: r.group.clone().unwrap_or_default(),
                split: r.split.to_string(),
                mask_path: r.mask_path.clone().unwrap_or_default(),
            })?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("utf-8 fields"))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&ManifestRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn labels(&self, split: Option<Split>) -> LabelMap {
        self.records
            .iter()
            .filter(|r| split.is_none_or(|s| r.split == s))
            .map(|r| (r.id.clone(), r.label()))
            .collect()
    }

    pub fn image_path(&self, r: &ManifestRecord) -> PathBuf {
        self.root.join(&r.image_path)
    }

    pub fn mask_path(&self, r: &ManifestRecord) -> Option<PathBuf> {
        r.mask_path.as_ref().map(|m| self.root.join(m))
    }

    /// Decodes the images of every record in `split` (all records when `None`).
    pub fn load_images(&self, split: Option<Split>) -> Result<BTreeMap<String, Tensor>> {
        self.records
            .iter()
            .filter(|r| split.is_none_or(|s| r.split == s))
            .map(|r| Ok((r.id.clone(), super::pnm::load_image(self.image_path(r))?)))
            .collect()
    }
}
