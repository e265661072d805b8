//! Similarity-group annotation sets backed by an append-only CSV journal.
//!
//! Journal columns: `action,set,mode,group,disease,image_id`. The materialized
//! view is rebuilt by replaying the journal from the top, so every accepted
//! operation is written before it is applied.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use derm_core::labels::Disease;
use serde::{Deserialize, Serialize};

use crate::error::ApiError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SetMode {
    #[default]
    Hierarchical,
    Unconstrained,
}

impl SetMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SetMode::Hierarchical => "hierarchical",
            SetMode::Unconstrained => "unconstrained",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum GroupOp {
    Create {
        #[serde(default)]
        set: Option<String>,
        #[serde(default)]
        mode: SetMode,
        group: String,
        #[serde(default)]
        disease: Option<String>,
    },
    Assign {
        #[serde(default)]
        set: Option<String>,
        group: String,
        image_id: String,
    },
    Unassign {
        #[serde(default)]
        set: Option<String>,
        image_id: String,
    },
}

#[derive(Serialize, Deserialize)]
struct JournalRow {
    action: String,
    set: String,
    mode: String,
    group: String,
    disease: String,
    image_id: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct GroupSummary {
    pub set: String,
    pub mode: SetMode,
    pub group: String,
    pub disease: Option<String>,
    pub members: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct Group {
    disease: Option<Disease>,
    members: BTreeSet<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnnotationSet {
    pub mode: SetMode,
    groups: BTreeMap<String, Group>,
    membership: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SetView {
    pub name: String,
    pub mode: SetMode,
    pub groups: Vec<GroupSummary>,
}

impl AnnotationSet {
    /// `image -> group` for every assigned image.
    pub fn membership(&self) -> &BTreeMap<String, String> {
        &self.membership
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }
}

/// Resolves an image id to its disease label, or `None` if unknown.
pub trait ImageCatalog {
    fn disease_of(&self, image_id: &str) -> Option<Option<Disease>>;
}

#[derive(Debug, Default)]
pub struct AnnotationStore {
    sets: BTreeMap<String, AnnotationSet>,
    journal: Option<(PathBuf, File)>,
}

fn set_name(set: &Option<String>, fallback: SetMode) -> String {
    set.clone().unwrap_or_else(|| fallback.as_str().to_owned())
}

impl AnnotationStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Replays an existing journal (if any) and appends to it from then on.
    pub fn open(path: impl AsRef<Path>, catalog: &dyn ImageCatalog) -> Result<Self, ApiError> {
        let path = path.as_ref().to_path_buf();
        let mut store = Self::default();
        if path.is_file() {
            let mut reader = csv::Reader::from_path(&path).map_err(ApiError::internal)?;
            for (i, row) in reader.deserialize::<JournalRow>().enumerate() {
                let op = row_to_op(row.map_err(ApiError::internal)?)
                    .map_err(|m| ApiError::internal(format!("journal line {}: {m}", i + 2)))?;
                store
                    .apply(&op, catalog)
                    .map_err(|e| ApiError::internal(format!("journal line {}: {}", i + 2, e.message)))?;
            }
        }
        let fresh = !path.is_file() || std::fs::metadata(&path).map(|m| m.len() == 0).unwrap_or(true);
        let mut file = OpenOptions::new().create(true).append(true).open(&path).map_err(ApiError::internal)?;
        if fresh {
            file.write_all(b"action,set,mode,group,disease,image_id\n").map_err(ApiError::internal)?;
        }
        store.journal = Some((path, file));
        Ok(store)
    }

    pub fn journal_path(&self) -> Option<&Path> {
        self.journal.as_ref().map(|j| j.0.as_path())
    }

    pub fn set(&self, name: &str) -> Option<&AnnotationSet> {
        self.sets.get(name)
    }

    pub fn sets(&self) -> impl Iterator<Item = (&String, &AnnotationSet)> {
        self.sets.iter()
    }

    /// Validates, journals and applies one operation.
    pub fn execute(&mut self, op: &GroupOp, catalog: &dyn ImageCatalog) -> Result<GroupSummary, ApiError> {
        // dry run on a copy of the affected set so a rejected op leaves no trace
        let mut probe = Self { sets: self.sets.clone(), journal: None };
        let summary = probe.apply(op, catalog)?;
        if let Some((_, file)) = self.journal.as_mut() {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
            w.serialize(op_to_row(op, &self.sets)).map_err(ApiError::internal)?;
            let bytes = w.into_inner().map_err(|e| ApiError::internal(e.to_string()))?;
            file.write_all(&bytes).and_then(|_| file.flush()).map_err(ApiError::internal)?;
        }
        self.sets = probe.sets;
        Ok(summary)
    }

    fn apply(&mut self, op: &GroupOp, catalog: &dyn ImageCatalog) -> Result<GroupSummary, ApiError> {
        match op {
            GroupOp::Create { set, mode, group, disease } => {
                let name = set_name(set, *mode);
                if group.is_empty() || group.contains(',') {
                    return Err(ApiError::bad_request("group name must be non-empty and comma-free"));
                }
                let disease = match (mode, disease.as_deref()) {
                    (SetMode::Hierarchical, None | Some("")) => {
                        return Err(ApiError::bad_request("hierarchical groups need a parent disease"))
                    }
                    (_, None | Some("")) => None,
                    (_, Some(d)) => Some(d.parse::<Disease>().map_err(|e| ApiError::bad_request(e.to_string()))?),
                };
                let s = self.sets.entry(name.clone()).or_insert_with(|| AnnotationSet {
                    mode: *mode,
                    groups: BTreeMap::new(),
                    membership: BTreeMap::new(),
                });
                if s.mode != *mode {
                    return Err(ApiError::conflict(format!("set {name} is {}", s.mode.as_str())));
                }
                if s.groups.contains_key(group) {
                    return Err(ApiError::conflict(format!("group {group} already exists in {name}")));
                }
                s.groups.insert(group.clone(), Group { disease, members: BTreeSet::new() });
                Ok(summary(&name, s, group))
            }
            GroupOp::Assign { set, group, image_id } => {
                let name = set_name(set, SetMode::Hierarchical);
                let s = self.sets.get_mut(&name).ok_or_else(|| ApiError::not_found(format!("unknown set {name}")))?;
                let image_disease = catalog
                    .disease_of(image_id)
                    .ok_or_else(|| ApiError::not_found(format!("unknown image {image_id}")))?;
                let g = s.groups.get(group).ok_or_else(|| ApiError::not_found(format!("unknown group {group}")))?;
                if s.mode == SetMode::Hierarchical && image_disease != g.disease {
                    return Err(ApiError::conflict(format!(
                        "image {image_id} ({}) cannot join {group} under {}",
                        image_disease.map_or("unlabeled".into(), |d| d.to_string()),
                        g.disease.as_ref().map_or("no disease".into(), |d| d.to_string())
                    )));
                }
                if let Some(prev) = s.membership.insert(image_id.clone(), group.clone()) {
                    s.groups.get_mut(&prev).expect("member of existing group").members.remove(image_id);
                }
                s.groups.get_mut(group).expect("checked").members.insert(image_id.clone());
                Ok(summary(&name, s, group))
            }
            GroupOp::Unassign { set, image_id } => {
                let name = set_name(set, SetMode::Hierarchical);
                let s = self.sets.get_mut(&name).ok_or_else(|| ApiError::not_found(format!("unknown set {name}")))?;
                let prev = s
                    .membership
                    .remove(image_id)
                    .ok_or_else(|| ApiError::not_found(format!("image {image_id} is not assigned in {name}")))?;
                s.groups.get_mut(&prev).expect("member of existing group").members.remove(image_id);
                Ok(summary(&name, s, &prev))
            }
        }
    }

    pub fn view(&self) -> Vec<SetView> {
        self.sets
            .iter()
            .map(|(name, s)| SetView {
                name: name.clone(),
                mode: s.mode,
                groups: s.groups.keys().map(|g| summary(name, s, g)).collect(),
            })
            .collect()
    }
}

fn summary(set: &str, s: &AnnotationSet, group: &str) -> GroupSummary {
    let g = &s.groups[group];
    GroupSummary {
        set: set.to_owned(),
        mode: s.mode,
        group: group.to_owned(),
        disease: g.disease.as_ref().map(Disease::to_string),
        members: g.members.iter().cloned().collect(),
    }
}

fn op_to_row(op: &GroupOp, sets: &BTreeMap<String, AnnotationSet>) -> JournalRow {
    let mode_of = |name: &str| sets.get(name).map_or("", |s| s.mode.as_str()).to_owned();
    match op {
        GroupOp::Create { set, mode, group, disease } => JournalRow {
            action: "create".into(),
            set: set_name(set, *mode),
            mode: mode.as_str().into(),
            group: group.clone(),
            disease: disease.clone().unwrap_or_default(),
            image_id: String::new(),
        },
        GroupOp::Assign { set, group, image_id } => {
            let name = set_name(set, SetMode::Hierarchical);
            JournalRow {
                action: "assign".into(),
                mode: mode_of(&name),
                set: name,
                group: group.clone(),
                disease: String::new(),
                image_id: image_id.clone(),
            }
        }
        GroupOp::Unassign { set, image_id } => {
            let name = set_name(set, SetMode::Hierarchical);
            JournalRow {
                action: "unassign".into(),
                mode: mode_of(&name),
                set: name,
                group: String::new(),
                disease: String::new(),
                image_id: image_id.clone(),
            }
        }
    }
}

fn row_to_op(r: JournalRow) -> Result<GroupOp, String> {
    let set = Some(r.set);
    Ok(match r.action.as_str() {
        "create" => GroupOp::Create {
            set,
            mode: match r.mode.as_str() {
                "hierarchical" => SetMode::Hierarchical,
                "unconstrained" => SetMode::Unconstrained,
                other => return Err(format!("unknown mode {other:?}")),
            },
            group: r.group,
            disease: (!r.disease.is_empty()).then_some(r.disease),
        },
        "assign" => GroupOp::Assign { set, group: r.group, image_id: r.image_id },
        "unassign" => GroupOp::Unassign { set, image_id: r.image_id },
        other => return Err(format!("unknown action {other:?}")),
    })
}
