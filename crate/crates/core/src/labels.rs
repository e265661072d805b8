//! Two-level annotation hierarchy: disease, then human similarity group.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{rejected, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Disease {
    Melanoma,
    SeborrheicKeratosis,
    BenignNevus,
    Other(String),
}

impl Disease {
    pub const KNOWN: [Disease; 3] = [Disease::Melanoma, Disease::SeborrheicKeratosis, Disease::BenignNevus];

    pub fn as_str(&self) -> &str {
        match self {
            Disease::Melanoma => "melanoma",
            Disease::SeborrheicKeratosis => "seborrheic_keratosis",
            Disease::BenignNevus => "benign_nevus",
            Disease::Other(s) => s,
        }
    }

    /// The class scored by the neighbor vote.
    pub fn is_positive(&self) -> bool {
        matches!(self, Disease::Melanoma)
    }
}

impl fmt::Display for Disease {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Disease {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "melanoma" => Disease::Melanoma,
            "seborrheic_keratosis" => Disease::SeborrheicKeratosis,
            "benign_nevus" => Disease::BenignNevus,
            "" => return Err(rejected("empty disease label")),
            other if other.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') => {
                Disease::Other(other.to_owned())
            }
            other => return Err(rejected(format!("invalid disease label {other:?}"))),
        })
    }
}

/// A sample's annotation. In hierarchical annotation sets a group only has
/// meaning under its parent disease; unconstrained sets may carry a group
/// with no disease at all.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct HierLabel {
    pub disease: Option<Disease>,
    pub group: Option<String>,
}

impl HierLabel {
    pub fn disease(d: Disease) -> Self {
        Self { disease: Some(d), group: None }
    }

    pub fn hierarchical(d: Disease, group: impl Into<String>) -> Self {
        Self { disease: Some(d), group: Some(group.into()) }
    }

    pub fn unconstrained(group: impl Into<String>) -> Self {
        Self { disease: None, group: Some(group.into()) }
    }

    /// `(disease, group)` identity of a hierarchical group.
    pub fn hier_group(&self) -> Option<(&Disease, &str)> {
        Some((self.disease.as_ref()?, self.group.as_deref()?))
    }

    /// Whether this label obeys the parent/child rule of hierarchical sets.
    pub fn is_hierarchical_valid(&self) -> bool {
        self.group.is_none() || self.disease.is_some()
    }
}

/// Sample id to label, ordered by id for deterministic iteration.
pub type LabelMap = BTreeMap<String, HierLabel>;

pub fn lookup<'a>(labels: &'a LabelMap, id: &str) -> Result<&'a HierLabel> {
    labels.get(id).ok_or_else(|| rejected(format!("unlabeled sample {id}")))
}
