//! Exact nearest-neighbor search over embeddings and the neighbor vote.
//!
//! Index file layout (little-endian):
//!
//! ```text
//! magic   8 bytes "CHAIX001"
//! d       u32
//! n       u32
//! record* id (u32 len + UTF-8), disease (u32 len + UTF-8, empty if absent),
//!         group (u32 len + UTF-8, empty if absent), f32 * d
//! ```

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{rejected, Error, Result};
use crate::labels::{lookup, HierLabel, LabelMap};
use crate::tensor::{squared_distance, Tensor};
use crate::weights::Reader;

pub const INDEX_MAGIC: &[u8; 8] = b"CHAIX001";

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    dim: usize,
    ids: Vec<String>,
    labels: Vec<HierLabel>,
    /// Row-major `n x dim`, every value representable as `f32`.
    data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Neighbor {
    pub id: String,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeighborList {
    pub query_id: Option<String>,
    pub neighbors: Vec<Neighbor>,
}

impl NeighborList {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    /// The first `k` neighbors.
    pub fn truncated(&self, k: usize) -> NeighborList {
        NeighborList { query_id: self.query_id.clone(), neighbors: self.neighbors[..k.min(self.len())].to_vec() }
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.neighbors.iter().map(|n| n.id.as_str())
    }
}

impl EmbeddingIndex {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(rejected("index dimension must be positive"));
        }
        Ok(Self { dim, ids: Vec::new(), labels: Vec::new(), data: Vec::new() })
    }

    /// Builds an index from `(id, embedding, label)` records in the given order.
    pub fn build<'a>(records: impl IntoIterator<Item = (&'a str, &'a Tensor, HierLabel)>) -> Result<Self> {
        let mut iter = records.into_iter().peekable();
        let dim = iter.peek().map(|r| r.1.len()).ok_or_else(|| rejected("no records to index"))?;
        let mut index = Self::new(dim)?;
        for (id, e, label) in iter {
            index.insert(id, e, label)?;
        }
        Ok(index)
    }

    /// Embeddings are stored at `f32` precision so a saved index reloads
    /// to the same distances.
    pub fn insert(&mut self, id: &str, embedding: &Tensor, label: HierLabel) -> Result<()> {
        if embedding.len() != self.dim {
            return Err(rejected(format!("{id}: embedding has {} values, index has {}", embedding.len(), self.dim)));
        }
        embedding.check_finite(id)?;
        if self.ids.iter().any(|x| x == id) {
            return Err(Error::DuplicateId(id.to_owned()));
        }
        self.ids.push(id.to_owned());
        self.labels.push(label);
        self.data.extend(embedding.data().iter().map(|&v| f64::from(v as f32)));
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn embedding(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    pub fn label(&self, i: usize) -> &HierLabel {
        &self.labels[i]
    }

    pub fn label_map(&self) -> LabelMap {
        self.ids.iter().cloned().zip(self.labels.iter().cloned()).collect()
    }

    /// The `k` nearest records by squared Euclidean distance; equal
    /// distances keep insertion order. The query is rounded to `f32` like the
    /// stored records, so an indexed sample retrieves itself at distance 0.
    pub fn knn_query(&self, query: &Tensor, k: usize) -> Result<NeighborList> {
        if self.is_empty() {
            return Err(rejected("query against empty index"));
        }
        if k == 0 || k > self.len() {
            return Err(rejected(format!("k = {k} outside 1..={}", self.len())));
        }
        if query.len() != self.dim {
            return Err(rejected(format!("query has {} values, index has {}", query.len(), self.dim)));
        }
        query.check_finite("query embedding")?;
        let q: Vec<f64> = query.data().iter().map(|&v| f64::from(v as f32)).collect();
        let q = q.as_slice();
        let mut scored: Vec<(f64, usize)> =
            (0..self.len()).map(|i| (squared_distance(q, self.embedding(i)), i)).collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_unstable_by(cmp);
        Ok(NeighborList {
            query_id: None,
            neighbors: scored.into_iter().map(|(distance, i)| Neighbor { id: self.ids[i].clone(), distance }).collect(),
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 4 + self.len() * 32);
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        for i in 0..self.len() {
            put_str(&mut out, &self.ids[i]);
            let label = &self.labels[i];
            put_str(&mut out, label.disease.as_ref().map_or("", |d| d.as_str()));
            put_str(&mut out, label.group.as_deref().unwrap_or(""));
            for &v in self.embedding(i) {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "index file");
        let magic = r.take(8)?;
        if magic != INDEX_MAGIC {
            return Err(Error::Format(format!("bad index magic {:?}", String::from_utf8_lossy(magic))));
        }
        let dim = r.u32()? as usize;
        let n = r.u32()? as usize;
        if dim == 0 {
            return Err(Error::Corrupt("index dimension is zero".into()));
        }
        let mut index = Self::new(dim)?;
        let mut seen = BTreeSet::new();
        for _ in 0..n {
            let id = r.string()?;
            let disease = r.string()?;
            let group = r.string()?;
            let label = HierLabel {
                disease: if disease.is_empty() {
                    None
                } else {
                    Some(disease.parse().map_err(|_| Error::Corrupt(format!("{id}: bad disease {disease:?}")))?)
                },
                group: (!group.is_empty()).then_some(group),
            };
            let values = (0..dim).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
            if !seen.insert(id.clone()) {
                return Err(Error::DuplicateId(id));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Corrupt(format!("{id}: non-finite embedding")));
            }
            index.ids.push(id);
            index.labels.push(label);
            index.data.extend(values);
        }
        r.finish()?;
        Ok(index)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

/// Fraction of neighbors whose disease is the positive class.
pub fn melanoma_score(neighbors: &NeighborList, labels: &LabelMap) -> Result<f64> {
    if neighbors.is_empty() {
        return Err(rejected("empty neighbor list"));
    }
    let mut positive = 0usize;
    for id in neighbors.ids() {
        if lookup(labels, id)?.disease.as_ref().is_some_and(|d| d.is_positive()) {
            positive += 1;
        }
    }
    Ok(positive as f64 / neighbors.len() as f64)
}
