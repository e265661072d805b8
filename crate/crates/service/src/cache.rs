//! Bounded cache of recent query embeddings, keyed by query handle.

use std::num::NonZeroUsize;
use std::time::{Duration, Instant};

use derm_core::data::RgbImage;
use derm_core::model::EmbeddingOutput;
use lru::LruCache;

pub const DEFAULT_CAPACITY: usize = 256;
pub const DEFAULT_TTL: Duration = Duration::from_secs(15 * 60);

#[derive(Clone, Debug)]
pub struct CachedQuery {
    pub output: EmbeddingOutput,
    /// The query image, used as the base layer of the query heatmap.
    pub image: RgbImage,
}

#[derive(Debug)]
pub struct QueryCache {
    entries: LruCache<String, (Instant, CachedQuery)>,
    ttl: Duration,
}

impl QueryCache {
    pub fn new(capacity: usize, ttl: Duration) -> Self {
        Self { entries: LruCache::new(NonZeroUsize::new(capacity.max(1)).expect("non-zero")), ttl }
    }

    /// Inserting an existing handle refreshes its age.
    pub fn insert(&mut self, handle: String, query: CachedQuery) {
        self.entries.put(handle, (Instant::now(), query));
    }

    /// A live entry, or `None` once evicted or older than the TTL.
    pub fn get(&mut self, handle: &str) -> Option<CachedQuery> {
        let expired = match self.entries.get(handle) {
            None => return None,
            Some((at, _)) => at.elapsed() > self.ttl,
        };
        if expired {
            self.entries.pop(handle);
            return None;
        }
        self.entries.get(handle).map(|(_, q)| q.clone())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
