//! Append-only relevance feedback log.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::ApiError;

pub const FEEDBACK_HEADER: &str = "timestamp_ms,session_id,query_id,result_id,verdict";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Relevant,
    Irrelevant,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackEvent {
    pub timestamp_ms: u64,
    pub session_id: String,
    pub query_id: String,
    pub result_id: String,
    pub verdict: Verdict,
}

#[derive(Debug, Default)]
pub struct FeedbackLog {
    events: Vec<FeedbackEvent>,
    file: Option<File>,
}

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

impl FeedbackLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Loads any events already in the file and appends new ones to it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, ApiError> {
        let path = path.as_ref();
        let mut events = Vec::new();
        let existing = path.is_file() && std::fs::metadata(path).map_err(ApiError::internal)?.len() > 0;
        if existing {
            let mut reader = csv::Reader::from_path(path).map_err(ApiError::internal)?;
            for row in reader.deserialize() {
                events.push(row.map_err(ApiError::internal)?);
            }
        }
        let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(ApiError::internal)?;
        if !existing {
            writeln!(file, "{FEEDBACK_HEADER}").map_err(ApiError::internal)?;
        }
        Ok(Self { events, file: Some(file) })
    }

    pub fn append(&mut self, event: FeedbackEvent) -> Result<(), ApiError> {
        if let Some(file) = self.file.as_mut() {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
            w.serialize(&event).map_err(ApiError::internal)?;
            let bytes = w.into_inner().map_err(|e| ApiError::internal(e.to_string()))?;
            file.write_all(&bytes).and_then(|_| file.flush()).map_err(ApiError::internal)?;
        }
        self.events.push(event);
        Ok(())
    }

    pub fn events(&self) -> &[FeedbackEvent] {
        &self.events
    }

    pub fn to_csv(&self) -> Result<String, ApiError> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        for e in &self.events {
            w.serialize(e).map_err(ApiError::internal)?;
        }
        let body = w.into_inner().map_err(|e| ApiError::internal(e.to_string()))?;
        Ok(format!("{FEEDBACK_HEADER}\n{}", String::from_utf8_lossy(&body)))
    }
}
