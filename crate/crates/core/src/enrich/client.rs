use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Anything that turns an instruction into text: an LLM for label
/// descriptions, a captioner for images (the request is the image reference).
pub trait TextGenerator {
    /// Recorded with every cached generation.
    fn id(&self) -> &str;

    fn generate(&self, request: &str) -> Result<String>;

    /// Timestamp stored alongside new cache entries.
    fn timestamp(&self) -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub request: String,
    pub response: String,
}

/// Replays recorded request -> response pairs from a JSON-lines file.
#[derive(Debug)]
pub struct FixtureClient {
    id: String,
    table: HashMap<String, String>,
    calls: AtomicUsize,
}

impl FixtureClient {
    pub fn new(id: impl Into<String>, records: impl IntoIterator<Item = FixtureRecord>) -> Self {
        Self {
            id: id.into(),
            table: records.into_iter().map(|r| (r.request, r.response)).collect(),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|_| Error::InputMissing(path.to_path_buf()))?;
        let mut records = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            records.push(serde_json::from_str::<FixtureRecord>(line)?);
        }
        let id = format!("fixture:{}", path.file_name().and_then(|n| n.to_str()).unwrap_or("fixture"));
        Ok(Self::new(id, records))
    }

    /// Number of `generate` calls so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl TextGenerator for FixtureClient {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, request: &str) -> Result<String> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.table
            .get(request)
            .cloned()
            .ok_or_else(|| Error::ClientUnavailable(format!("no recorded response for {request:?}")))
    }

    fn timestamp(&self) -> u64 {
        0
    }
}
