use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::enrich::PromptStyle;
use crate::error::{Error, Result};

/// One line of the description cache file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptionRecord {
    pub label: String,
    pub style: PromptStyle,
    pub generator: String,
    pub description: String,
    #[serde(default)]
    pub timestamp: u64,
}

type Key = (String, PromptStyle, String);

/// Append-only store of generated label descriptions keyed by
/// (label, style, generator id). Optionally backed by a JSON-lines file
/// that every accepted insert is appended to.
#[derive(Debug, Clone, Default)]
pub struct DescriptionCache {
    entries: BTreeMap<Key, DescriptionRecord>,
    path: Option<PathBuf>,
}

impl DescriptionCache {
    /// Loads `path` if it exists; later inserts are appended to it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut cache = Self::default();
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            for line in reader.lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                cache.insert_in_memory(serde_json::from_str(&line)?)?;
            }
        }
        cache.path = Some(path);
        Ok(cache)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &DescriptionRecord> {
        self.entries.values()
    }

    pub fn get(&self, label: &str, style: PromptStyle, generator: &str) -> Option<&DescriptionRecord> {
        self.entries.get(&(label.to_string(), style, generator.to_string()))
    }

    /// Description for (label, style). With no generator given, the entry of
    /// the lexicographically first generator is used.
    pub fn lookup(&self, label: &str, style: PromptStyle, generator: Option<&str>) -> Option<&str> {
        match generator {
            Some(g) => self.get(label, style, g).map(|r| r.description.as_str()),
            None => {
                self.entries.values().find(|r| r.label == label && r.style == style).map(|r| r.description.as_str())
            }
        }
    }

    fn insert_in_memory(&mut self, record: DescriptionRecord) -> Result<()> {
        let key = (record.label.clone(), record.style, record.generator.clone());
        if self.entries.contains_key(&key) {
            return Err(Error::CacheConflict(format!("{}/{}/{}", key.0, key.1, key.2)));
        }
        self.entries.insert(key, record);
        Ok(())
    }

    /// Adds a record; an existing key is an error, never an overwrite.
    pub fn insert(&mut self, record: DescriptionRecord) -> Result<()> {
        let line = serde_json::to_string(&record)?;
        self.insert_in_memory(record)?;
        if let Some(path) = &self.path {
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            writeln!(f, "{line}")?;
            f.flush()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(label: &str, text: &str) -> DescriptionRecord {
        DescriptionRecord {
            label: label.into(),
            style: PromptStyle::Original,
            generator: "g".into(),
            description: text.into(),
            timestamp: 0,
        }
    }

    #[test]
    fn no_silent_overwrite() {
        let mut c = DescriptionCache::default();
        c.insert(rec("lotus", "a")).unwrap();
        assert!(matches!(c.insert(rec("lotus", "b")), Err(Error::CacheConflict(_))));
        assert_eq!(c.lookup("lotus", PromptStyle::Original, None), Some("a"));
    }

    #[test]
    fn persists_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("desc.jsonl");
        {
            let mut c = DescriptionCache::open(&path).unwrap();
            c.insert(rec("lotus", "large, round, flat leaves")).unwrap();
            c.insert(rec("rose", "thorny")).unwrap();
        }
        let c = DescriptionCache::open(&path).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.lookup("rose", PromptStyle::Original, Some("g")), Some("thorny"));
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 2);
    }
}
