use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSide {
    Id,
    Ood,
}

/// Disjoint in-distribution and out-of-distribution label sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    id_labels: Vec<String>,
    ood_labels: Vec<String>,
}

impl LabelSpace {
    pub fn new(id_labels: Vec<String>, ood_labels: Vec<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        for l in id_labels.iter().chain(&ood_labels) {
            if !seen.insert(l.as_str()) {
                return Err(if id_labels.contains(l) && ood_labels.contains(l) {
                    Error::OverlappingSplits(l.clone())
                } else {
                    Error::DuplicateId(l.clone())
                });
            }
        }
        Ok(Self { id_labels, ood_labels })
    }

    pub fn id_labels(&self) -> &[String] {
        &self.id_labels
    }

    pub fn ood_labels(&self) -> &[String] {
        &self.ood_labels
    }

    pub fn labels(&self, side: LabelSide) -> &[String] {
        match side {
            LabelSide::Id => &self.id_labels,
            LabelSide::Ood => &self.ood_labels,
        }
    }

    pub fn all(&self) -> impl Iterator<Item = &String> {
        self.id_labels.iter().chain(&self.ood_labels)
    }

    pub fn side(&self, label: &str) -> Option<LabelSide> {
        if self.id_labels.iter().any(|l| l == label) {
            Some(LabelSide::Id)
        } else if self.ood_labels.iter().any(|l| l == label) {
            Some(LabelSide::Ood)
        } else {
            None
        }
    }
}

/// Position of `label` in `labels`.
pub fn label_index(labels: &[String], label: &str) -> Result<usize> {
    labels.iter().position(|l| l == label).ok_or_else(|| Error::UnknownLabel(label.to_string()))
}
