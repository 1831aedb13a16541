//! Dataset manifest: per-image original dimensions and split assignment.
//! Serialization is deterministic (sorted keys, no timestamps) so a rerun
//! with identical inputs produces identical bytes.

use crate::error::Result;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    Unlabeled,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub original_height: usize,
    pub original_width: usize,
    pub split: Split,
    pub labeled: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub side: usize,
    pub seed: u64,
    pub config_hash: String,
    pub entries: BTreeMap<String, ManifestEntry>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn names_in_split(&self, split: Split) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.split == split)
            .map(|(name, _)| name.clone())
            .collect()
    }
}
