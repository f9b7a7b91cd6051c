use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DEFAULT_TAXONOMY: &str = include_str!("../../assets/taxonomy.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    WholeBody,
    GarmentPart,
}

/// Declared category lists. `drop` must be a subset of `parts`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub whole_body: Vec<String>,
    pub parts: Vec<String>,
    #[serde(default)]
    pub drop: Vec<String>,
}

impl Default for Taxonomy {
    fn default() -> Self {
        Self::from_toml_str(DEFAULT_TAXONOMY).expect("bundled taxonomy is valid")
    }
}

impl Taxonomy {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let t: Taxonomy = toml::from_str(s)?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn validate(&self) -> Result<()> {
        let whole: BTreeSet<&str> = self.whole_body.iter().map(String::as_str).collect();
        let parts: BTreeSet<&str> = self.parts.iter().map(String::as_str).collect();
        if whole.len() != self.whole_body.len() || parts.len() != self.parts.len() {
            return Err(Error::invalid("taxonomy", "duplicate category"));
        }
        if let Some(c) = whole.intersection(&parts).next() {
            return Err(Error::invalid("taxonomy", format!("`{c}` is both whole-body and part")));
        }
        if let Some(c) = self.drop.iter().find(|c| !parts.contains(c.as_str())) {
            return Err(Error::invalid("taxonomy.drop", format!("`{c}` is not a part category")));
        }
        if whole.is_empty() {
            return Err(Error::invalid("taxonomy.whole_body", "empty"));
        }
        Ok(())
    }

    pub fn level_of(&self, category: &str) -> Option<Level> {
        if self.whole_body.iter().any(|c| c == category) {
            Some(Level::WholeBody)
        } else if self.parts.iter().any(|c| c == category) {
            Some(Level::GarmentPart)
        } else {
            None
        }
    }

    pub fn is_dropped(&self, category: &str) -> bool {
        self.drop.iter().any(|c| c == category)
    }
}
