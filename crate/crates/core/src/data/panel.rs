use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;

/// Ordered marker names. The order defines channel order everywhere.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct MarkerPanel {
    names: Vec<String>,
}

const DEFAULT_MARKERS: [&str; 34] = [
    "CD3", "CD4", "CD8", "CD20", "GD2", "GZMB", "Vimentin", "S100B", "CD45", "CD45RA", "CD45RO", "CD11b",
    "CD11c", "CD14", "CD15", "CD16", "CD33", "CD34", "CD38", "CD56", "CD57", "CD66b", "CD68", "CD163",
    "HLA-DR", "FOXP3", "Ki-67", "PD-1", "PD-L1", "CD31", "SMA", "Collagen-I", "PHOX2B", "DNA",
];

impl MarkerPanel {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::config("panel", "at least one marker is required"));
        }
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            if n.trim().is_empty() {
                return Err(Error::config("panel", "marker names must be nonempty"));
            }
            if !seen.insert(n.as_str()) {
                return Err(Error::config("panel", format!("duplicate marker `{n}`")));
            }
        }
        Ok(Self { names })
    }

    /// The 34-marker default panel.
    pub fn default_panel() -> Self {
        Self::new(DEFAULT_MARKERS).expect("default panel is valid")
    }

    /// The first `n` markers of the default panel (`n <= 34`).
    pub fn default_prefix(n: usize) -> Result<Self> {
        if n == 0 || n > DEFAULT_MARKERS.len() {
            return Err(Error::config("panel", format!("default prefix length {n} outside 1..=34")));
        }
        Self::new(DEFAULT_MARKERS[..n].iter().copied())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Errors unless `other` is the same panel in the same order.
    pub fn ensure_same(&self, other: &MarkerPanel, what: &str) -> Result<()> {
        if self == other {
            return Ok(());
        }
        if self.len() != other.len() {
            return Err(Error::PanelMismatch(format!(
                "{what} has {} channels but the panel has {}",
                other.len(),
                self.len()
            )));
        }
        let i = self.names.iter().zip(&other.names).position(|(a, b)| a != b).unwrap_or(0);
        Err(Error::PanelMismatch(format!(
            "{what}: channel {i} is `{}`, expected `{}`",
            other.names[i], self.names[i]
        )))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

impl Default for MarkerPanel {
    fn default() -> Self {
        Self::default_panel()
    }
}

impl TryFrom<Vec<String>> for MarkerPanel {
    type Error = Error;
    fn try_from(v: Vec<String>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<MarkerPanel> for Vec<String> {
    fn from(p: MarkerPanel) -> Self {
        p.names
    }
}
