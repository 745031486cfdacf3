//! Cluster to phenotype mapping supplied by the analyst.
//!
//! The label-map file has one `cluster_id: phenotype` entry per line. Blank
//! lines and lines starting with `#` are ignored.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::cluster::{ClusterAssignment, UNKNOWN};
use super::heatmap::ClusterHeatmap;
use crate::error::{Error, Result};
use crate::io::{write_atomic, CsvDoc};

pub const UNKNOWN_PHENOTYPE: &str = "unknown";

pub fn default_vocabulary() -> Vec<String> {
    ["MO/DC/NK", "tumor", "B cells", "T cells", "progenitors", "granulocytes", "other", UNKNOWN_PHENOTYPE]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhenotypeMap {
    pub vocabulary: Vec<String>,
    pub map: BTreeMap<i64, String>,
}

impl PhenotypeMap {
    /// Parses label-map text. Every name must belong to `vocabulary`, which
    /// always contains `unknown`.
    pub fn parse(text: &str, vocabulary: &[String]) -> Result<Self> {
        let mut vocabulary = vocabulary.to_vec();
        if !vocabulary.iter().any(|v| v == UNKNOWN_PHENOTYPE) {
            vocabulary.push(UNKNOWN_PHENOTYPE.into());
        }
        let mut map = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |why: &str| Error::Data(format!("label map line {}: {why}: `{line}`", n + 1));
            let (id, name) = line.split_once(':').ok_or_else(|| bad("expected `cluster_id: phenotype`"))?;
            let id: i64 = id.trim().parse().map_err(|_| bad("cluster id is not an integer"))?;
            // allow a trailing comment after the name
            let name = name.split('#').next().unwrap_or("").trim();
            if !vocabulary.iter().any(|v| v == name) {
                return Err(bad(&format!("`{name}` is not in the vocabulary {vocabulary:?}")));
            }
            if id < UNKNOWN || (id == UNKNOWN && name != UNKNOWN_PHENOTYPE) {
                return Err(bad("cluster -1 can only map to unknown"));
            }
            if map.insert(id, name.to_string()).is_some() {
                return Err(bad("cluster listed twice"));
            }
        }
        map.insert(UNKNOWN, UNKNOWN_PHENOTYPE.into());
        Ok(Self { vocabulary, map })
    }

    pub fn load(path: &Path, vocabulary: &[String]) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::parse(&std::fs::read_to_string(path)?, vocabulary)
    }

    /// Checks that every surviving cluster has a phenotype.
    pub fn ensure_total(&self, assignment: &ClusterAssignment) -> Result<()> {
        let missing: Vec<usize> = (0..assignment.num_clusters()).filter(|&c| !self.map.contains_key(&(c as i64))).collect();
        if !missing.is_empty() {
            return Err(Error::Data(format!("label map has no phenotype for clusters {missing:?}")));
        }
        Ok(())
    }

    pub fn phenotype(&self, cluster: i64) -> Option<&str> {
        self.map.get(&cluster).map(String::as_str)
    }

    /// Phenotype of every cell.
    pub fn assign<'a>(&'a self, assignment: &ClusterAssignment) -> Result<Vec<&'a str>> {
        self.ensure_total(assignment)?;
        Ok(assignment
            .labels
            .iter()
            .map(|l| self.phenotype(*l).unwrap_or(UNKNOWN_PHENOTYPE))
            .collect())
    }
}

/// Label-map skeleton for the analyst to fill in: every cluster maps to
/// `unknown`, with its size and suggested marker as a comment.
pub fn write_label_template(path: &Path, heatmap: &ClusterHeatmap) -> Result<()> {
    let mut text = String::from("# cluster_id: phenotype\n");
    for ((id, n), m) in heatmap.cluster_ids.iter().zip(&heatmap.sizes).zip(heatmap.suggested_markers()) {
        text.push_str(&format!("{id}: {UNKNOWN_PHENOTYPE}  # {n} cells, suggested marker {m}\n"));
    }
    write_atomic(path, text.as_bytes())
}

/// Assignments CSV: `cell_id,cluster,phenotype`.
pub fn write_assignments(path: &Path, cell_ids: &[u64], assignment: &ClusterAssignment, phenotypes: Option<&[&str]>, run_hash: Option<&str>) -> Result<()> {
    if cell_ids.len() != assignment.labels.len() || phenotypes.is_some_and(|p| p.len() != cell_ids.len()) {
        return Err(Error::Shape("cell ids, labels and phenotypes differ in length".into()));
    }
    let mut doc = CsvDoc::new(run_hash, &["cell_id", "cluster", "phenotype"])?;
    for (i, (id, l)) in cell_ids.iter().zip(&assignment.labels).enumerate() {
        let p = phenotypes.map_or("", |p| p[i]);
        doc.row([id.to_string(), l.to_string(), p.to_string()])?;
    }
    doc.save(path)
}
