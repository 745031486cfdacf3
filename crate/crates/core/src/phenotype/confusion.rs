use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::labels::UNKNOWN_PHENOTYPE;
use crate::error::{Error, Result};
use crate::io::CsvDoc;

/// Row-normalized confusion matrix: entry `(i, j)` is the fraction of
/// reference class `i` assigned phenotype `j`. Rows and columns share one
/// class list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<usize>>,
    pub fractions: Vec<Vec<f64>>,
    /// Classes that never occur in the reference; their rows are all zero.
    pub zero_rows: Vec<String>,
    /// Cells left out because either label is unknown.
    pub excluded_unknown: usize,
}

impl ConfusionMatrix {
    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.classes.len()).map(|i| self.fractions[i][i]).collect()
    }

    pub fn write_csv(&self, path: &Path, run_hash: Option<&str>) -> Result<()> {
        let mut header = vec!["reference"];
        header.extend(self.classes.iter().map(String::as_str));
        header.push("support");
        let mut doc = CsvDoc::new(run_hash, &header)?;
        for (i, c) in self.classes.iter().enumerate() {
            let mut rec = vec![c.clone()];
            rec.extend(self.fractions[i].iter().map(|v| v.to_string()));
            rec.push(self.counts[i].iter().sum::<usize>().to_string());
            doc.row(&rec)?;
        }
        doc.save(path)
    }
}

/// Builds the confusion matrix of `predicted` phenotypes against
/// `reference` labels. `mapping` renames reference labels into the
/// phenotype vocabulary; without one the two label sets must overlap.
/// Classes follow `order` first, then sort by name.
pub fn confusion_matrix<R: AsRef<str>, P: AsRef<str>>(
    reference: &[R],
    predicted: &[P],
    mapping: Option<&BTreeMap<String, String>>,
    order: &[String],
) -> Result<ConfusionMatrix> {
    if reference.len() != predicted.len() {
        return Err(Error::Shape(format!("{} reference labels, {} predictions", reference.len(), predicted.len())));
    }
    let mut refs = Vec::with_capacity(reference.len());
    for r in reference {
        let r = r.as_ref();
        refs.push(match mapping {
            Some(m) => m
                .get(r)
                .cloned()
                .ok_or_else(|| Error::Data(format!("reference label `{r}` is missing from the mapping")))?,
            None => r.to_string(),
        });
    }
    let is_unknown = |s: &str| s == UNKNOWN_PHENOTYPE;
    let ref_set: BTreeSet<&str> = refs.iter().map(String::as_str).filter(|s| !is_unknown(s)).collect();
    let pred_set: BTreeSet<&str> = predicted.iter().map(|p| p.as_ref()).filter(|s| !is_unknown(s)).collect();
    if mapping.is_none() && !ref_set.is_empty() && !pred_set.is_empty() && ref_set.is_disjoint(&pred_set) {
        return Err(Error::Data(
            "reference and predicted labels share no class; an explicit reference-to-phenotype mapping is required".into(),
        ));
    }
    let all: BTreeSet<&str> = ref_set.union(&pred_set).copied().collect();
    let mut classes: Vec<String> = order.iter().filter(|c| all.contains(c.as_str())).cloned().collect();
    classes.extend(all.iter().filter(|c| !order.iter().any(|o| o == *c)).map(|c| c.to_string()));
    let index: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();

    let k = classes.len();
    let mut counts = vec![vec![0usize; k]; k];
    let mut excluded_unknown = 0;
    for (r, p) in refs.iter().zip(predicted) {
        let p = p.as_ref();
        if is_unknown(r) || is_unknown(p) {
            excluded_unknown += 1;
            continue;
        }
        counts[index[r.as_str()]][index[p]] += 1;
    }
    let mut zero_rows = Vec::new();
    let fractions = counts
        .iter()
        .zip(&classes)
        .map(|(row, c)| {
            let n: usize = row.iter().sum();
            if n == 0 {
                zero_rows.push(c.clone());
                return vec![0.0; k];
            }
            row.iter().map(|&x| x as f64 / n as f64).collect()
        })
        .collect();
    Ok(ConfusionMatrix {
        classes,
        counts,
        fractions,
        zero_rows,
        excluded_unknown,
    })
}
