use std::path::Path;

use serde::{Deserialize, Serialize};

use super::cluster::ClusterAssignment;
use crate::error::{Error, Result};
use crate::io::CsvDoc;
use crate::matrix::Matrix;

/// Mean channel contribution of every surviving cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterHeatmap {
    pub cluster_ids: Vec<i64>,
    pub markers: Vec<String>,
    pub sizes: Vec<usize>,
    /// One row per cluster, one column per marker.
    pub values: Matrix,
    /// Cells left out because they are unknown.
    pub unknown_count: usize,
}

impl ClusterHeatmap {
    pub fn len(&self) -> usize {
        self.cluster_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cluster_ids.is_empty()
    }

    /// Marker with the largest mean contribution for every cluster (first
    /// marker on ties).
    pub fn argmax_markers(&self) -> Vec<&str> {
        self.values
            .iter_rows()
            .map(|row| {
                let best = (0..row.len()).fold(0, |b, g| if row[g] > row[b] { g } else { b });
                self.markers[best].as_str()
            })
            .collect()
    }

    /// Suggested marker per cluster: the marker whose contribution departs
    /// furthest from its mean over clusters, in units of that marker's
    /// standard deviation over clusters. Contributions of different groups
    /// have unrelated offsets and a learned sign, so the raw row maximum says
    /// little. Falls back to [`Self::argmax_markers`] when no marker varies.
    pub fn suggested_markers(&self) -> Vec<&str> {
        let (k, g) = (self.values.rows, self.values.cols);
        let mut stats = Vec::with_capacity(g);
        for j in 0..g {
            let col: Vec<f64> = (0..k).map(|i| self.values.row(i)[j] as f64).collect();
            let mean = col.iter().sum::<f64>() / k.max(1) as f64;
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k.max(1) as f64).sqrt();
            stats.push((mean, sd));
        }
        if stats.iter().all(|&(_, sd)| sd <= 0.0) {
            return self.argmax_markers();
        }
        self.values
            .iter_rows()
            .map(|row| {
                let score = |j: usize| {
                    let (mean, sd) = stats[j];
                    if sd > 0.0 {
                        ((row[j] as f64 - mean) / sd).abs()
                    } else {
                        0.0
                    }
                };
                let best = (0..g).fold(0, |b, j| if score(j) > score(b) { j } else { b });
                self.markers[best].as_str()
            })
            .collect()
    }

    /// Size-weighted mean over clusters, i.e. the mean contribution over all
    /// known cells.
    pub fn global_mean(&self) -> Vec<f64> {
        let total: usize = self.sizes.iter().sum();
        let mut out = vec![0.0; self.markers.len()];
        for (row, &n) in self.values.iter_rows().zip(&self.sizes) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v as f64 * n as f64;
            }
        }
        out.iter().map(|v| v / total.max(1) as f64).collect()
    }

    /// CSV with `cluster,size,suggested_marker` followed by one column per
    /// marker.
    pub fn write_csv(&self, path: &Path, run_hash: Option<&str>) -> Result<()> {
        let mut header = vec!["cluster", "size", "suggested_marker"];
        header.extend(self.markers.iter().map(String::as_str));
        let mut doc = CsvDoc::new(run_hash, &header)?;
        for (((id, n), row), m) in self.cluster_ids.iter().zip(&self.sizes).zip(self.values.iter_rows()).zip(self.suggested_markers()) {
            let mut rec = vec![id.to_string(), n.to_string(), m.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            doc.row(&rec)?;
        }
        doc.save(path)
    }
}

/// Averages `contributions` (one row per cell) over the members of every
/// cluster with id `>= 0`. Unknown cells are excluded.
pub fn cluster_heatmap(assignment: &ClusterAssignment, contributions: &Matrix, markers: &[String]) -> Result<ClusterHeatmap> {
    if contributions.rows != assignment.labels.len() {
        return Err(Error::Shape(format!(
            "{} contribution rows for {} cells",
            contributions.rows,
            assignment.labels.len()
        )));
    }
    if contributions.cols != markers.len() {
        return Err(Error::Shape(format!("{} contribution columns for {} markers", contributions.cols, markers.len())));
    }
    contributions.ensure_finite("contributions")?;
    let k = assignment.num_clusters();
    let g = markers.len();
    let mut sums = vec![0.0f64; k * g];
    let mut sizes = vec![0usize; k];
    for (row, &l) in contributions.iter_rows().zip(&assignment.labels) {
        if l < 0 {
            continue;
        }
        let l = l as usize;
        sizes[l] += 1;
        for (s, &v) in sums[l * g..(l + 1) * g].iter_mut().zip(row) {
            *s += v as f64;
        }
    }
    // ids are dense, but an id may have no members if the assignment was
    // edited by hand
    let kept: Vec<usize> = (0..k).filter(|&c| sizes[c] > 0).collect();
    if kept.is_empty() {
        log::warn!("no surviving clusters; the heatmap is empty");
    }
    let data = kept
        .iter()
        .flat_map(|&c| {
            let n = sizes[c] as f64;
            sums[c * g..(c + 1) * g].iter().map(move |s| (s / n) as f32)
        })
        .collect();
    Ok(ClusterHeatmap {
        cluster_ids: kept.iter().map(|&c| c as i64).collect(),
        markers: markers.to_vec(),
        sizes: kept.iter().map(|&c| sizes[c]).collect(),
        values: Matrix::new(kept.len(), g, data)?,
        unknown_count: assignment.unknown_count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phenotype::UNKNOWN;
    use proptest::prelude::*;

    fn assignment(labels: Vec<i64>) -> ClusterAssignment {
        ClusterAssignment {
            labels,
            k_used: 8,
            algorithm: "test".into(),
            seed: 0,
            detected: 0,
        }
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("m{i}")).collect()
    }

    #[test]
    fn two_cells_average() {
        let c = Matrix::from_rows(&[vec![1.0, 0.0], vec![3.0, 0.0]]).unwrap();
        let h = cluster_heatmap(&assignment(vec![0, 0]), &c, &names(2)).unwrap();
        assert_eq!(h.values.data, vec![2.0, 0.0]);
        assert_eq!(h.argmax_markers(), vec!["m0"]);
    }

    #[test]
    fn unknown_cells_are_excluded_and_counted() {
        let c = Matrix::from_rows(&[vec![1.0, 5.0], vec![100.0, 0.0], vec![0.0, 3.0]]).unwrap();
        let h = cluster_heatmap(&assignment(vec![0, UNKNOWN, 1]), &c, &names(2)).unwrap();
        assert_eq!(h.values.data, vec![1.0, 5.0, 0.0, 3.0]);
        assert_eq!(h.unknown_count, 1);
        assert_eq!(h.argmax_markers(), vec!["m1", "m1"]);
    }

    #[test]
    fn suggestion_follows_the_largest_departure() {
        // group offsets dominate the raw values; marker 1 responds with the
        // opposite sign in cluster 1
        let c = Matrix::from_rows(&[vec![5.0, 1.0, 0.2], vec![5.0, 0.8, 0.2], vec![5.0, 1.0, 0.3], vec![4.0, 1.0, 0.2]]).unwrap();
        let h = cluster_heatmap(&assignment(vec![0, 1, 2, 3]), &c, &names(3)).unwrap();
        assert_eq!(h.argmax_markers(), vec!["m0"; 4]);
        assert_eq!(h.suggested_markers(), vec!["m0", "m1", "m2", "m0"]);
        // cluster 0 sits at the baseline everywhere: all scores tie at 1/sqrt(3)
        let flat = Matrix::from_rows(&[vec![1.0, 3.0], vec![1.0, 3.0]]).unwrap();
        let h = cluster_heatmap(&assignment(vec![0, 1]), &flat, &names(2)).unwrap();
        assert_eq!(h.suggested_markers(), vec!["m1", "m1"]);
    }

    /// A T-cell-like cluster among others, with contributions that track
    /// the mean marker intensity of synthetic cells.
    #[test]
    fn t_cell_like_row_peaks_at_the_cd3_analog() {
        use crate::baseline::cell_features;
        use crate::data::{synth_generate, MarkerPanel, SynthConfig};
        let panel = MarkerPanel::default_prefix(8).unwrap();
        let cfg = SynthConfig { num_images: 1, image_size: 256, cells_per_image: 200, seed: 3, ..SynthConfig::default() };
        let ds = synth_generate(&cfg, &panel).unwrap();
        let masks: Vec<_> = ds.masks.iter().cloned().map(Some).collect();
        let f = cell_features(&ds.images, &masks, &ds.records).unwrap();
        let types: Vec<&str> = cfg.types.iter().map(|t| t.name.as_str()).collect();
        let labels: Vec<i64> = f
            .cells
            .iter()
            .map(|&i| types.iter().position(|t| Some(*t) == ds.records[i].label.as_deref()).unwrap() as i64)
            .collect();
        let h = cluster_heatmap(&assignment(labels), &f.features, panel.names()).unwrap();
        let t = types.iter().position(|t| t.starts_with("T cells")).unwrap();
        assert_eq!(panel.names()[0], "CD3");
        assert_eq!(h.argmax_markers()[t], "CD3");
        assert_eq!(h.suggested_markers()[t], "CD3");
    }

    #[test]
    fn all_unknown_gives_empty_heatmap() {
        let c = Matrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let h = cluster_heatmap(&assignment(vec![UNKNOWN, UNKNOWN]), &c, &names(1)).unwrap();
        assert!(h.is_empty());
        assert_eq!(h.values.rows, 0);
    }

    #[test]
    fn misaligned_inputs_are_rejected() {
        let c = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(cluster_heatmap(&assignment(vec![0, 0]), &c, &names(2)).is_err());
        assert!(cluster_heatmap(&assignment(vec![0]), &c, &names(3)).is_err());
    }

    #[test]
    fn csv_has_suggestion_column() {
        let dir = tempfile::tempdir().unwrap();
        let c = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let h = cluster_heatmap(&assignment(vec![0]), &c, &["CD3".into(), "CD20".into()]).unwrap();
        let p = dir.path().join("h.csv");
        h.write_csv(&p, None).unwrap();
        assert_eq!(std::fs::read_to_string(p).unwrap(), "cluster,size,suggested_marker,CD3,CD20\n0,1,CD20,1,2\n");
    }

    proptest! {
        #[test]
        fn global_mean_matches_known_cells(labels in prop::collection::vec(-1i64..4, 1..60), seed in any::<u32>()) {
            let g = 3;
            let data: Vec<f32> = (0..labels.len() * g).map(|i| ((i as u32 ^ seed).wrapping_mul(2654435761) % 1000) as f32 / 100.0).collect();
            let c = Matrix::new(labels.len(), g, data).unwrap();
            let a = assignment(labels.clone());
            let h = cluster_heatmap(&a, &c, &names(g)).unwrap();
            let known: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] >= 0).collect();
            let gm = h.global_mean();
            for j in 0..g {
                let direct = known.iter().map(|&i| c.row(i)[j] as f64).sum::<f64>() / known.len().max(1) as f64;
                prop_assert!((gm[j] - direct).abs() < 1e-4, "{} vs {}", gm[j], direct);
            }
            prop_assert_eq!(h.unknown_count + h.sizes.iter().sum::<usize>(), labels.len());
        }
    }
}
