//! Figures and tables: projections, heatmaps, confusion matrices and
//! per-cluster galleries.

mod project;
mod render;

pub use project::{project_2d, Projection, ProjectionConfig};
pub use render::{gallery_canvas, heatmap_canvas, png_run_hash, ramp, scatter_by_label, scatter_by_value, Canvas, Scale, MARKER_COLOURS, PALETTE};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::phenotype::ClusterAssignment;

/// For every surviving cluster, the `s` members closest to the cluster
/// centroid in embedding space, nearest first (ties by row index).
pub fn gallery_members(embeddings: &Matrix, assignment: &ClusterAssignment, s: usize) -> Result<Vec<Vec<usize>>> {
    if embeddings.rows != assignment.labels.len() {
        return Err(Error::Shape(format!(
            "{} embeddings for {} labels",
            embeddings.rows,
            assignment.labels.len()
        )));
    }
    let d = embeddings.cols;
    Ok((0..assignment.num_clusters() as i64)
        .map(|c| {
            let members = assignment.members(c);
            let mut centroid = vec![0.0f64; d];
            for &i in &members {
                for (m, &v) in centroid.iter_mut().zip(embeddings.row(i)) {
                    *m += v as f64;
                }
            }
            centroid.iter_mut().for_each(|m| *m /= members.len().max(1) as f64);
            let mut scored: Vec<(f64, usize)> = members
                .iter()
                .map(|&i| {
                    let dist: f64 = embeddings.row(i).iter().zip(&centroid).map(|(&v, m)| (v as f64 - m).powi(2)).sum();
                    (dist, i)
                })
                .collect();
            scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            scored.into_iter().take(s).map(|(_, i)| i).collect()
        })
        .collect())
}
