use serde::{Deserialize, Serialize};

use super::cluster::{cluster, ClusterAssignment, ClusterConfig};
use super::heatmap::{cluster_heatmap, ClusterHeatmap};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Clustering of the members of one cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subclustering {
    pub parent: i64,
    /// Row indices of the members in the full dataset.
    pub members: Vec<usize>,
    /// One label per member.
    pub assignment: ClusterAssignment,
    pub heatmap: ClusterHeatmap,
}

/// Size rule for a cluster of `n` cells out of `total`: the top-level
/// minimum scaled by the cluster's share, but at least 10.
pub fn scaled_min_size(min_size: usize, n: usize, total: usize) -> usize {
    let scaled = (min_size as f64 * n as f64 / total.max(1) as f64).ceil() as usize;
    scaled.max(10)
}

/// Reclusters the members of `cluster_id` with `cfg` (its `k` is used for
/// the new graph) and the scaled size rule.
pub fn subcluster(
    embeddings: &Matrix,
    contributions: &Matrix,
    markers: &[String],
    assignment: &ClusterAssignment,
    cluster_id: i64,
    cfg: &ClusterConfig,
) -> Result<Subclustering> {
    if embeddings.rows != assignment.labels.len() {
        return Err(Error::Shape(format!(
            "{} embeddings for {} labels",
            embeddings.rows,
            assignment.labels.len()
        )));
    }
    if cluster_id < 0 || cluster_id as usize >= assignment.num_clusters() {
        return Err(Error::Contract(format!("cluster {cluster_id} is not a surviving cluster")));
    }
    let members = assignment.members(cluster_id);
    if members.len() < 2 * cfg.k {
        return Err(Error::Contract(format!(
            "cluster {cluster_id} has {} members; subclustering with k = {} needs at least {}",
            members.len(),
            cfg.k,
            2 * cfg.k
        )));
    }
    let sub_cfg = ClusterConfig {
        min_cluster_size: scaled_min_size(cfg.min_cluster_size, members.len(), assignment.labels.len()),
        ..cfg.clone()
    };
    let sub = cluster(&embeddings.select_rows(&members), &sub_cfg)?;
    let heatmap = cluster_heatmap(&sub, &contributions.select_rows(&members), markers)?;
    Ok(Subclustering {
        parent: cluster_id,
        members,
        assignment: sub,
        heatmap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phenotype::cluster::tests::blobs;
    use crate::phenotype::{adjusted_rand_index, UNKNOWN};

    fn parent(labels: Vec<i64>) -> ClusterAssignment {
        ClusterAssignment {
            labels,
            k_used: 8,
            algorithm: "test".into(),
            seed: 0,
            detected: 0,
        }
    }

    #[test]
    fn scaled_rule() {
        assert_eq!(scaled_min_size(50, 2000, 10000), 10);
        assert_eq!(scaled_min_size(50, 5000, 10000), 25);
        assert_eq!(scaled_min_size(50, 5001, 10000), 26);
    }

    /// Cluster 0 holds two variants, cluster 1 one homogeneous population.
    fn fixture() -> (Matrix, Vec<usize>) {
        let centres = vec![vec![4.0, 0.0, 0.0, 1.0], vec![4.0, 0.0, 0.0, -1.0], vec![0.0, 4.0, 0.0, 0.0]];
        blobs(&centres, 150, 0.15, 9)
    }

    #[test]
    fn variants_split_and_homogeneous_stays_whole() {
        let (emb, truth) = fixture();
        let labels: Vec<i64> = truth.iter().map(|&t| if t < 2 { 0 } else { 1 }).collect();
        let contrib = emb.clone();
        let names: Vec<String> = (0..4).map(|i| format!("m{i}")).collect();
        let a = parent(labels);
        let cfg = ClusterConfig::default();

        let s = subcluster(&emb, &contrib, &names, &a, 0, &cfg).unwrap();
        assert_eq!(s.assignment.num_clusters(), 2);
        let t: Vec<usize> = s.members.iter().map(|&i| truth[i]).collect();
        assert!(adjusted_rand_index(&s.assignment.labels, &t).unwrap() >= 0.9);
        assert_eq!(s.heatmap.sizes.iter().sum::<usize>() + s.assignment.unknown_count(), 300);
        assert_eq!(s.heatmap.argmax_markers(), vec!["m0", "m0"]);

        let h = subcluster(&emb, &contrib, &names, &a, 1, &cfg).unwrap();
        assert_eq!(h.assignment.num_clusters(), 1);
        assert_eq!(h.members.len(), 150);
    }

    #[test]
    fn small_or_missing_clusters_are_rejected() {
        let (emb, _) = fixture();
        let mut labels = vec![0i64; emb.rows];
        labels[..15].fill(1);
        labels[15..20].fill(UNKNOWN);
        let a = parent(labels);
        let names: Vec<String> = (0..4).map(|i| format!("m{i}")).collect();
        let cfg = ClusterConfig::default();
        assert!(matches!(subcluster(&emb, &emb, &names, &a, 1, &cfg), Err(Error::Contract(_))));
        assert!(subcluster(&emb, &emb, &names, &a, UNKNOWN, &cfg).is_err());
        assert!(subcluster(&emb, &emb, &names, &a, 2, &cfg).is_err());
    }
}
