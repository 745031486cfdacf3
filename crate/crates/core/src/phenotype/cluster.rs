use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::graph::{jaccard_graph, knn, Graph};
use super::louvain::louvain;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Label of cells in clusters removed by the size rule.
pub const UNKNOWN: i64 = -1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    /// Neighbours per node in the kNN graph.
    pub k: usize,
    /// Clusters smaller than this become unknown.
    pub min_cluster_size: usize,
    /// Modularity resolution.
    pub resolution: f64,
    /// Resolution of the greedy modularity merge that follows community
    /// detection; 0 disables merging.
    pub merge_resolution: f64,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            k: 8,
            min_cluster_size: 50,
            resolution: 1.0,
            merge_resolution: 0.005,
            seed: 0,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("cluster.k", "must be positive"));
        }
        if !(self.resolution.is_finite() && self.resolution > 0.0) {
            return Err(Error::config("cluster.resolution", "must be finite and positive"));
        }
        if !(self.merge_resolution.is_finite() && self.merge_resolution >= 0.0) {
            return Err(Error::config("cluster.merge_resolution", "must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// Cluster label per cell; [`UNKNOWN`] marks cells of removed clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<i64>,
    pub k_used: usize,
    pub algorithm: String,
    pub seed: u64,
    /// Number of clusters before the size rule.
    pub detected: usize,
}

impl ClusterAssignment {
    /// Number of clusters with id `>= 0`.
    pub fn num_clusters(&self) -> usize {
        self.labels.iter().filter(|&&l| l >= 0).map(|&l| l as usize + 1).max().unwrap_or(0)
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.num_clusters()];
        for &l in &self.labels {
            if l >= 0 {
                s[l as usize] += 1;
            }
        }
        s
    }

    pub fn unknown_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == UNKNOWN).count()
    }

    pub fn members(&self, cluster: i64) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == cluster).collect()
    }
}

/// Relabels clusters with fewer than `min_size` members as [`UNKNOWN`] and
/// renumbers the rest `0..K'` by decreasing size (ties keep id order).
pub fn apply_unknown_rule(assignment: &ClusterAssignment, min_size: usize) -> ClusterAssignment {
    let mut sizes: BTreeMap<i64, usize> = BTreeMap::new();
    for &l in &assignment.labels {
        if l >= 0 {
            *sizes.entry(l).or_insert(0) += 1;
        }
    }
    let mut kept: Vec<(i64, usize)> = sizes.into_iter().filter(|&(_, n)| n >= min_size).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let map: HashMap<i64, i64> = kept.iter().enumerate().map(|(new, &(old, _))| (old, new as i64)).collect();
    ClusterAssignment {
        labels: assignment.labels.iter().map(|l| *map.get(l).unwrap_or(&UNKNOWN)).collect(),
        ..assignment.clone()
    }
}

/// Order in which rows are processed, derived from their content and the
/// seed so that the result does not depend on the input order.
fn canonical_order(points: &Matrix, seed: u64) -> Vec<usize> {
    let keys: Vec<[u8; 32]> = points
        .iter_rows()
        .map(|r| {
            let mut h = Sha256::new();
            h.update(seed.to_le_bytes());
            for v in r {
                h.update(v.to_le_bytes());
            }
            h.finalize().into()
        })
        .collect();
    let mut order: Vec<usize> = (0..points.rows).collect();
    order.sort_by(|&a, &b| keys[a].cmp(&keys[b]).then(a.cmp(&b)));
    order
}

/// Greedy agglomeration of communities by modularity at resolution
/// `gamma`: repeatedly joins the pair with the largest gain
/// `W_ab / m - gamma vol_a vol_b / (2 m^2)` while it is positive. Because the
/// null model scales with the total volume, pairs joined in a large graph can
/// stay apart when the same cells are clustered on their own.
pub fn merge_communities(g: &Graph, labels: &[usize], gamma: f64) -> Vec<usize> {
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut vol = vec![0.0f64; k];
    let mut between: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for i in 0..g.len() {
        vol[labels[i]] += g.degree(i);
        for &(j, w) in &g.adj[i] {
            let (a, b) = (labels[i], labels[j]);
            if a < b {
                *between.entry((a, b)).or_insert(0.0) += w;
            }
        }
    }
    let m2: f64 = vol.iter().sum();
    let mut parent: Vec<usize> = (0..k).collect();
    if m2 > 0.0 {
        loop {
            let mut best: Option<((usize, usize), f64)> = None;
            for (&(a, b), &w) in &between {
                let gain = w - gamma * vol[a] * vol[b] / m2;
                if gain > 0.0 && best.is_none_or(|(_, bg)| gain > bg) {
                    best = Some(((a, b), gain));
                }
            }
            let Some(((a, b), _)) = best else { break };
            // fold b into a
            vol[a] += vol[b];
            let moved: Vec<((usize, usize), f64)> = between
                .iter()
                .filter(|(&(x, y), _)| x == b || y == b)
                .map(|(&e, &w)| (e, w))
                .collect();
            for (e, w) in moved {
                between.remove(&e);
                let other = if e.0 == b { e.1 } else { e.0 };
                if other != a {
                    *between.entry((a.min(other), a.max(other))).or_insert(0.0) += w;
                }
            }
            parent[b] = a;
        }
    }
    let root = |mut x: usize| {
        while parent[x] != x {
            x = parent[x];
        }
        x
    };
    let roots: Vec<usize> = (0..k).map(root).collect();
    let mut map = HashMap::new();
    labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(roots[l]).or_insert(next)
        })
        .collect()
}

/// kNN graph, Jaccard weighting, Louvain, optional merging and the unknown
/// rule. Rows are processed in a content-derived order, so permuting the
/// input permutes the output labels only.
pub fn cluster(points: &Matrix, cfg: &ClusterConfig) -> Result<ClusterAssignment> {
    cfg.validate()?;
    let order = canonical_order(points, cfg.seed);
    let canon = points.select_rows(&order);
    let graph = jaccard_graph(&knn(&canon, cfg.k)?);
    let mut comm = louvain(&graph, cfg.resolution, cfg.seed);
    if cfg.merge_resolution > 0.0 {
        comm = merge_communities(&graph, &comm, cfg.merge_resolution);
    }
    let detected = comm.iter().copied().max().map_or(0, |m| m + 1);
    let mut labels = vec![0i64; points.rows];
    for (pos, &orig) in order.iter().enumerate() {
        labels[orig] = comm[pos] as i64;
    }
    let raw = ClusterAssignment {
        labels,
        k_used: cfg.k,
        algorithm: format!(
            "knn-jaccard-louvain(resolution={}, merge_resolution={})",
            cfg.resolution, cfg.merge_resolution
        ),
        seed: cfg.seed,
        detected,
    };
    Ok(apply_unknown_rule(&raw, cfg.min_cluster_size))
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index<A: Eq + Hash, B: Eq + Hash>(a: &[A], b: &[B]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("labelings have {} and {} items", a.len(), b.len())));
    }
    let n = a.len();
    let c2 = |x: usize| (x as f64) * (x as f64 - 1.0) / 2.0;
    let mut ia = HashMap::new();
    let mut ib = HashMap::new();
    let mut cells: HashMap<(usize, usize), usize> = HashMap::new();
    for (x, y) in a.iter().zip(b) {
        let na = ia.len();
        let xa = *ia.entry(x).or_insert(na);
        let nb = ib.len();
        let yb = *ib.entry(y).or_insert(nb);
        *cells.entry((xa, yb)).or_insert(0) += 1;
    }
    let mut ra = vec![0usize; ia.len()];
    let mut rb = vec![0usize; ib.len()];
    for (&(x, y), &c) in &cells {
        ra[x] += c;
        rb[y] += c;
    }
    let index: f64 = cells.values().map(|&c| c2(c)).sum();
    let sa: f64 = ra.iter().map(|&c| c2(c)).sum();
    let sb: f64 = rb.iter().map(|&c| c2(c)).sum();
    let expected = sa * sb / c2(n).max(f64::MIN_POSITIVE);
    let max = 0.5 * (sa + sb);
    if (max - expected).abs() < 1e-12 {
        // both labelings trivial in the same way
        return Ok(if index == max { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max - expected))
}
