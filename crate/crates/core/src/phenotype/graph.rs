use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Undirected weighted graph in adjacency-list form. Self-loops are kept
/// apart: `self_loop[i]` is the diagonal entry `A_ii`.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub adj: Vec<Vec<(usize, f64)>>,
    pub self_loop: Vec<f64>,
}

impl Graph {
    pub fn new(n: usize) -> Self {
        Self {
            adj: vec![Vec::new(); n],
            self_loop: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.adj.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adj.is_empty()
    }

    /// Weighted degree `sum_j A_ij`.
    pub fn degree(&self, i: usize) -> f64 {
        self.adj[i].iter().map(|e| e.1).sum::<f64>() + self.self_loop[i]
    }

    /// Number of undirected edges between distinct nodes.
    pub fn edge_count(&self) -> usize {
        self.adj.iter().map(|a| a.len()).sum::<usize>() / 2
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.adj[i].iter().find(|e| e.0 == j).map_or(0.0, |e| e.1)
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            let d = x[l] - y[l];
            lanes[l] += d * d;
        }
    }
    let mut s: f32 = lanes.iter().sum();
    for (x, y) in ra.iter().zip(rb) {
        s += (x - y) * (x - y);
    }
    s
}

/// Exact `k` nearest neighbours (Euclidean) of every row, excluding the row
/// itself. Equal distances are broken by the lower index.
pub fn knn(points: &Matrix, k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::config("k", "must be positive"));
    }
    if points.rows <= k {
        return Err(Error::Contract(format!("kNN needs more than k = {k} points, got {}", points.rows)));
    }
    points.ensure_finite("embedding")?;
    Ok((0..points.rows)
        .into_par_iter()
        .map(|i| {
            let q = points.row(i);
            // bounded max-heap on (distance, index)
            let mut best: Vec<(f32, usize)> = Vec::with_capacity(k + 1);
            for j in 0..points.rows {
                if j == i {
                    continue;
                }
                let d = sq_dist(q, points.row(j));
                if best.len() == k && d >= best[k - 1].0 {
                    continue;
                }
                let pos = best.partition_point(|&(bd, bj)| bd < d || (bd == d && bj < j));
                best.insert(pos, (d, j));
                best.truncate(k);
            }
            best.into_iter().map(|(_, j)| j).collect()
        })
        .collect())
}

/// Shared-neighbour graph: an edge joins `i` and `j` whenever either is
/// among the other's neighbours, weighted by the Jaccard index of their
/// neighbourhoods (each including the node itself).
pub fn jaccard_graph(neighbors: &[Vec<usize>]) -> Graph {
    let n = neighbors.len();
    let sets: Vec<Vec<usize>> = neighbors
        .iter()
        .enumerate()
        .map(|(i, nb)| {
            let mut s = nb.clone();
            s.push(i);
            s.sort_unstable();
            s.dedup();
            s
        })
        .collect();
    let jaccard = |a: &[usize], b: &[usize]| -> f64 {
        let (mut i, mut j, mut common) = (0, 0, 0usize);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    common += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        common as f64 / (a.len() + b.len() - common) as f64
    };
    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(2 * n * neighbors.first().map_or(0, |v| v.len()));
    for (i, nb) in neighbors.iter().enumerate() {
        for &j in nb {
            if j != i {
                pairs.push((i, j));
                pairs.push((j, i));
            }
        }
    }
    pairs.sort_unstable();
    pairs.dedup();
    let mut g = Graph::new(n);
    for (i, j) in pairs {
        g.adj[i].push((j, jaccard(&sets[i], &sets[j])));
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_neighbours() {
        let pts = Matrix::new(10, 1, (0..10).map(|i| i as f32).collect()).unwrap();
        let nb = knn(&pts, 2).unwrap();
        for i in 1..9 {
            let mut n = nb[i].clone();
            n.sort();
            assert_eq!(n, vec![i - 1, i + 1]);
        }
        // endpoints: ties impossible, 0 -> 1, 2
        assert_eq!(nb[0], vec![1, 2]);
        assert_eq!(nb[9], vec![8, 7]);
    }

    #[test]
    fn ties_prefer_lower_index_and_k_must_be_below_m() {
        let pts = Matrix::new(4, 1, vec![0.0, 1.0, -1.0, 1.0]).unwrap();
        assert_eq!(knn(&pts, 2).unwrap()[0], vec![1, 2]);
        assert_eq!(knn(&pts, 4).unwrap_err().kind(), "contract");
        let dup = Matrix::new(3, 1, vec![5.0, 5.0, 5.0]).unwrap();
        assert_eq!(knn(&dup, 1).unwrap(), vec![vec![1], vec![0], vec![0]]);
    }

    #[test]
    fn jaccard_weights_are_symmetric_and_in_unit_interval() {
        let pts = Matrix::new(30, 2, (0..60).map(|i| ((i * 37) % 17) as f32).collect()).unwrap();
        let g = jaccard_graph(&knn(&pts, 4).unwrap());
        for i in 0..g.len() {
            for &(j, w) in &g.adj[i] {
                assert!(w > 0.0 && w <= 1.0);
                assert_eq!(g.weight(j, i), w);
            }
        }
    }
}
