//! Louvain modularity maximisation.
//!
//! Nodes are visited in a seeded random order; a node moves to the
//! neighbouring community with the largest modularity gain, ties going to
//! the lowest community id, and only when the gain strictly beats staying.
//! Levels are aggregated until no node moves.

use rand::seq::SliceRandom;

use super::graph::Graph;
use crate::rng;

const MAX_SWEEPS: usize = 200;
const MIN_GAIN: f64 = 1e-12;

/// Modularity of `labels` on `g` at resolution `gamma`.
pub fn modularity(g: &Graph, labels: &[usize], gamma: f64) -> f64 {
    let m2: f64 = (0..g.len()).map(|i| g.degree(i)).sum();
    if m2 == 0.0 {
        return 0.0;
    }
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut inside = vec![0.0; k];
    let mut tot = vec![0.0; k];
    for i in 0..g.len() {
        tot[labels[i]] += g.degree(i);
        inside[labels[i]] += g.self_loop[i];
        for &(j, w) in &g.adj[i] {
            if labels[j] == labels[i] {
                inside[labels[i]] += w;
            }
        }
    }
    (0..k).map(|c| inside[c] / m2 - gamma * (tot[c] / m2).powi(2)).sum()
}

/// One local-moving phase. Returns the community of every node (dense ids)
/// and whether anything moved.
fn local_moving(g: &Graph, gamma: f64, seed: u64, level: u64) -> (Vec<usize>, bool) {
    let n = g.len();
    let degree: Vec<f64> = (0..n).map(|i| g.degree(i)).collect();
    let m2: f64 = degree.iter().sum();
    let mut comm: Vec<usize> = (0..n).collect();
    let mut tot = degree.clone();
    if m2 == 0.0 {
        return (comm, false);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[rng::DOMAIN_LOUVAIN, level]));
    let mut link = vec![0.0f64; n];
    let mut touched: Vec<usize> = Vec::new();
    let mut moved_any = false;
    for _ in 0..MAX_SWEEPS {
        let mut moved = false;
        for &i in &order {
            let ci = comm[i];
            for &(j, w) in &g.adj[i] {
                let c = comm[j];
                if link[c] == 0.0 {
                    touched.push(c);
                }
                link[c] += w;
            }
            tot[ci] -= degree[i];
            let scale = gamma * degree[i] / m2;
            let stay = link[ci] - scale * tot[ci];
            let (mut best, mut best_gain) = (ci, stay);
            touched.sort_unstable();
            for &c in &touched {
                let gain = link[c] - scale * tot[c];
                // ascending ids with a strict test: the lowest id wins ties
                // and staying put wins over an equal gain elsewhere
                if gain > best_gain + MIN_GAIN {
                    best = c;
                    best_gain = gain;
                }
            }
            tot[best] += degree[i];
            if best != ci {
                comm[i] = best;
                moved = true;
            }
            for &c in &touched {
                link[c] = 0.0;
            }
            touched.clear();
        }
        moved_any |= moved;
        if !moved {
            break;
        }
    }
    (renumber(&comm), moved_any)
}

/// Dense ids in order of first appearance.
fn renumber(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect()
}

fn aggregate(g: &Graph, comm: &[usize]) -> Graph {
    let k = comm.iter().copied().max().map_or(0, |m| m + 1);
    let mut out = Graph::new(k);
    let mut rows: Vec<std::collections::BTreeMap<usize, f64>> = vec![Default::default(); k];
    for i in 0..g.len() {
        let ci = comm[i];
        out.self_loop[ci] += g.self_loop[i];
        for &(j, w) in &g.adj[i] {
            let cj = comm[j];
            if cj == ci {
                out.self_loop[ci] += w;
            } else {
                *rows[ci].entry(cj).or_insert(0.0) += w;
            }
        }
    }
    for (c, r) in rows.into_iter().enumerate() {
        out.adj[c] = r.into_iter().collect();
    }
    out
}

/// Community of every node, numbered densely.
pub fn louvain(g: &Graph, gamma: f64, seed: u64) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..g.len()).collect();
    let mut current = g.clone();
    for level in 0.. {
        let (comm, moved) = local_moving(&current, gamma, seed, level);
        if !moved {
            break;
        }
        for l in labels.iter_mut() {
            *l = comm[*l];
        }
        current = aggregate(&current, &comm);
    }
    renumber(&labels)
}
