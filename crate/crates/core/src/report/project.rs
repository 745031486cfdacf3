//! Two-dimensional layout of embeddings for plotting.
//!
//! A PCA initialization followed by a neighbour-graph force layout in the
//! style of UMAP: kNN pairs attract, randomly drawn pairs repel. Used only
//! for figures, never as an input to clustering.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::phenotype::knn;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionConfig {
    /// Cells are subsampled to at most this many before projecting.
    pub max_points: usize,
    pub neighbors: usize,
    pub epochs: usize,
    pub negative_samples: usize,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            max_points: 100_000,
            neighbors: 15,
            epochs: 200,
            negative_samples: 5,
        }
    }
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_points < 10 || self.neighbors == 0 || self.epochs == 0 {
            return Err(Error::config("report.projection", "max_points >= 10, neighbors and epochs > 0 are required"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// Rows of the input that were projected, ascending.
    pub indices: Vec<usize>,
    pub coords: Vec<[f32; 2]>,
}

/// Curve parameters for a minimum distance of 0.1.
const A: f64 = 1.577;
const B: f64 = 0.895;
const CLIP: f64 = 4.0;

/// Leading principal component scores, `dims` of them, by power iteration
/// on the covariance.
fn pca_scores(points: &Matrix, dims: usize, seed: u64) -> Vec<Vec<f64>> {
    let (n, d) = (points.rows, points.cols);
    let mut mean = vec![0.0f64; d];
    for r in points.iter_rows() {
        for (m, &v) in mean.iter_mut().zip(r) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0f64; d * d];
    let mut c = vec![0.0f64; d];
    for r in points.iter_rows() {
        for (x, (&v, m)) in c.iter_mut().zip(r.iter().zip(&mean)) {
            *x = v as f64 - m;
        }
        for i in 0..d {
            let ci = c[i];
            for j in i..d {
                cov[i * d + j] += ci * c[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            cov[i * d + j] = cov[j * d + i];
        }
    }
    let mut r = rng::stream(seed, &[rng::DOMAIN_PROJECT, 0]);
    let mut comps: Vec<Vec<f64>> = Vec::new();
    for _ in 0..dims {
        let mut v: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        for _ in 0..200 {
            let mut w: Vec<f64> = (0..d).map(|i| (0..d).map(|j| cov[i * d + j] * v[j]).sum()).collect();
            for u in &comps {
                let dot: f64 = w.iter().zip(u).map(|(a, b)| a * b).sum();
                w.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-300 {
                break;
            }
            v = w.iter().map(|x| x / norm).collect();
        }
        comps.push(v);
    }
    points
        .iter_rows()
        .map(|row| {
            comps
                .iter()
                .map(|u| row.iter().zip(&mean).zip(u).map(|((&x, m), w)| (x as f64 - m) * w).sum())
                .collect()
        })
        .collect()
}

/// Projects the rows of `points` (subsampled to `cfg.max_points`) to the
/// plane. Deterministic for a given seed.
pub fn project_2d(points: &Matrix, cfg: &ProjectionConfig, seed: u64) -> Result<Projection> {
    cfg.validate()?;
    if points.rows < 10 {
        return Err(Error::Contract(format!("projection needs at least 10 points, got {}", points.rows)));
    }
    points.ensure_finite("embeddings")?;
    let indices: Vec<usize> = if points.rows > cfg.max_points {
        let mut r = rng::stream(seed, &[rng::DOMAIN_PROJECT, 1]);
        let mut idx = sample(&mut r, points.rows, cfg.max_points).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..points.rows).collect()
    };
    let sub = points.select_rows(&indices);
    let n = sub.rows;

    let init = pca_scores(&sub, 2, seed);
    let spread = init.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let mut y: Vec<[f64; 2]> = init.iter().map(|s| [10.0 * s[0] / spread, 10.0 * s[1] / spread]).collect();

    let edges: Vec<(usize, usize)> = knn(&sub, cfg.neighbors.min(n - 1))?
        .iter()
        .enumerate()
        .flat_map(|(i, nb)| nb.iter().map(move |&j| (i, j)))
        .collect();
    let mut r = rng::stream(seed, &[rng::DOMAIN_PROJECT, 2]);
    let clip = |v: f64| v.clamp(-CLIP, CLIP);
    for epoch in 0..cfg.epochs {
        let alpha = 1.0 - epoch as f64 / cfg.epochs as f64;
        for &(i, j) in &edges {
            let diff = [y[i][0] - y[j][0], y[i][1] - y[j][1]];
            let d2 = diff[0] * diff[0] + diff[1] * diff[1];
            if d2 > 0.0 {
                let coef = -2.0 * A * B * d2.powf(B - 1.0) / (1.0 + A * d2.powf(B));
                for k in 0..2 {
                    let g = clip(coef * diff[k]) * alpha;
                    y[i][k] += g;
                    y[j][k] -= g;
                }
            }
            for _ in 0..cfg.negative_samples {
                let o = r.random_range(0..n);
                if o == i {
                    continue;
                }
                let diff = [y[i][0] - y[o][0], y[i][1] - y[o][1]];
                let d2 = diff[0] * diff[0] + diff[1] * diff[1];
                let coef = 2.0 * B / ((0.001 + d2) * (1.0 + A * d2.powf(B)));
                for k in 0..2 {
                    let g = if d2 > 0.0 { clip(coef * diff[k]) } else { CLIP };
                    y[i][k] += g * alpha;
                }
            }
        }
    }
    Ok(Projection {
        indices,
        coords: y.iter().map(|p| [p[0] as f32, p[1] as f32]).collect(),
    })
}
