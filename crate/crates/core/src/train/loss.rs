//! Multi-view NT-Xent.
//!
//! For an anchor `i` and a positive `j` (another view of the same patch) the
//! term is `-s_ij + log(exp(s_ij) + sum_{k in neg(i)} exp(s_ik))` with
//! `s = cos / tau`, where `neg(i)` are the views of all other patches. The
//! loss averages this over every ordered (anchor, positive) pair.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Loss value and its gradient with respect to each (unit-norm) row.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<Vec<f64>>,
}

fn check(rows: &[Vec<f32>], pair_index: &[usize], tau: f64) -> Result<()> {
    if rows.len() != pair_index.len() {
        return Err(Error::Contract(format!(
            "{} projections but {} pair indices",
            rows.len(),
            pair_index.len()
        )));
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::config("temperature", "must be finite and positive"));
    }
    if let Some(first) = rows.first() {
        if rows.iter().any(|r| r.len() != first.len()) {
            return Err(Error::Contract("projection rows differ in length".into()));
        }
    }
    let mut counts = std::collections::BTreeMap::new();
    for &p in pair_index {
        *counts.entry(p).or_insert(0usize) += 1;
    }
    if let Some((p, n)) = counts.iter().find(|(_, &n)| n < 2) {
        return Err(Error::Contract(format!("patch {p} has {n} view; at least 2 are required")));
    }
    Ok(())
}

fn similarities(rows: &[Vec<f32>], tau: f64) -> Vec<Vec<f64>> {
    let inv = 1.0 / tau;
    rows.par_iter()
        .map(|a| {
            rows.iter()
                .map(|b| a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum::<f64>() * inv)
                .collect()
        })
        .collect()
}

/// Stable `log(exp(a) + sum exp(b_k))`.
fn log_sum_exp(a: f64, rest: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = rest.clone().fold(a, f64::max);
    m + ((a - m).exp() + rest.map(|b| (b - m).exp()).sum::<f64>()).ln()
}

pub fn nt_xent_loss(rows: &[Vec<f32>], pair_index: &[usize], tau: f64) -> Result<f64> {
    Ok(nt_xent(rows, pair_index, tau, false)?.loss)
}

pub fn nt_xent_with_grad(rows: &[Vec<f32>], pair_index: &[usize], tau: f64) -> Result<LossGrad> {
    nt_xent(rows, pair_index, tau, true)
}

fn nt_xent(rows: &[Vec<f32>], pair_index: &[usize], tau: f64, want_grad: bool) -> Result<LossGrad> {
    check(rows, pair_index, tau)?;
    let n = rows.len();
    let sim = similarities(rows, tau);

    // Per anchor: loss sum, number of pairs and d(sum)/d s_ik for every k.
    let per_anchor: Vec<(f64, usize, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let negs = || (0..n).filter(move |&k| pair_index[k] != pair_index[i]).map(|k| sim[i][k]);
            let mut coef = if want_grad { vec![0.0; n] } else { Vec::new() };
            let mut total = 0.0;
            let mut pairs = 0;
            for j in (0..n).filter(|&j| j != i && pair_index[j] == pair_index[i]) {
                let lse = log_sum_exp(sim[i][j], negs());
                total += lse - sim[i][j];
                pairs += 1;
                if want_grad {
                    coef[j] += (sim[i][j] - lse).exp() - 1.0;
                    for k in (0..n).filter(|&k| pair_index[k] != pair_index[i]) {
                        coef[k] += (sim[i][k] - lse).exp();
                    }
                }
            }
            (total, pairs, coef)
        })
        .collect();

    let pairs: usize = per_anchor.iter().map(|a| a.1).sum();
    let loss = per_anchor.iter().map(|a| a.0).sum::<f64>() / pairs as f64;
    if !want_grad {
        return Ok(LossGrad { loss, grad: Vec::new() });
    }
    // s_ik = z_i . z_k / tau, so dL/dz_i = sum_k (C_ik + C_ki) z_k / (tau * pairs)
    let scale = 1.0 / (tau * pairs as f64);
    let dim = rows.first().map_or(0, |r| r.len());
    let grad = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut g = vec![0.0f64; dim];
            for k in 0..n {
                let c = per_anchor[i].2[k] + per_anchor[k].2[i];
                if c == 0.0 {
                    continue;
                }
                for (d, &z) in g.iter_mut().zip(&rows[k]) {
                    *d += c * scale * z as f64;
                }
            }
            g
        })
        .collect();
    Ok(LossGrad { loss, grad })
}
