//! Batch inference: embeddings and channel contributions for every patch.

use std::path::Path;

use rayon::prelude::*;
use serde_json::json;

use crate::augment::center_crop;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{FeatureMap, NextChannelEncoder};

pub const EMBEDDINGS_TENSOR: &str = "embeddings";
pub const CONTRIBUTIONS_TENSOR: &str = "contributions";

/// Per-cell outputs of the encoder, rows in patch order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedOutput {
    /// `M x embed_dim`.
    pub embeddings: Matrix,
    /// `M x groups`, the mean interpretability feature of every channel.
    pub contributions: Matrix,
}

/// Runs the encoder on raw patches (the stored normalizer is applied),
/// optionally on a centre crop of `crop` pixels. Global pooling weighs every
/// pixel equally, so the crop decides how much of the neighbourhood enters
/// the embedding.
pub fn embed_patches(encoder: &NextChannelEncoder, patches: &[FeatureMap], crop: Option<usize>) -> Result<EmbedOutput> {
    let cfg = encoder.config();
    let rows: Vec<(Vec<f32>, Vec<f32>)> = patches
        .par_iter()
        .map(|p| {
            let (act, emb) = match crop {
                Some(s) => encoder.forward_raw(&center_crop(p, s)?)?,
                None => encoder.forward_raw(p)?,
            };
            Ok((emb.vector, act.channel_contribution()))
        })
        .collect::<Result<_>>()?;
    let m = rows.len();
    let mut e = Vec::with_capacity(m * cfg.embed_dim);
    let mut c = Vec::with_capacity(m * cfg.groups);
    for (ev, cv) in rows {
        e.extend(ev);
        c.extend(cv);
    }
    let out = EmbedOutput {
        embeddings: Matrix::new(m, cfg.embed_dim, e)?,
        contributions: Matrix::new(m, cfg.groups, c)?,
    };
    out.embeddings.ensure_finite("embeddings")?;
    out.contributions.ensure_finite("contributions")?;
    Ok(out)
}

impl EmbedOutput {
    pub fn save(&self, embeddings: &Path, contributions: &Path, markers: &[String], run_hash: &str) -> Result<()> {
        self.embeddings
            .save(embeddings, EMBEDDINGS_TENSOR, json!({"kind": "embeddings", "run_hash": run_hash}))?;
        self.contributions.save(
            contributions,
            CONTRIBUTIONS_TENSOR,
            json!({"kind": "contributions", "markers": markers, "run_hash": run_hash}),
        )
    }

    /// Loads both matrices and returns them with the marker names.
    pub fn load(embeddings: &Path, contributions: &Path) -> Result<(Self, Vec<String>)> {
        for p in [embeddings, contributions] {
            if !p.exists() {
                return Err(Error::MissingArtifact(p.to_path_buf()));
            }
        }
        let (e, _) = Matrix::load(embeddings, EMBEDDINGS_TENSOR)?;
        let (c, header) = Matrix::load(contributions, CONTRIBUTIONS_TENSOR)?;
        if e.rows != c.rows {
            return Err(Error::Shape(format!("{} embeddings but {} contribution rows", e.rows, c.rows)));
        }
        let markers: Vec<String> = serde_json::from_value(header["markers"].clone())
            .map_err(|_| Error::Corrupt(format!("{} has no marker list", contributions.display())))?;
        if markers.len() != c.cols {
            return Err(Error::Corrupt(format!("{} markers for {} contribution columns", markers.len(), c.cols)));
        }
        Ok((Self { embeddings: e, contributions: c }, markers))
    }
}
