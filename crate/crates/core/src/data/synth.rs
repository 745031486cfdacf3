//! Synthetic multiplex images with known cell types.
//!
//! Each cell is a set of 2-D Gaussian blobs, one per expressed marker, all
//! centred on the cell. A type's signature gives the mean intensity above
//! background inside the cell mask for every marker. A constant background
//! is added and every pixel then receives Poisson-like noise whose variance
//! is proportional to its intensity.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::image::{MultichannelImage, SegmentationMask};
use super::panel::MarkerPanel;
use super::records::{read_jsonl, write_centers, write_jsonl, CellRecord};
use crate::error::{Error, Result};
use crate::model::FeatureMap;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthType {
    pub name: String,
    /// Mean in-mask intensity above background, one entry per marker.
    pub signature: Vec<f32>,
    #[serde(default = "unit_weight")]
    pub weight: f64,
}

fn unit_weight() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_images: usize,
    pub image_size: usize,
    pub cells_per_image: usize,
    pub types: Vec<SynthType>,
    /// Radius of the circular cell mask, in pixels.
    pub cell_radius: f64,
    pub blob_sigma: f64,
    /// Minimum distance between cell centres; sets the attainable density.
    pub min_distance: f64,
    pub background: f32,
    /// Noise variance per unit intensity.
    pub noise_gain: f32,
    /// Log-normal spread of each cell's per-marker amplitude.
    pub amplitude_jitter: f32,
    /// Placement attempts allowed per requested cell before giving up.
    pub max_attempts_per_cell: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_images: 20,
            image_size: 512,
            cells_per_image: 500,
            types: default_types(),
            cell_radius: 3.0,
            blob_sigma: 2.0,
            min_distance: 12.0,
            background: 0.02,
            noise_gain: 0.02,
            amplitude_jitter: 0.1,
            max_attempts_per_cell: 200,
            seed: 0,
        }
    }
}

/// Five types with orthogonal one-marker signatures over the first eight
/// default markers (CD3, CD4, CD8, CD20, GD2, GZMB, Vimentin, S100B).
pub fn default_types() -> Vec<SynthType> {
    let one_hot = |name: &str, marker: usize, weight: f64| {
        let mut signature = vec![0.0; 8];
        signature[marker] = 1.0;
        SynthType {
            name: name.into(),
            signature,
            weight,
        }
    };
    vec![
        one_hot("T cells", 0, 1.0),
        one_hot("B cells", 3, 1.0),
        one_hot("tumor", 4, 1.0),
        one_hot("MO/DC/NK", 5, 1.0),
        one_hot("other", 6, 1.0),
    ]
}

/// The default types with T cells split into a CD4 and a CD8 variant that
/// share CD3, labelled `T cells:CD4` and `T cells:CD8`.
pub fn t_cell_variant_types() -> Vec<SynthType> {
    let variant = |name: &str, marker: usize| {
        let mut signature = vec![0.0; 8];
        signature[0] = 1.0;
        signature[marker] = 0.6;
        SynthType {
            name: name.into(),
            signature,
            weight: 0.5,
        }
    };
    let mut types = vec![variant("T cells:CD4", 1), variant("T cells:CD8", 2)];
    types.extend(default_types().into_iter().skip(1));
    types
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub panel: MarkerPanel,
    pub images: Vec<MultichannelImage>,
    pub masks: Vec<SegmentationMask>,
    pub records: Vec<CellRecord>,
}

impl SynthConfig {
    pub fn validate(&self, panel: &MarkerPanel) -> Result<()> {
        if self.num_images == 0 || self.image_size == 0 {
            return Err(Error::config("synth", "num_images and image_size must be positive"));
        }
        if self.types.is_empty() {
            return Err(Error::config("synth.types", "at least one type is required"));
        }
        for t in &self.types {
            if t.signature.len() != panel.len() {
                return Err(Error::config(
                    "synth.types",
                    format!("signature of `{}` has {} entries for {} markers", t.name, t.signature.len(), panel.len()),
                ));
            }
            if t.signature.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::config("synth.types", format!("signature of `{}` must be finite and nonnegative", t.name)));
            }
            if !(t.weight.is_finite() && t.weight > 0.0) {
                return Err(Error::config("synth.types", format!("weight of `{}` must be positive", t.name)));
            }
        }
        let positive = [
            ("synth.cell_radius", self.cell_radius),
            ("synth.blob_sigma", self.blob_sigma),
            ("synth.min_distance", self.min_distance),
        ];
        for (f, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(f, "must be finite and positive"));
            }
        }
        if self.min_distance < 2.0 * self.cell_radius {
            return Err(Error::config("synth.min_distance", "must be at least twice cell_radius so masks do not overlap"));
        }
        if 2.0 * self.cell_radius.ceil() >= self.image_size as f64 {
            return Err(Error::config("synth.cell_radius", "cells do not fit in the image"));
        }
        for (f, v) in [("synth.background", self.background), ("synth.noise_gain", self.noise_gain), ("synth.amplitude_jitter", self.amplitude_jitter)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(f, "must be finite and nonnegative"));
            }
        }
        if self.max_attempts_per_cell == 0 {
            return Err(Error::config("synth.max_attempts_per_cell", "must be positive"));
        }
        Ok(())
    }
}

/// Pixel offsets of a disc of `radius` around the origin.
fn disc(radius: f64) -> Vec<(i64, i64)> {
    let r = radius.floor() as i64;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if ((dy * dy + dx * dx) as f64) <= radius * radius {
                out.push((dy, dx));
            }
        }
    }
    out
}

/// Mean of the unit-peak Gaussian profile over the mask disc.
fn mask_mean_of_profile(radius: f64, sigma: f64) -> f64 {
    let d = disc(radius);
    d.iter()
        .map(|&(y, x)| (-((y * y + x * x) as f64) / (2.0 * sigma * sigma)).exp())
        .sum::<f64>()
        / d.len() as f64
}

/// Random sequential placement with a minimum spacing.
fn place_centres(cfg: &SynthConfig, rng: &mut rng::StreamRng, image_index: usize) -> Result<Vec<(i64, i64)>> {
    let size = cfg.image_size as i64;
    let margin = cfg.cell_radius.ceil() as i64;
    let cell = cfg.min_distance;
    let grid_w = (cfg.image_size as f64 / cell).ceil() as usize + 1;
    let mut grid: Vec<Vec<usize>> = vec![Vec::new(); grid_w * grid_w];
    let mut centres: Vec<(i64, i64)> = Vec::with_capacity(cfg.cells_per_image);
    let budget = cfg.max_attempts_per_cell.saturating_mul(cfg.cells_per_image.max(1));
    let mut attempts = 0usize;
    let min_d2 = cfg.min_distance * cfg.min_distance;
    while centres.len() < cfg.cells_per_image {
        if attempts == budget {
            return Err(Error::Generation(format!(
                "image {image_index}: placed {} of {} cells after {budget} attempts; lower the density or min_distance",
                centres.len(),
                cfg.cells_per_image
            )));
        }
        attempts += 1;
        let r = rng.random_range(margin..size - margin);
        let c = rng.random_range(margin..size - margin);
        let (gy, gx) = ((r as f64 / cell) as usize, (c as f64 / cell) as usize);
        let mut ok = true;
        'scan: for y in gy.saturating_sub(1)..=(gy + 1).min(grid_w - 1) {
            for x in gx.saturating_sub(1)..=(gx + 1).min(grid_w - 1) {
                for &j in &grid[y * grid_w + x] {
                    let (dr, dc) = ((centres[j].0 - r) as f64, (centres[j].1 - c) as f64);
                    if dr * dr + dc * dc < min_d2 {
                        ok = false;
                        break 'scan;
                    }
                }
            }
        }
        if ok {
            grid[gy * grid_w + gx].push(centres.len());
            centres.push((r, c));
        }
    }
    Ok(centres)
}

struct GeneratedImage {
    image: MultichannelImage,
    mask: SegmentationMask,
    cells: Vec<(i64, i64, usize)>,
}

fn generate_image(cfg: &SynthConfig, panel: &MarkerPanel, index: usize, weights: &WeightedIndex<f64>) -> Result<GeneratedImage> {
    let mut rng = rng::stream(cfg.seed, &[rng::DOMAIN_SYNTH, index as u64]);
    let centres = place_centres(cfg, &mut rng, index)?;
    let size = cfg.image_size;
    let channels = panel.len();
    let mut pixels = FeatureMap::zeros(channels, size, size);
    let mut labels = vec![0u32; size * size];
    let mask_disc = disc(cfg.cell_radius);
    let profile_mean = mask_mean_of_profile(cfg.cell_radius, cfg.blob_sigma);
    let reach = (4.0 * cfg.blob_sigma).ceil() as i64;
    let two_s2 = 2.0 * cfg.blob_sigma * cfg.blob_sigma;
    let jitter = cfg.amplitude_jitter as f64;
    let mut cells = Vec::with_capacity(centres.len());
    for (k, &(r, c)) in centres.iter().enumerate() {
        let t = weights.sample(&mut rng);
        cells.push((r, c, t));
        for &(dy, dx) in &mask_disc {
            labels[(r + dy) as usize * size + (c + dx) as usize] = k as u32 + 1;
        }
        for (ch, &mean) in cfg.types[t].signature.iter().enumerate() {
            let z: f64 = StandardNormal.sample(&mut rng);
            if mean == 0.0 {
                continue;
            }
            let amp = mean as f64 / profile_mean * (jitter * z - 0.5 * jitter * jitter).exp();
            let plane = pixels.plane_mut(ch);
            for y in (r - reach).max(0)..(r + reach + 1).min(size as i64) {
                for x in (c - reach).max(0)..(c + reach + 1).min(size as i64) {
                    let d2 = ((y - r) * (y - r) + (x - c) * (x - c)) as f64;
                    plane[y as usize * size + x as usize] += (amp * (-d2 / two_s2).exp()) as f32;
                }
            }
        }
    }
    let gain = cfg.noise_gain as f64;
    for v in pixels.data.iter_mut() {
        let mean = *v as f64 + cfg.background as f64;
        let z: f64 = StandardNormal.sample(&mut rng);
        *v = (mean + z * (gain * mean).sqrt()).max(0.0) as f32;
    }
    let image = MultichannelImage::new(format!("synth_{index:03}"), panel.clone(), pixels, Some(1.0))?;
    Ok(GeneratedImage {
        image,
        mask: SegmentationMask::new(size, size, labels)?,
        cells,
    })
}

/// Generates the dataset. Images are produced in parallel, each from its
/// own random stream, so the output depends only on the configuration.
pub fn synth_generate(cfg: &SynthConfig, panel: &MarkerPanel) -> Result<SynthDataset> {
    cfg.validate(panel)?;
    let weights = WeightedIndex::new(cfg.types.iter().map(|t| t.weight))
        .map_err(|e| Error::config("synth.types", e.to_string()))?;
    let generated: Vec<GeneratedImage> = (0..cfg.num_images)
        .into_par_iter()
        .map(|i| generate_image(cfg, panel, i, &weights))
        .collect::<Result<_>>()?;
    let mut out = SynthDataset {
        panel: panel.clone(),
        images: Vec::new(),
        masks: Vec::new(),
        records: Vec::new(),
    };
    for g in generated {
        for (k, &(r, c, t)) in g.cells.iter().enumerate() {
            let mut rec = CellRecord::new(out.records.len() as u64, g.image.image_id.clone(), r, c);
            rec.label = Some(cfg.types[t].name.clone());
            rec.mask_label = Some(k as u32 + 1);
            out.records.push(rec);
        }
        out.images.push(g.image);
        out.masks.push(g.mask);
    }
    Ok(out)
}

impl SynthDataset {
    /// Layout: `panel.json`, `images/<id>.tiff` (+ sidecar),
    /// `masks/<id>.tiff`, `centers.csv` and `cells.jsonl`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.panel.save(&dir.join("panel.json"))?;
        self.images
            .par_iter()
            .zip(&self.masks)
            .try_for_each(|(img, mask)| -> Result<()> {
                img.save(&dir.join("images").join(format!("{}.tiff", img.image_id)))?;
                mask.save(&mask_path(dir, &img.image_id))
            })?;
        write_centers(&dir.join("centers.csv"), &self.records)?;
        write_jsonl(&dir.join("cells.jsonl"), &self.records)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let panel = MarkerPanel::load(&dir.join("panel.json"))?;
        let images = super::image::load_images(&dir.join("images"), Some(&panel))?;
        let masks = images
            .iter()
            .map(|img| SegmentationMask::load(&mask_path(dir, &img.image_id)))
            .collect::<Result<_>>()?;
        let records = read_jsonl(&dir.join("cells.jsonl"))?;
        Ok(Self {
            panel,
            images,
            masks,
            records,
        })
    }
}

/// Where the mask of `image_id` lives under a dataset directory.
pub fn mask_path(dir: &Path, image_id: &str) -> std::path::PathBuf {
    dir.join("masks").join(format!("{image_id}.tiff"))
}
