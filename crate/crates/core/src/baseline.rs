//! Segmentation-based comparison features: mean intensity per channel over
//! each cell's mask, standardized and clustered like the embeddings.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;

use crate::data::{CellRecord, MultichannelImage, SegmentationMask};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::phenotype::{cluster, ClusterAssignment, ClusterConfig};

/// Mean of every channel over the pixels of each mask label, keyed by label.
pub fn mean_intensity_features(image: &MultichannelImage, mask: &SegmentationMask) -> Result<BTreeMap<u32, Vec<f32>>> {
    if (mask.height, mask.width) != (image.height(), image.width()) {
        return Err(Error::Shape(format!(
            "mask is {}x{} but image `{}` is {}x{}",
            mask.height,
            mask.width,
            image.image_id,
            image.height(),
            image.width()
        )));
    }
    let c = image.pixels.channels;
    let mut sums: BTreeMap<u32, (Vec<f64>, usize)> = BTreeMap::new();
    for (p, &l) in mask.labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let e = sums.entry(l).or_insert_with(|| (vec![0.0; c], 0));
        for (ch, s) in e.0.iter_mut().enumerate() {
            *s += image.pixels.plane(ch)[p] as f64;
        }
        e.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(l, (s, n))| (l, s.iter().map(|v| (v / n as f64) as f32).collect()))
        .collect())
}

/// Per-column z-score. Constant columns become zero.
pub fn standardize(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for c in 0..m.cols {
        let n = m.rows as f64;
        let mean = m.iter_rows().map(|r| r[c] as f64).sum::<f64>() / n;
        let var = m.iter_rows().map(|r| (r[c] as f64 - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        for i in 0..m.rows {
            let v = out.row(i)[c] as f64 - mean;
            out.row_mut(i)[c] = if sd > 0.0 { (v / sd) as f32 } else { 0.0 };
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct BaselineFeatures {
    /// One row per kept cell, one column per channel.
    pub features: Matrix,
    /// Index into the input records of each row.
    pub cells: Vec<usize>,
    /// Cells without mask pixels, with the reason.
    pub dropped: Vec<(u64, String)>,
    /// Images without a mask.
    pub skipped_images: Vec<String>,
}

/// Mean-intensity features for every record whose image has a mask. A
/// record is matched to its mask label, or to the label under its centre
/// when none is recorded.
pub fn cell_features(images: &[MultichannelImage], masks: &[Option<SegmentationMask>], records: &[CellRecord]) -> Result<BaselineFeatures> {
    if images.len() != masks.len() {
        return Err(Error::Shape(format!("{} images but {} mask slots", images.len(), masks.len())));
    }
    let per_image: Vec<Option<BTreeMap<u32, Vec<f32>>>> = images
        .par_iter()
        .zip(masks.par_iter())
        .map(|(img, m)| m.as_ref().map(|m| mean_intensity_features(img, m)).transpose())
        .collect::<Result<_>>()?;
    let index: HashMap<&str, usize> = images.iter().enumerate().map(|(i, im)| (im.image_id.as_str(), i)).collect();
    let channels = images.first().map_or(0, |i| i.pixels.channels);
    let mut rows = Vec::new();
    let mut cells = Vec::new();
    let mut dropped = Vec::new();
    let skipped_images: Vec<String> = images
        .iter()
        .zip(masks)
        .filter(|(_, m)| m.is_none())
        .map(|(i, _)| i.image_id.clone())
        .collect();
    for (ri, rec) in records.iter().enumerate() {
        let Some(&ii) = index.get(rec.image_id.as_str()) else {
            dropped.push((rec.cell_id, format!("no image `{}`", rec.image_id)));
            continue;
        };
        let (Some(feats), Some(mask)) = (&per_image[ii], &masks[ii]) else {
            dropped.push((rec.cell_id, format!("image `{}` has no mask", rec.image_id)));
            continue;
        };
        let label = rec.mask_label.or_else(|| {
            let inside = (0..mask.height as i64).contains(&rec.row) && (0..mask.width as i64).contains(&rec.col);
            inside.then(|| mask.at(rec.row as usize, rec.col as usize))
        });
        match label.and_then(|l| feats.get(&l)) {
            Some(f) => {
                rows.extend_from_slice(f);
                cells.push(ri);
            }
            None => dropped.push((rec.cell_id, "no mask pixels".into())),
        }
    }
    for (id, why) in &dropped {
        log::warn!("baseline: dropping cell {id}: {why}");
    }
    Ok(BaselineFeatures {
        features: Matrix::new(cells.len(), channels, rows)?,
        cells,
        dropped,
        skipped_images,
    })
}

#[derive(Debug, Clone)]
pub struct BaselineResult {
    pub features: BaselineFeatures,
    pub standardized: Matrix,
    pub assignment: ClusterAssignment,
}

/// Features, per-channel z-scoring and the same clustering as the encoder
/// path.
pub fn run_baseline(
    images: &[MultichannelImage],
    masks: &[Option<SegmentationMask>],
    records: &[CellRecord],
    cfg: &ClusterConfig,
) -> Result<BaselineResult> {
    let features = cell_features(images, masks, records)?;
    let standardized = standardize(&features.features);
    let assignment = cluster(&standardized, cfg)?;
    Ok(BaselineResult {
        features,
        standardized,
        assignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, MarkerPanel, SynthConfig};
    use crate::model::FeatureMap;
    use crate::phenotype::adjusted_rand_index;
    use proptest::prelude::*;

    fn image(h: usize, w: usize, data: Vec<f32>) -> MultichannelImage {
        let c = data.len() / (h * w);
        MultichannelImage::new("i", MarkerPanel::default_prefix(c).unwrap(), FeatureMap::from_vec(c, h, w, data), None).unwrap()
    }

    #[test]
    fn single_pixel_and_uniform_cells() {
        let img = image(2, 2, vec![1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0]);
        let mask = SegmentationMask::new(2, 2, vec![0, 7, 3, 3]).unwrap();
        let f = mean_intensity_features(&img, &mask).unwrap();
        assert_eq!(f[&7], vec![2.0, 20.0]);
        assert_eq!(f[&3], vec![3.5, 35.0]);
        let uniform = image(2, 2, vec![0.3; 8]);
        for v in mean_intensity_features(&uniform, &mask).unwrap().values() {
            assert_eq!(v, &vec![0.3, 0.3]);
        }
        let bad = SegmentationMask::new(1, 4, vec![0; 4]).unwrap();
        assert_eq!(mean_intensity_features(&img, &bad).unwrap_err().kind(), "shape");
    }

    #[test]
    fn synthetic_blob_feature_matches_signature() {
        let panel = MarkerPanel::default_prefix(8).unwrap();
        let cfg = SynthConfig { num_images: 1, image_size: 128, cells_per_image: 80, seed: 5, ..SynthConfig::default() };
        let ds = synth_generate(&cfg, &panel).unwrap();
        let masks: Vec<_> = ds.masks.iter().cloned().map(Some).collect();
        let f = cell_features(&ds.images, &masks, &ds.records).unwrap();
        assert_eq!(f.cells.len(), ds.records.len());
        let ty = |name: &str| cfg.types.iter().find(|t| t.name == name).unwrap();
        // per cell the amplitude carries log-normal jitter; the type mean
        // must sit within 10% of signature + background
        let mut got = Vec::new();
        for (row, &ri) in f.cells.iter().enumerate() {
            let label = ds.records[ri].label.as_deref().unwrap();
            if ty(label).signature[0] == 1.0 {
                let v = f.features.row(row)[0] as f64;
                assert!((v - 1.02).abs() <= 1.02 * (4.0 * cfg.amplitude_jitter as f64 + 0.05), "{label}: {v}");
                got.push(v);
            }
        }
        assert!(got.len() > 5);
        let mean = got.iter().sum::<f64>() / got.len() as f64;
        let want = 1.0 + cfg.background as f64;
        assert!((mean - want).abs() <= 0.1 * want, "{mean} vs {want}");
    }

    #[test]
    fn missing_masks_skip_images() {
        let panel = MarkerPanel::default_prefix(8).unwrap();
        let cfg = SynthConfig { num_images: 2, image_size: 96, cells_per_image: 30, ..SynthConfig::default() };
        let ds = synth_generate(&cfg, &panel).unwrap();
        let masks = vec![Some(ds.masks[0].clone()), None];
        let f = cell_features(&ds.images, &masks, &ds.records).unwrap();
        assert_eq!(f.skipped_images, vec!["synth_001".to_string()]);
        assert_eq!(f.cells.len(), 30);
        assert_eq!(f.dropped.len(), 30);
    }

    #[test]
    fn baseline_separates_orthogonal_types() {
        let panel = MarkerPanel::default_prefix(8).unwrap();
        let cfg = SynthConfig { num_images: 2, image_size: 256, cells_per_image: 500, min_distance: 8.0, seed: 2, ..SynthConfig::default() };
        let ds = synth_generate(&cfg, &panel).unwrap();
        let masks: Vec<_> = ds.masks.iter().cloned().map(Some).collect();
        let res = run_baseline(&ds.images, &masks, &ds.records, &ClusterConfig::default()).unwrap();
        let truth: Vec<&str> = res.features.cells.iter().map(|&i| ds.records[i].label.as_deref().unwrap()).collect();
        let ari = adjusted_rand_index(&res.assignment.labels, &truth).unwrap();
        assert!(ari >= 0.9, "ARI {ari}, sizes {:?}", res.assignment.sizes());
    }

    proptest! {
        #[test]
        fn features_are_linear_and_local(a in 0.0f32..4.0, seed in any::<u32>()) {
            let data: Vec<f32> = (0..2 * 16).map(|i| ((i as u32).wrapping_mul(seed | 1) % 13) as f32).collect();
            let mask = SegmentationMask::new(4, 4, (0..16).map(|i| (i % 3) as u32).collect()).unwrap();
            let img = image(4, 4, data.clone());
            let base = mean_intensity_features(&img, &mask).unwrap();
            let scaled = image(4, 4, data.iter().map(|v| v * a).collect());
            for (l, f) in mean_intensity_features(&scaled, &mask).unwrap() {
                for (x, y) in f.iter().zip(&base[&l]) {
                    prop_assert!((x - y * a).abs() <= 1e-5 * (1.0 + y * a));
                }
            }
            // perturb pixels of label 2 only: label 1 is unchanged
            let mut other = data.clone();
            for (p, &l) in mask.labels.iter().enumerate() {
                if l == 2 { other[p] += 5.0; other[16 + p] += 1.0; }
            }
            let f = mean_intensity_features(&image(4, 4, other), &mask).unwrap();
            prop_assert_eq!(&f[&1], &base[&1]);
        }
    }
}
