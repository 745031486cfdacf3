use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::json;

use super::image::MultichannelImage;
use super::panel::MarkerPanel;
use super::records::{read_jsonl, write_jsonl, CellRecord};
use crate::container::{Tensor, TensorFile};
use crate::error::{Error, Result};
use crate::model::{ChannelNormalizer, FeatureMap};

const KIND: &str = "patches";

/// Cell-centred patches with one record per patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDataset {
    pub panel: MarkerPanel,
    pub patch_size: usize,
    pub patches: Vec<FeatureMap>,
    pub records: Vec<CellRecord>,
}

/// A centre that could not be turned into a patch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedCell {
    pub cell_id: u64,
    pub image_id: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct Extraction {
    pub dataset: PatchDataset,
    pub skipped: Vec<SkippedCell>,
}

impl PatchDataset {
    pub fn new(panel: MarkerPanel, patch_size: usize, patches: Vec<FeatureMap>, records: Vec<CellRecord>) -> Result<Self> {
        if patches.len() != records.len() {
            return Err(Error::Shape(format!("{} patches but {} records", patches.len(), records.len())));
        }
        for (i, p) in patches.iter().enumerate() {
            if p.channels != panel.len() || p.height != patch_size || p.width != patch_size {
                return Err(Error::Shape(format!(
                    "patch {i} is {}x{}x{}, expected {}x{patch_size}x{patch_size}",
                    p.channels,
                    p.height,
                    p.width,
                    panel.len()
                )));
            }
        }
        Ok(Self {
            panel,
            patch_size,
            patches,
            records,
        })
    }

    pub fn empty(panel: MarkerPanel, patch_size: usize) -> Self {
        Self {
            panel,
            patch_size,
            patches: Vec::new(),
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            panel: self.panel.clone(),
            patch_size: self.patch_size,
            patches: indices.iter().map(|&i| self.patches[i].clone()).collect(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    /// Sibling file holding the records of a dataset saved at `path`.
    pub fn records_path(path: &Path) -> PathBuf {
        path.with_extension("jsonl")
    }

    /// Writes the patch tensor `(M, C, S, S)` to `path` and the records as
    /// JSON lines next to it.
    pub fn save(&self, path: &Path, run_hash: Option<&str>) -> Result<()> {
        let mut file = TensorFile::new(json!({
            "kind": KIND,
            "panel": self.panel,
            "patch_size": self.patch_size,
            "count": self.len(),
            "run_hash": run_hash,
        }));
        let mut data = Vec::with_capacity(self.len() * self.panel.len() * self.patch_size * self.patch_size);
        for p in &self.patches {
            data.extend_from_slice(&p.data);
        }
        file.push(Tensor::new(
            "patches",
            vec![self.len(), self.panel.len(), self.patch_size, self.patch_size],
            data,
        )?);
        write_jsonl(&Self::records_path(path), &self.records)?;
        file.save(path)
    }

    pub fn load(path: &Path, expected: Option<&MarkerPanel>) -> Result<Self> {
        let mut file = TensorFile::load(path)?;
        if file.header.get("kind").and_then(|k| k.as_str()) != Some(KIND) {
            return Err(Error::Corrupt(format!("{} does not hold patches", path.display())));
        }
        let panel: MarkerPanel = serde_json::from_value(file.header["panel"].clone())
            .map_err(|e| Error::Corrupt(format!("patch header panel: {e}")))?;
        if let Some(expected) = expected {
            expected.ensure_same(&panel, &format!("patch set {}", path.display()))?;
        }
        let t = file.take("patches")?;
        let [m, c, s, s2] = t.shape[..] else {
            return Err(Error::Corrupt(format!("patch tensor has shape {:?}", t.shape)));
        };
        if c != panel.len() || s != s2 {
            return Err(Error::Corrupt(format!("patch tensor has shape {:?}", t.shape)));
        }
        let records = read_jsonl(&Self::records_path(path))?;
        if records.len() != m {
            return Err(Error::Corrupt(format!("{m} patches but {} records", records.len())));
        }
        let plane = c * s * s;
        let patches = if plane == 0 {
            vec![FeatureMap::zeros(c, s, s); m]
        } else {
            t.data.chunks_exact(plane).map(|d| FeatureMap::from_vec(c, s, s, d.to_vec())).collect()
        };
        Self::new(panel, s, patches, records)
    }
}

fn check_size(size: usize) -> Result<()> {
    if size < 12 || size % 2 != 0 {
        return Err(Error::config("patch_size", format!("{size} must be even and at least 12")));
    }
    Ok(())
}

/// Cuts the `size x size` window covering rows `[r - size/2, r + size/2)`
/// and the same columns, zero-padding outside the image.
pub fn cut_patch(image: &FeatureMap, row: i64, col: i64, size: usize) -> FeatureMap {
    let half = (size / 2) as i64;
    let mut out = FeatureMap::zeros(image.channels, size, size);
    let (h, w) = (image.height as i64, image.width as i64);
    let c0 = (col - half).max(0);
    let c1 = (col + half).min(w);
    for c in 0..image.channels {
        let src = image.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..size as i64 {
            let r = row - half + y;
            if r < 0 || r >= h || c0 >= c1 {
                continue;
            }
            let dx = (c0 - (col - half)) as usize;
            let n = (c1 - c0) as usize;
            let s = (r * w + c0) as usize;
            dst[y as usize * size + dx..y as usize * size + dx + n].copy_from_slice(&src[s..s + n]);
        }
    }
    out
}

/// Extracts one patch per centre of `image`. Centres outside the image or
/// belonging to another image are skipped and reported.
pub fn extract_patches(image: &MultichannelImage, centers: &[CellRecord], size: usize) -> Result<Extraction> {
    check_size(size)?;
    let mut patches = Vec::new();
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for rec in centers {
        match skip_reason(image, rec) {
            Some(reason) => skipped.push(SkippedCell {
                cell_id: rec.cell_id,
                image_id: rec.image_id.clone(),
                reason,
            }),
            None => {
                patches.push(cut_patch(&image.pixels, rec.row, rec.col, size));
                records.push(rec.clone());
            }
        }
    }
    Ok(Extraction {
        dataset: PatchDataset::new(image.panel.clone(), size, patches, records)?,
        skipped,
    })
}

fn skip_reason(image: &MultichannelImage, rec: &CellRecord) -> Option<String> {
    if rec.image_id != image.image_id {
        return Some(format!("belongs to image `{}`", rec.image_id));
    }
    let inside = (0..image.height() as i64).contains(&rec.row) && (0..image.width() as i64).contains(&rec.col);
    (!inside).then(|| {
        format!(
            "centre ({}, {}) lies outside the {}x{} image",
            rec.row,
            rec.col,
            image.height(),
            image.width()
        )
    })
}

/// Extracts patches for centres spread over several images, in parallel
/// across images. Output order follows `centers`.
pub fn extract_all(images: &[MultichannelImage], centers: &[CellRecord], size: usize, panel: &MarkerPanel) -> Result<Extraction> {
    check_size(size)?;
    for img in images {
        panel.ensure_same(&img.panel, &format!("image `{}`", img.image_id))?;
    }
    let by_id: HashMap<&str, &MultichannelImage> = images.iter().map(|i| (i.image_id.as_str(), i)).collect();
    if by_id.len() != images.len() {
        return Err(Error::Data("image ids are not unique".into()));
    }
    let results: Vec<std::result::Result<FeatureMap, String>> = centers
        .par_iter()
        .map(|rec| match by_id.get(rec.image_id.as_str()) {
            None => Err(format!("no image `{}`", rec.image_id)),
            Some(img) => match skip_reason(img, rec) {
                Some(reason) => Err(reason),
                None => Ok(cut_patch(&img.pixels, rec.row, rec.col, size)),
            },
        })
        .collect();
    let mut dataset = PatchDataset::empty(panel.clone(), size);
    let mut skipped = Vec::new();
    for (rec, res) in centers.iter().zip(results) {
        match res {
            Ok(p) => {
                dataset.patches.push(p);
                dataset.records.push(rec.clone());
            }
            Err(reason) => skipped.push(SkippedCell {
                cell_id: rec.cell_id,
                image_id: rec.image_id.clone(),
                reason,
            }),
        }
    }
    Ok(Extraction { dataset, skipped })
}

/// Per-channel scale equal to the `q` quantile (nearest rank) of every pixel
/// of every patch. Channels whose quantile is zero keep scale 1.
pub fn percentile_normalizer(patches: &[FeatureMap], q: f64) -> Result<ChannelNormalizer> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::config("normalize_quantile", format!("{q} outside [0, 1]")));
    }
    let Some(first) = patches.first() else {
        return Err(Error::Data("cannot fit a normalizer on zero patches".into()));
    };
    let channels = first.channels;
    let scale = (0..channels)
        .into_par_iter()
        .map(|c| {
            let mut v: Vec<f32> = patches.iter().flat_map(|p| p.plane(c).iter().copied()).collect();
            let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
            let (_, x, _) = v.select_nth_unstable_by(rank, f32::total_cmp);
            if *x > 0.0 && x.is_finite() {
                *x
            } else {
                1.0
            }
        })
        .collect();
    Ok(ChannelNormalizer { scale })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp_image(h: usize, w: usize) -> MultichannelImage {
        let data = (0..2 * h * w).map(|i| i as f32).collect();
        MultichannelImage::new(
            "img",
            MarkerPanel::default_prefix(2).unwrap(),
            FeatureMap::from_vec(2, h, w, data),
            None,
        )
        .unwrap()
    }

    fn at(img: &FeatureMap, c: usize, r: usize, col: usize) -> f32 {
        img.plane(c)[r * img.width + col]
    }

    #[test]
    fn interior_window_offsets() {
        let img = ramp_image(200, 200);
        let ex = extract_patches(&img, &[CellRecord::new(1, "img", 100, 100)], 32).unwrap();
        let p = &ex.dataset.patches[0];
        assert_eq!(at(p, 1, 0, 0), at(&img.pixels, 1, 84, 84));
        assert_eq!(at(p, 1, 31, 31), at(&img.pixels, 1, 115, 115));
        assert_eq!(at(p, 0, 16, 16), at(&img.pixels, 0, 100, 100));
    }

    #[test]
    fn border_is_zero_padded() {
        let mut img = ramp_image(200, 200);
        img.pixels.data.iter_mut().for_each(|v| *v += 1.0);
        let ex = extract_patches(&img, &[CellRecord::new(1, "img", 5, 5)], 32).unwrap();
        let p = &ex.dataset.patches[0];
        for c in 0..2 {
            for r in 0..32 {
                for col in 0..32 {
                    let v = at(p, c, r, col);
                    if r < 11 || col < 11 {
                        assert_eq!(v, 0.0);
                    } else {
                        assert_eq!(v, at(&img.pixels, c, r - 11, col - 11));
                    }
                }
            }
        }
    }

    #[test]
    fn out_of_bounds_centres_are_skipped_not_fatal() {
        let img = ramp_image(20, 20);
        let centres = vec![
            CellRecord::new(1, "img", 3, 3),
            CellRecord::new(2, "img", 20, 3),
            CellRecord::new(3, "img", -1, 0),
            CellRecord::new(4, "other", 3, 3),
        ];
        let ex = extract_patches(&img, &centres, 12).unwrap();
        assert_eq!(ex.dataset.len(), 1);
        assert_eq!(ex.skipped.iter().map(|s| s.cell_id).collect::<Vec<_>>(), vec![2, 3, 4]);
        let all = extract_all(&[img.clone()], &centres, 12, &img.panel).unwrap();
        assert_eq!(all.dataset, ex.dataset);
        assert_eq!(all.skipped.len(), 3);
        assert!(extract_patches(&img, &centres, 13).is_err());
        assert!(extract_patches(&img, &centres, 10).is_err());
    }

    #[test]
    fn empty_centres_give_a_valid_empty_dataset() {
        let img = ramp_image(20, 20);
        let ex = extract_patches(&img, &[], 32).unwrap();
        assert!(ex.dataset.is_empty());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.nxch");
        ex.dataset.save(&path, None).unwrap();
        assert_eq!(PatchDataset::load(&path, None).unwrap(), ex.dataset);
    }

    #[test]
    fn save_load_is_bit_identical() {
        let img = ramp_image(40, 40);
        let mut centres: Vec<CellRecord> = (0..5).map(|i| CellRecord::new(i, "img", 7 * i as i64, 39 - 3 * i as i64)).collect();
        centres[2].label = Some("B cells".into());
        let ds = extract_patches(&img, &centres, 16).unwrap().dataset;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.nxch");
        ds.save(&path, Some("h")).unwrap();
        let back = PatchDataset::load(&path, Some(&img.panel)).unwrap();
        assert_eq!(back, ds);
        let other = MarkerPanel::new(["x", "y"]).unwrap();
        assert_eq!(PatchDataset::load(&path, Some(&other)).unwrap_err().kind(), "panel_mismatch");
    }

    #[test]
    fn normalizer_uses_nearest_rank_quantile() {
        let patches: Vec<FeatureMap> = (0..10)
            .map(|i| FeatureMap::from_vec(2, 1, 100, (0..200).map(|j| if j < 100 { (i * 100 + j) as f32 } else { 0.0 }).collect()))
            .collect();
        let n = percentile_normalizer(&patches, 0.999).unwrap();
        // 1000 values 0..999: rank ceil(999) - 1 = 998
        assert_eq!(n.scale, vec![998.0, 1.0]);
    }

    proptest! {
        #[test]
        fn extraction_is_translation_consistent(r in 16i64..40, c in 16i64..40, dr in 0usize..8, dc in 0usize..8) {
            let img = ramp_image(64, 64);
            // shift the image content down/right by (dr, dc)
            let mut shifted = FeatureMap::zeros(2, 64 + dr, 64 + dc);
            for ch in 0..2 {
                for y in 0..64 {
                    for x in 0..64 {
                        shifted.plane_mut(ch)[(y + dr) * (64 + dc) + x + dc] = at(&img.pixels, ch, y, x);
                    }
                }
            }
            let a = cut_patch(&img.pixels, r, c, 16);
            let b = cut_patch(&shifted, r + dr as i64, c + dc as i64, 16);
            prop_assert_eq!(a, b);
        }
    }
}
