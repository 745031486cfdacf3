//! Stochastic patch augmentations and multi-crop view generation.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FeatureMap;
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Global multiplicative intensity factor range.
    pub intensity_range: [f32; 2],
    /// Range of the standard deviation of additive Gaussian noise.
    pub noise_std_range: [f32; 2],
    /// Rotation angle range in degrees, sampled half-open.
    pub rotation_range_deg: [f32; 2],
    pub scale_range: [f32; 2],
    /// Probability of flipping along each axis independently.
    pub flip_prob: f32,
    /// Centre crop size of each view; one view per entry.
    pub crop_sizes: Vec<usize>,
    pub rng_seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            intensity_range: [0.5, 2.0],
            noise_std_range: [0.0, 0.1],
            rotation_range_deg: [0.0, 360.0],
            scale_range: [0.9, 1.1],
            flip_prob: 0.5,
            crop_sizes: vec![16, 16, 14, 12],
            rng_seed: 0,
        }
    }
}

impl AugmentConfig {
    /// A configuration whose augmentation is exactly the identity.
    pub fn identity(crop_sizes: Vec<usize>) -> Self {
        Self {
            intensity_range: [1.0, 1.0],
            noise_std_range: [0.0, 0.0],
            rotation_range_deg: [0.0, 0.0],
            scale_range: [1.0, 1.0],
            flip_prob: 0.0,
            crop_sizes,
            rng_seed: 0,
        }
    }

    pub fn views_per_patch(&self) -> usize {
        self.crop_sizes.len()
    }

    pub fn max_crop(&self) -> usize {
        self.crop_sizes.iter().copied().max().unwrap_or(0)
    }

    pub fn validate(&self, patch_size: usize, min_input: usize) -> Result<()> {
        let ranges = [
            ("intensity_range", self.intensity_range),
            ("noise_std_range", self.noise_std_range),
            ("rotation_range_deg", self.rotation_range_deg),
            ("scale_range", self.scale_range),
        ];
        for (field, [lo, hi]) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::config(field, format!("invalid range [{lo}, {hi}]")));
            }
        }
        if self.intensity_range[0] <= 0.0 {
            return Err(Error::config("intensity_range", "factors must be positive"));
        }
        if self.noise_std_range[0] < 0.0 {
            return Err(Error::config("noise_std_range", "std must be nonnegative"));
        }
        if self.scale_range[0] <= 0.0 {
            return Err(Error::config("scale_range", "scale must be positive"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config("flip_prob", "must lie in [0, 1]"));
        }
        if self.crop_sizes.is_empty() {
            return Err(Error::config("crop_sizes", "at least one view is required"));
        }
        for &s in &self.crop_sizes {
            if s > patch_size {
                return Err(Error::config(
                    "crop_sizes",
                    format!("crop {s} is larger than the {patch_size}x{patch_size} patch"),
                ));
            }
            if s < min_input {
                return Err(Error::config(
                    "crop_sizes",
                    format!("crop {s} is below the encoder minimum input size {min_input}"),
                ));
            }
        }
        Ok(())
    }
}

/// One concrete draw of the augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub intensity: f32,
    pub noise_std: f32,
    pub rotation_deg: f32,
    pub scale: f32,
    pub flip_h: bool,
    pub flip_v: bool,
}

impl AugmentParams {
    pub const IDENTITY: Self = Self {
        intensity: 1.0,
        noise_std: 0.0,
        rotation_deg: 0.0,
        scale: 1.0,
        flip_h: false,
        flip_v: false,
    };

    pub fn sample(cfg: &AugmentConfig, rng: &mut StreamRng) -> Self {
        Self {
            intensity: uniform(rng, cfg.intensity_range, true),
            noise_std: uniform(rng, cfg.noise_std_range, true),
            rotation_deg: uniform(rng, cfg.rotation_range_deg, false),
            scale: uniform(rng, cfg.scale_range, true),
            flip_h: rng.random::<f32>() < cfg.flip_prob,
            flip_v: rng.random::<f32>() < cfg.flip_prob,
        }
    }
}

fn uniform(rng: &mut StreamRng, [lo, hi]: [f32; 2], inclusive: bool) -> f32 {
    // Always consume one draw so the stream layout does not depend on the
    // configured ranges.
    let u: f32 = rng.random();
    if lo == hi {
        return lo;
    }
    let v = lo + (hi - lo) * u;
    if inclusive {
        v.min(hi)
    } else if v >= hi {
        lo
    } else {
        v
    }
}

/// Applies intensity scaling, Gaussian noise, rotation, isotropic scaling
/// and flips, in that order. Rotation and scaling share one bilinear
/// resampling about the patch centre; samples falling outside the patch
/// read as zero.
pub fn apply_augment(patch: &FeatureMap, params: &AugmentParams, rng: &mut StreamRng) -> FeatureMap {
    let mut out = patch.clone();
    if params.intensity != 1.0 {
        out.data.iter_mut().for_each(|v| *v *= params.intensity);
    }
    if params.noise_std > 0.0 {
        let normal = Normal::new(0.0f32, params.noise_std).expect("finite noise std");
        out.data.iter_mut().for_each(|v| *v += normal.sample(rng));
    }
    if params.rotation_deg != 0.0 || params.scale != 1.0 {
        out = affine_resample(&out, params.rotation_deg, params.scale);
    }
    if params.flip_h {
        flip_horizontal(&mut out);
    }
    if params.flip_v {
        flip_vertical(&mut out);
    }
    out
}

/// Samples parameters from `cfg` and applies them.
pub fn augment_once(patch: &FeatureMap, cfg: &AugmentConfig, rng: &mut StreamRng) -> FeatureMap {
    let params = AugmentParams::sample(cfg, rng);
    apply_augment(patch, &params, rng)
}

fn affine_resample(src: &FeatureMap, rotation_deg: f32, scale: f32) -> FeatureMap {
    let (h, w) = (src.height, src.width);
    let mut out = FeatureMap::zeros(src.channels, h, w);
    let theta = (rotation_deg as f64).to_radians();
    let (sin, cos) = theta.sin_cos();
    let inv_s = 1.0 / scale as f64;
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    // Precompute the four taps per output pixel once, reuse across channels.
    let mut taps: Vec<Option<(usize, usize, f32, f32)>> = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let sx = cx + (cos * dx + sin * dy) * inv_s;
            let sy = cy + (-sin * dx + cos * dy) * inv_s;
            if sx <= -1.0 || sy <= -1.0 || sx >= w as f64 || sy >= h as f64 {
                taps.push(None);
                continue;
            }
            let x0 = sx.floor();
            let y0 = sy.floor();
            taps.push(Some((
                (y0 + 1.0) as usize,
                (x0 + 1.0) as usize,
                (sy - y0) as f32,
                (sx - x0) as f32,
            )));
        }
    }
    // Coordinates above are offset by one so that the -1 row/column maps to
    // index 0 of a zero-padded frame.
    let get = |plane: &[f32], yy: usize, xx: usize| -> f32 {
        if yy == 0 || xx == 0 || yy > h || xx > w {
            0.0
        } else {
            plane[(yy - 1) * w + (xx - 1)]
        }
    };
    for c in 0..src.channels {
        let plane = src.plane(c);
        let dst = out.plane_mut(c);
        for (d, tap) in dst.iter_mut().zip(&taps) {
            if let Some((yy, xx, fy, fx)) = *tap {
                let v00 = get(plane, yy, xx);
                let v01 = get(plane, yy, xx + 1);
                let v10 = get(plane, yy + 1, xx);
                let v11 = get(plane, yy + 1, xx + 1);
                let top = v00 + (v01 - v00) * fx;
                let bottom = v10 + (v11 - v10) * fx;
                *d = top + (bottom - top) * fy;
            }
        }
    }
    out
}

pub fn flip_horizontal(p: &mut FeatureMap) {
    let w = p.width;
    for c in 0..p.channels {
        for row in p.plane_mut(c).chunks_exact_mut(w) {
            row.reverse();
        }
    }
}

pub fn flip_vertical(p: &mut FeatureMap) {
    let (h, w) = (p.height, p.width);
    for c in 0..p.channels {
        let plane = p.plane_mut(c);
        for y in 0..h / 2 {
            let (a, b) = plane.split_at_mut((h - 1 - y) * w);
            a[y * w..(y + 1) * w].swap_with_slice(&mut b[..w]);
        }
    }
}

/// Centre crop taking rows and columns `[(S - s) / 2, (S - s) / 2 + s)`.
pub fn center_crop(p: &FeatureMap, size: usize) -> Result<FeatureMap> {
    if size > p.height || size > p.width {
        return Err(Error::config(
            "crop_sizes",
            format!("crop {size} exceeds patch {}x{}", p.height, p.width),
        ));
    }
    if size == p.height && size == p.width {
        return Ok(p.clone());
    }
    let y0 = (p.height - size) / 2;
    let x0 = (p.width - size) / 2;
    let mut out = FeatureMap::zeros(p.channels, size, size);
    for c in 0..p.channels {
        let src = p.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..size {
            let s = (y0 + y) * p.width + x0;
            dst[y * size..(y + 1) * size].copy_from_slice(&src[s..s + size]);
        }
    }
    Ok(out)
}

/// One independently augmented view per configured crop size.
pub fn make_views(patch: &FeatureMap, cfg: &AugmentConfig, rng: &mut StreamRng) -> Result<Vec<FeatureMap>> {
    if let Some(&s) = cfg.crop_sizes.iter().find(|&&s| s > patch.height || s > patch.width) {
        return Err(Error::config(
            "crop_sizes",
            format!("crop {s} exceeds patch {}x{}", patch.height, patch.width),
        ));
    }
    cfg.crop_sizes
        .iter()
        .map(|&s| center_crop(&augment_once(patch, cfg, rng), s))
        .collect()
}

/// Augmented views of a batch of patches.
#[derive(Debug, Clone)]
pub struct ViewBatch {
    pub views: Vec<FeatureMap>,
    /// Position in the batch of the patch each view came from.
    pub pair_index: Vec<usize>,
}

impl ViewBatch {
    /// Generates views for `patches`. Patch `i` draws from a stream keyed by
    /// `(seed, epoch, ids[i])`, so the result is independent of scheduling.
    pub fn generate(patches: &[&FeatureMap], ids: &[u64], cfg: &AugmentConfig, epoch: u64) -> Result<Self> {
        assert_eq!(patches.len(), ids.len());
        let per_patch: Vec<Vec<FeatureMap>> = patches
            .par_iter()
            .zip(ids.par_iter())
            .map(|(p, &id)| {
                let mut rng = rng::stream(cfg.rng_seed, &[rng::DOMAIN_VIEW, epoch, id]);
                make_views(p, cfg, &mut rng)
            })
            .collect::<Result<_>>()?;
        let v = cfg.views_per_patch();
        let mut views = Vec::with_capacity(patches.len() * v);
        let mut pair_index = Vec::with_capacity(patches.len() * v);
        for (i, pv) in per_patch.into_iter().enumerate() {
            pair_index.extend(std::iter::repeat_n(i, pv.len()));
            views.extend(pv);
        }
        Ok(Self { views, pair_index })
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    /// View indices grouped by spatial size, for size-homogeneous sub-batches.
    pub fn size_groups(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, v) in self.views.iter().enumerate() {
            groups.entry(v.height).or_default().push(i);
        }
        groups
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn ramp(c: usize, s: usize) -> FeatureMap {
        FeatureMap::from_vec(c, s, s, (0..c * s * s).map(|i| (i % 97) as f32 * 0.01).collect())
    }

    #[test]
    fn identity_config_is_identity() {
        let p = ramp(3, 32);
        let cfg = AugmentConfig::identity(vec![32]);
        let mut rng = rng::stream(1, &[]);
        assert_eq!(augment_once(&p, &cfg, &mut rng), p);
        let views = make_views(&p, &cfg, &mut rng).unwrap();
        assert_eq!(views, vec![p]);
    }

    #[test]
    fn intensity_doubles_constant_patch() {
        let p = FeatureMap::from_vec(2, 8, 8, vec![0.3; 128]);
        let params = AugmentParams {
            intensity: 2.0,
            ..AugmentParams::IDENTITY
        };
        let out = apply_augment(&p, &params, &mut rng::stream(0, &[]));
        assert!(out.data.iter().all(|&v| v == 0.6));
    }

    #[test]
    fn seeded_augmentation_is_reproducible() {
        let p = ramp(2, 32);
        let cfg = AugmentConfig::default();
        let a = make_views(&p, &cfg, &mut rng::stream(5, &[1])).unwrap();
        let b = make_views(&p, &cfg, &mut rng::stream(5, &[1])).unwrap();
        let c = make_views(&p, &cfg, &mut rng::stream(5, &[2])).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn default_views_have_configured_sizes() {
        let p = ramp(2, 32);
        let views = make_views(&p, &AugmentConfig::default(), &mut rng::stream(0, &[])).unwrap();
        let sizes: Vec<usize> = views.iter().map(|v| v.height).collect();
        assert_eq!(sizes, vec![16, 16, 14, 12]);
    }

    #[test]
    fn oversized_crop_is_a_config_error() {
        let p = ramp(1, 16);
        let cfg = AugmentConfig::identity(vec![20]);
        assert!(matches!(
            make_views(&p, &cfg, &mut rng::stream(0, &[])),
            Err(Error::Config { .. })
        ));
        assert!(AugmentConfig::default().validate(32, 8).is_ok());
        assert!(AugmentConfig::default().validate(14, 8).is_err());
        assert!(AugmentConfig::identity(vec![6]).validate(32, 8).is_err());
    }

    #[test]
    fn center_crop_indices() {
        let p = ramp(1, 32);
        let c = center_crop(&p, 12).unwrap();
        assert_eq!(c.at(0, 0, 0), p.at(0, 10, 10));
        assert_eq!(c.at(0, 11, 11), p.at(0, 21, 21));
    }

    #[test]
    fn quarter_turn_rotates_pixels() {
        let p = ramp(1, 5);
        let out = apply_augment(
            &p,
            &AugmentParams {
                rotation_deg: 90.0,
                ..AugmentParams::IDENTITY
            },
            &mut rng::stream(0, &[]),
        );
        // centre pixel is fixed; the rest is a permutation up to rounding
        assert!((out.at(0, 2, 2) - p.at(0, 2, 2)).abs() < 1e-5);
        let mut a: Vec<f32> = p.data.clone();
        let mut b: Vec<f32> = out.data.clone();
        a.sort_by(f32::total_cmp);
        b.sort_by(f32::total_cmp);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-4);
        }
    }

    #[test]
    fn batch_of_768_yields_3072_views() {
        let p = ramp(1, 32);
        let patches: Vec<&FeatureMap> = vec![&p; 768];
        let ids: Vec<u64> = (0..768).collect();
        let batch = ViewBatch::generate(&patches, &ids, &AugmentConfig::default(), 0).unwrap();
        assert_eq!(batch.len(), 3072);
        for i in 0..768 {
            assert_eq!(batch.pair_index.iter().filter(|&&j| j == i).count(), 4);
        }
        let groups = batch.size_groups();
        assert_eq!(groups[&16].len(), 1536);
        assert_eq!(groups[&14].len(), 768);
        assert_eq!(groups[&12].len(), 768);
    }

    proptest! {
        #[test]
        fn flips_are_involutions(seed in any::<u64>(), c in 1usize..3, s in 1usize..9) {
            let mut r = rng::stream(seed, &[]);
            let p = FeatureMap::from_vec(c, s, s, (0..c * s * s).map(|_| r.random::<f32>()).collect());
            let mut q = p.clone();
            flip_horizontal(&mut q);
            flip_horizontal(&mut q);
            prop_assert_eq!(&q, &p);
            flip_vertical(&mut q);
            flip_vertical(&mut q);
            prop_assert_eq!(&q, &p);
        }

        #[test]
        fn intensity_commutes_with_crop(factor in 0.5f32..2.0, crop in 8usize..=32) {
            let p = ramp(2, 32);
            let params = AugmentParams { intensity: factor, ..AugmentParams::IDENTITY };
            let mut r = rng::stream(0, &[]);
            let a = center_crop(&apply_augment(&p, &params, &mut r), crop).unwrap();
            let b = apply_augment(&center_crop(&p, crop).unwrap(), &params, &mut r);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn view_count_is_batch_times_crops(b in 1usize..6, v in 1usize..5) {
            let p = ramp(1, 16);
            let patches: Vec<&FeatureMap> = vec![&p; b];
            let ids: Vec<u64> = (0..b as u64).collect();
            let cfg = AugmentConfig { crop_sizes: vec![12; v], ..AugmentConfig::default() };
            let batch = ViewBatch::generate(&patches, &ids, &cfg, 3).unwrap();
            prop_assert_eq!(batch.len(), b * v);
        }
    }
}
