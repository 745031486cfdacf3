use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::config::ModelConfig;
use super::encoder::NextChannelEncoder;
use super::layers::FeatureMap;
use crate::error::{Error, Result};
use crate::rng;

/// Outcome of perturbing a single input channel.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct DisentanglementReport {
    pub channel: usize,
    pub group: usize,
    /// Largest absolute change of any interpretability feature outside the
    /// channel's own group.
    pub max_offgroup_delta: f32,
    /// Largest |d feature / d pixel| for features outside the channel's
    /// group and pixels of the perturbed channel.
    pub max_offgroup_gradient: f32,
    pub max_ingroup_delta: f32,
    /// Euclidean norm of the change in the final embedding.
    pub embedding_delta: f32,
}

/// Gradient of interpretability feature `feature` with respect to the
/// (normalized) input patch.
pub fn input_gradient(encoder: &NextChannelEncoder, patch: &FeatureMap, feature: usize) -> Result<FeatureMap> {
    let trace = encoder.forward_trace(patch)?;
    let dim = trace.pooled.len();
    if feature >= dim {
        return Err(Error::Data(format!("feature {feature} out of range ({dim})")));
    }
    let mut seed = vec![0.0f32; dim];
    seed[feature] = 1.0;
    Ok(encoder
        .backward_from_pooled(&trace, &seed, None, true)
        .expect("input gradient requested"))
}

/// Perturbs `channel` by `magnitude` (with a fixed spatial pattern) and
/// measures how far the effect leaks into other groups.
pub fn disentanglement_check(
    encoder: &NextChannelEncoder,
    patch: &FeatureMap,
    channel: usize,
    magnitude: f32,
) -> Result<DisentanglementReport> {
    let cfg = encoder.config();
    if channel >= cfg.channels {
        return Err(Error::Data(format!(
            "channel {channel} out of range for {} channels",
            cfg.channels
        )));
    }
    let group = channel / cfg.channels_per_group();
    let f = cfg.features_per_group;

    let trace = encoder.forward_trace(patch)?;
    let mut perturbed = patch.clone();
    for (i, v) in perturbed.plane_mut(channel).iter_mut().enumerate() {
        *v += magnitude * (1.0 + 0.5 * (i as f32 * 0.7).sin());
    }
    let (act, emb) = encoder.forward(&perturbed)?;

    let mut max_off = 0.0f32;
    let mut max_in = 0.0f32;
    for (j, (&a, &b)) in trace.pooled.iter().zip(&act.values).enumerate() {
        let d = (a - b).abs();
        if j / f == group {
            max_in = max_in.max(d);
        } else {
            max_off = max_off.max(d);
        }
    }
    let embedding_delta = trace
        .embedding
        .iter()
        .zip(&emb.vector)
        .map(|(&a, &b)| ((a - b) as f64).powi(2))
        .sum::<f64>()
        .sqrt() as f32;

    let mut max_grad = 0.0f32;
    let mut seed = vec![0.0f32; trace.pooled.len()];
    for j in (0..trace.pooled.len()).filter(|j| j / f != group) {
        seed.fill(0.0);
        seed[j] = 1.0;
        let g = encoder
            .backward_from_pooled(&trace, &seed, None, true)
            .expect("input gradient requested");
        for &v in g.plane(channel) {
            max_grad = max_grad.max(v.abs());
        }
    }

    Ok(DisentanglementReport {
        channel,
        group,
        max_offgroup_delta: max_off,
        max_offgroup_gradient: max_grad,
        max_ingroup_delta: max_in,
        embedding_delta,
    })
}

/// Aggregate of many single-channel checks.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct TrialSummary {
    pub trials: usize,
    pub max_offgroup_delta: f32,
    pub max_offgroup_gradient: f32,
    /// Trials whose final embedding moved.
    pub entangled: usize,
    pub reports: Vec<DisentanglementReport>,
}

impl TrialSummary {
    pub fn disentangled(&self) -> bool {
        self.max_offgroup_delta == 0.0 && self.max_offgroup_gradient == 0.0
    }

    pub fn entangled_fraction(&self) -> f64 {
        self.entangled as f64 / self.trials.max(1) as f64
    }
}

/// Runs `trials` random checks. Without `encoder`, every trial builds a
/// freshly initialized encoder of `config`; without `patches`, every trial
/// draws a uniform random patch of side `patch_size`. The channel is drawn
/// uniformly.
pub fn disentanglement_trials(
    config: &ModelConfig,
    encoder: Option<&NextChannelEncoder>,
    patches: &[FeatureMap],
    patch_size: usize,
    trials: usize,
    magnitude: f32,
    seed: u64,
) -> Result<TrialSummary> {
    let config = encoder.map_or(config, |e| e.config());
    let reports = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let mut r = rng::stream(seed, &[rng::DOMAIN_CHECK, t]);
            let built;
            let enc = match encoder {
                Some(e) => e,
                None => {
                    built = NextChannelEncoder::build(config, r.random())?;
                    &built
                }
            };
            let drawn;
            let patch = if patches.is_empty() {
                let n = config.channels * patch_size * patch_size;
                drawn = FeatureMap::from_vec(config.channels, patch_size, patch_size, (0..n).map(|_| r.random_range(0.0..1.0)).collect());
                &drawn
            } else {
                &patches[r.random_range(0..patches.len())]
            };
            let channel = r.random_range(0..config.channels);
            disentanglement_check(enc, patch, channel, magnitude)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrialSummary {
        trials,
        max_offgroup_delta: reports.iter().fold(0.0, |m, r| m.max(r.max_offgroup_delta)),
        max_offgroup_gradient: reports.iter().fold(0.0, |m, r| m.max(r.max_offgroup_gradient)),
        entangled: reports.iter().filter(|r| r.embedding_delta > 0.0).count(),
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng;
    use rand::Rng;

    fn setup(seed: u64) -> (NextChannelEncoder, FeatureMap) {
        let cfg = ModelConfig {
            embed_dim: 8,
            stage_depths: vec![1, 1],
            downsample_factors: vec![2],
            ..ModelConfig::for_channels(3)
        };
        let enc = NextChannelEncoder::build(&cfg, seed).unwrap();
        let mut r = rng::stream(seed, &[1]);
        let patch = FeatureMap::from_vec(3, 12, 12, (0..432).map(|_| r.random_range(0.0..1.0)).collect());
        (enc, patch)
    }

    #[test]
    fn offgroup_effects_are_exactly_zero() {
        let (enc, patch) = setup(3);
        for c in 0..3 {
            let r = disentanglement_check(&enc, &patch, c, 0.5).unwrap();
            assert_eq!(r.max_offgroup_delta, 0.0);
            assert_eq!(r.max_offgroup_gradient, 0.0);
            assert!(r.max_ingroup_delta > 0.0);
            assert!(r.embedding_delta > 0.0);
        }
        assert!(disentanglement_check(&enc, &patch, 3, 0.5).is_err());
    }

    /// Central differences with h = 1e-3 on in-group features, taken in f64
    /// per pixel of the feature's own input channel.
    #[test]
    fn input_gradient_matches_central_differences() {
        let (enc, patch) = setup(8);
        let f = enc.config().features_per_group;
        let patch64 = patch.cast::<f64>();
        let h = 1e-3;
        for feature in [0, f + 1, 2 * f + 2] {
            let g = input_gradient(&enc, &patch, feature).unwrap();
            let channel = feature / f;
            let scale = g.plane(channel).iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()));
            for px in (0..patch.plane_len()).step_by(7) {
                let shifted = |sign: f64| {
                    let mut p = patch64.clone();
                    p.plane_mut(channel)[px] += sign * h;
                    enc.forward_f64(&p).unwrap().0[feature]
                };
                let fd = (shifted(1.0) - shifted(-1.0)) / (2.0 * h);
                let ad = g.plane(channel)[px] as f64;
                let rel = (fd - ad).abs() / fd.abs().max(1e-3 * scale);
                assert!(rel <= 1e-3, "feature {feature} pixel {px}: fd {fd} ad {ad} relative error {rel}");
            }
        }
    }

    #[test]
    fn random_trials_are_disentangled_and_reproducible() {
        let cfg = ModelConfig {
            embed_dim: 8,
            stage_depths: vec![1, 1],
            downsample_factors: vec![2],
            ..ModelConfig::for_channels(4)
        };
        let a = disentanglement_trials(&cfg, None, &[], 12, 6, 0.5, 1).unwrap();
        assert!(a.disentangled());
        assert_eq!(a.entangled, 6);
        assert_eq!(a, disentanglement_trials(&cfg, None, &[], 12, 6, 0.5, 1).unwrap());
        let channels: std::collections::BTreeSet<_> = a.reports.iter().map(|r| r.channel).collect();
        assert!(channels.len() > 1);
    }
}
