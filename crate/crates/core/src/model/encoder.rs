use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::layers::{
    conv_backward, conv_forward, gelu, gelu_grad, group_norm_backward, group_norm_forward,
    linear_backward, linear_forward, softplus_pool_backward, softplus_pool_forward, ConvGeom, FeatureMap,
    NormCache, Real,
};
use crate::error::{Error, Result};
use crate::rng;

/// How the optimizer treats a parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamRole {
    Weight,
    Bias,
    Norm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub role: ParamRole,
    /// Axis along which the tensor is partitioned into per-group blocks.
    pub group_axis: Option<usize>,
}

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    pub params: Vec<Param>,
}

/// Gradient buffers aligned with a [`ParamStore`].
pub type Grads = Vec<Vec<f32>>;

impl ParamStore {
    pub(crate) fn push(&mut self, name: String, shape: Vec<usize>, data: Vec<f32>, role: ParamRole, group_axis: Option<usize>) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.params.push(Param {
            name,
            shape,
            data,
            role,
            group_axis,
        });
        self.params.len() - 1
    }

    pub fn zero_grads(&self) -> Grads {
        self.params.iter().map(|p| vec![0.0; p.data.len()]).collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }
}

/// Mutable views of two distinct gradient buffers.
fn pair_mut(grads: &mut Grads, a: usize, b: usize) -> (&mut [f32], &mut [f32]) {
    assert!(a < b, "weight index precedes bias index");
    let (lo, hi) = grads.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

/// Per-channel divisor applied to raw intensities before the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelNormalizer {
    pub scale: Vec<f32>,
}

impl ChannelNormalizer {
    pub fn identity(channels: usize) -> Self {
        Self {
            scale: vec![1.0; channels],
        }
    }

    pub fn apply(&self, patch: &mut FeatureMap) {
        for (c, &s) in self.scale.iter().enumerate() {
            let inv = 1.0 / s;
            patch.plane_mut(c).iter_mut().for_each(|v| *v *= inv);
        }
    }

    pub fn applied(&self, patch: &FeatureMap) -> FeatureMap {
        let mut p = patch.clone();
        self.apply(&mut p);
        p
    }
}

/// Pooled per-group features at the interpretability stage of one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpretabilityActivations {
    pub groups: usize,
    pub features_per_group: usize,
    /// Row-major `(groups, features_per_group)`.
    pub values: Vec<f32>,
}

impl InterpretabilityActivations {
    pub fn group(&self, g: usize) -> &[f32] {
        &self.values[g * self.features_per_group..(g + 1) * self.features_per_group]
    }

    pub fn channel_contribution(&self) -> Vec<f32> {
        channel_contribution(self)
    }
}

/// Mean of each group's interpretability features.
pub fn channel_contribution(act: &InterpretabilityActivations) -> Vec<f32> {
    (0..act.groups)
        .map(|g| {
            let s: f64 = act.group(g).iter().map(|&v| v as f64).sum();
            (s / act.features_per_group as f64) as f32
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f32>,
}

impl Embedding {
    /// Unit-norm copy of the embedding. A zero vector is returned unchanged.
    pub fn normalized(&self) -> Vec<f32> {
        let n = self.vector.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
        if n == 0.0 {
            return self.vector.clone();
        }
        self.vector.iter().map(|&v| (v as f64 / n) as f32).collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvLayer {
    geom: ConvGeom,
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct NormLayer {
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    conv: ConvLayer,
    norm: NormLayer,
    expand: ConvLayer,
    project: ConvLayer,
}

#[derive(Debug, Clone)]
struct Stage {
    down: Option<ConvLayer>,
    blocks: Vec<Block>,
}

#[derive(Debug, Clone)]
struct Layout {
    stem: ConvLayer,
    stages: Vec<Stage>,
    mix_w: usize,
    mix_b: usize,
}

/// Grouped-convolution encoder.
///
/// Layer plan: grouped 3x3 stem (channels -> groups * F), then stages of
/// residual blocks `x + project(gelu(expand(norm(conv3x3(x)))))` where every
/// convolution has exactly `groups` groups and the norm computes statistics
/// inside one group. Stages are joined by grouped strided convolutions. The
/// last stage passes through softplus and is globally averaged (the interpretability
/// stage), and a single dense layer mixes all groups into the embedding.
#[derive(Debug, Clone)]
pub struct NextChannelEncoder {
    config: ModelConfig,
    params: ParamStore,
    normalizer: ChannelNormalizer,
    layout: Layout,
}

struct BlockTrace<T> {
    input: FeatureMap<T>,
    conv_out_norm: NormCache<T>,
    normed: FeatureMap<T>,
    expanded: FeatureMap<T>,
    activated: FeatureMap<T>,
}

struct StageTrace<T> {
    down_input: Option<FeatureMap<T>>,
    blocks: Vec<BlockTrace<T>>,
}

/// Intermediate values of one forward pass, kept for the backward pass.
pub struct ForwardTrace<T = f32> {
    input: FeatureMap<T>,
    stages: Vec<StageTrace<T>>,
    last: FeatureMap<T>,
    pub pooled: Vec<T>,
    pub embedding: Vec<T>,
}

impl NextChannelEncoder {
    /// Builds an encoder with deterministic initialization for `(config, seed)`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::default();
        let mut rng = rng::stream(seed, &[rng::DOMAIN_INIT]);
        let g = config.groups;
        let d = config.width();
        let f = config.features_per_group;
        let e = config.expansion;

        let mut conv = |params: &mut ParamStore, name: &str, geom: ConvGeom, gain: f64| -> ConvLayer {
            let std = gain * (2.0 / geom.fan_in() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            let w: Vec<f32> = (0..geom.weight_len()).map(|_| normal.sample(&mut rng) as f32).collect();
            let w = params.push(format!("{name}.weight"), geom.weight_shape(), w, ParamRole::Weight, Some(0));
            let b = params.push(format!("{name}.bias"), vec![geom.out_ch], vec![0.0; geom.out_ch], ParamRole::Bias, Some(0));
            ConvLayer { geom, w, b }
        };

        let stem = conv(
            &mut params,
            "stem",
            ConvGeom { in_ch: config.channels, out_ch: d, groups: g, kernel: 3, stride: 1, pad: 1 },
            1.0,
        );
        let mut stages = Vec::with_capacity(config.stage_depths.len());
        for (s, &depth) in config.stage_depths.iter().enumerate() {
            let down = (s > 0).then(|| {
                let k = config.downsample_factors[s - 1];
                conv(
                    &mut params,
                    &format!("stages.{s}.down"),
                    ConvGeom { in_ch: d, out_ch: d, groups: g, kernel: k, stride: k, pad: 0 },
                    // keeps the residual stream at a similar scale
                    (0.5f64).sqrt(),
                )
            });
            let mut blocks = Vec::with_capacity(depth);
            for b in 0..depth {
                let prefix = format!("stages.{s}.blocks.{b}");
                let c = conv(
                    &mut params,
                    &format!("{prefix}.conv"),
                    ConvGeom { in_ch: d, out_ch: d, groups: g, kernel: 3, stride: 1, pad: 1 },
                    1.0,
                );
                let gamma = params.push(format!("{prefix}.norm.weight"), vec![d], vec![1.0; d], ParamRole::Norm, Some(0));
                let beta = params.push(format!("{prefix}.norm.bias"), vec![d], vec![0.0; d], ParamRole::Norm, Some(0));
                let expand = conv(
                    &mut params,
                    &format!("{prefix}.expand"),
                    ConvGeom { in_ch: d, out_ch: d * e, groups: g, kernel: 1, stride: 1, pad: 0 },
                    1.0,
                );
                let project = conv(
                    &mut params,
                    &format!("{prefix}.project"),
                    ConvGeom { in_ch: d * e, out_ch: d, groups: g, kernel: 1, stride: 1, pad: 0 },
                    0.1,
                );
                blocks.push(Block { conv: c, norm: NormLayer { gamma, beta }, expand, project });
            }
            stages.push(Stage { down, blocks });
        }
        let interp = config.interp_dim();
        let n = config.embed_dim;
        let normal = Normal::new(0.0, (1.0 / interp as f64).sqrt()).expect("finite std");
        let w: Vec<f32> = (0..n * interp).map(|_| normal.sample(&mut rng) as f32).collect();
        let mix_w = params.push("mix.weight".into(), vec![n, interp], w, ParamRole::Weight, Some(1));
        let mix_b = params.push("mix.bias".into(), vec![n], vec![0.0; n], ParamRole::Bias, None);
        debug_assert_eq!(f * g, interp);

        Ok(Self {
            config: config.clone(),
            params,
            normalizer: ChannelNormalizer::identity(config.channels),
            layout: Layout { stem, stages, mix_w, mix_b },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn normalizer(&self) -> &ChannelNormalizer {
        &self.normalizer
    }

    pub fn set_normalizer(&mut self, normalizer: ChannelNormalizer) -> Result<()> {
        if normalizer.scale.len() != self.config.channels {
            return Err(Error::Shape(format!(
                "normalizer has {} channels, encoder expects {}",
                normalizer.scale.len(),
                self.config.channels
            )));
        }
        if normalizer.scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Data("normalizer scales must be finite and positive".into()));
        }
        self.normalizer = normalizer;
        Ok(())
    }

    /// Replaces all parameter values. Names and shapes must match.
    pub(crate) fn replace_params(&mut self, params: ParamStore, normalizer: ChannelNormalizer) -> Result<()> {
        if params.params.len() != self.params.params.len() {
            return Err(Error::Corrupt("parameter count does not match the configuration".into()));
        }
        for (mine, theirs) in self.params.params.iter().zip(&params.params) {
            if mine.name != theirs.name || mine.shape != theirs.shape {
                return Err(Error::Corrupt(format!(
                    "parameter `{}` {:?} does not match expected `{}` {:?}",
                    theirs.name, theirs.shape, mine.name, mine.shape
                )));
            }
        }
        self.set_normalizer(normalizer)
            .map_err(|e| Error::Corrupt(format!("stored normalizer: {e}")))?;
        self.params = params;
        Ok(())
    }

    pub fn check_input<T: Real>(&self, patch: &FeatureMap<T>) -> Result<()> {
        if patch.channels != self.config.channels {
            return Err(Error::Shape(format!(
                "patch has {} channels, encoder expects {}",
                patch.channels, self.config.channels
            )));
        }
        let min = self.config.min_input_size();
        if patch.height < min || patch.width < min {
            return Err(Error::Shape(format!(
                "patch is {}x{}, minimum input size is {min}x{min}",
                patch.height, patch.width
            )));
        }
        if !patch.is_finite() {
            return Err(Error::Data("patch contains non-finite values".into()));
        }
        Ok(())
    }

    /// Forward pass on an already normalized patch.
    pub fn forward(&self, patch: &FeatureMap) -> Result<(InterpretabilityActivations, Embedding)> {
        let trace = self.forward_trace(patch)?;
        Ok(self.outputs(&trace))
    }

    /// Forward pass on raw intensities: applies the stored normalizer first.
    pub fn forward_raw(&self, patch: &FeatureMap) -> Result<(InterpretabilityActivations, Embedding)> {
        self.forward(&self.normalizer.applied(patch))
    }

    pub fn outputs(&self, trace: &ForwardTrace) -> (InterpretabilityActivations, Embedding) {
        (
            InterpretabilityActivations {
                groups: self.config.groups,
                features_per_group: self.config.features_per_group,
                values: trace.pooled.clone(),
            },
            Embedding {
                vector: trace.embedding.clone(),
            },
        )
    }

    pub fn forward_trace(&self, patch: &FeatureMap) -> Result<ForwardTrace> {
        self.check_input(patch)?;
        let p: Vec<&[f32]> = self.params.params.iter().map(|p| p.data.as_slice()).collect();
        Ok(self.trace_with(&p, patch))
    }

    /// Forward pass evaluated entirely in `f64`, returning the
    /// interpretability features and the embedding. Used as a numerical
    /// reference for the single-precision path.
    pub fn forward_f64(&self, patch: &FeatureMap<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
        let p: Vec<Vec<f64>> = self
            .params
            .params
            .iter()
            .map(|p| p.data.iter().map(|&v| v as f64).collect())
            .collect();
        self.forward_f64_with(&p, patch)
    }

    /// As [`Self::forward_f64`] with parameter values supplied by the caller,
    /// aligned with [`Self::params`].
    pub fn forward_f64_with(&self, params: &[Vec<f64>], patch: &FeatureMap<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_input(patch)?;
        if params.len() != self.params.len()
            || params.iter().zip(&self.params.params).any(|(a, b)| a.len() != b.data.len())
        {
            return Err(Error::Shape("parameter values do not match the encoder layout".into()));
        }
        let p: Vec<&[f64]> = params.iter().map(|v| v.as_slice()).collect();
        let trace = self.trace_with(&p, patch);
        Ok((trace.pooled, trace.embedding))
    }

    fn trace_with<T: Real>(&self, p: &[&[T]], patch: &FeatureMap<T>) -> ForwardTrace<T> {
        let groups = self.config.groups;
        let conv = |layer: &ConvLayer, x: &FeatureMap<T>| conv_forward(&layer.geom, p[layer.w], p[layer.b], x);

        let mut x = conv(&self.layout.stem, patch);
        let mut stages = Vec::with_capacity(self.layout.stages.len());
        for stage in &self.layout.stages {
            let down_input = if let Some(down) = &stage.down {
                let y = conv(down, &x);
                Some(std::mem::replace(&mut x, y))
            } else {
                None
            };
            let mut blocks = Vec::with_capacity(stage.blocks.len());
            for block in &stage.blocks {
                let conv_out = conv(&block.conv, &x);
                let (normed, norm_cache) =
                    group_norm_forward(&conv_out, groups, p[block.norm.gamma], p[block.norm.beta]);
                let expanded = conv(&block.expand, &normed);
                let mut activated = expanded.clone();
                activated.data.iter_mut().for_each(|v| *v = gelu(*v));
                let mut out = conv(&block.project, &activated);
                for (o, &r) in out.data.iter_mut().zip(&x.data) {
                    *o = *o + r;
                }
                blocks.push(BlockTrace {
                    input: std::mem::replace(&mut x, out),
                    conv_out_norm: norm_cache,
                    normed,
                    expanded,
                    activated,
                });
            }
            stages.push(StageTrace { down_input, blocks });
        }
        let pooled = softplus_pool_forward(&x);
        let embedding = linear_forward(p[self.layout.mix_w], p[self.layout.mix_b], &pooled);
        ForwardTrace {
            input: patch.clone(),
            stages,
            last: x,
            pooled,
            embedding,
        }
    }

    /// Backpropagates from the embedding. Accumulates into `grads` when
    /// given and returns the input gradient when `want_input` is set.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        grad_embedding: &[f32],
        grads: Option<&mut Grads>,
        want_input: bool,
    ) -> Option<FeatureMap> {
        let p = &self.params.params;
        let mut grads = grads;
        let grad_pooled = linear_backward(
            &p[self.layout.mix_w].data,
            &trace.pooled,
            grad_embedding,
            grads.as_deref_mut().map(|g| pair_mut(g, self.layout.mix_w, self.layout.mix_b)),
        );
        self.backward_from_pooled(trace, &grad_pooled, grads, want_input)
    }

    /// Backpropagates from the interpretability features.
    pub fn backward_from_pooled(
        &self,
        trace: &ForwardTrace,
        grad_pooled: &[f32],
        mut grads: Option<&mut Grads>,
        want_input: bool,
    ) -> Option<FeatureMap> {
        let p = &self.params.params;
        let groups = self.config.groups;
        let conv_back = |layer: &ConvLayer, input: &FeatureMap, go: &FeatureMap, grads: Option<&mut Grads>, want: bool| {
            conv_backward(
                &layer.geom,
                &p[layer.w].data,
                input,
                go,
                grads.map(|g| pair_mut(g, layer.w, layer.b)),
                want,
            )
        };

        let mut g = softplus_pool_backward(&trace.last, grad_pooled);
        for (stage, st) in self.layout.stages.iter().zip(&trace.stages).rev() {
            for (block, bt) in stage.blocks.iter().zip(&st.blocks).rev() {
                let g_act = conv_back(&block.project, &bt.activated, &g, grads.as_deref_mut(), true)
                    .expect("input gradient requested");
                let mut g_exp = g_act;
                for (d, &u) in g_exp.data.iter_mut().zip(&bt.expanded.data) {
                    *d *= gelu_grad(u);
                }
                let g_norm = conv_back(&block.expand, &bt.normed, &g_exp, grads.as_deref_mut(), true)
                    .expect("input gradient requested");
                let g_conv = group_norm_backward(
                    &bt.conv_out_norm,
                    groups,
                    &p[block.norm.gamma].data,
                    &g_norm,
                    grads.as_deref_mut().map(|gr| pair_mut(gr, block.norm.gamma, block.norm.beta)),
                );
                let g_branch = conv_back(&block.conv, &bt.input, &g_conv, grads.as_deref_mut(), true)
                    .expect("input gradient requested");
                for (d, &b) in g.data.iter_mut().zip(&g_branch.data) {
                    *d += b;
                }
            }
            if let (Some(down), Some(down_input)) = (&stage.down, &st.down_input) {
                g = conv_back(down, down_input, &g, grads.as_deref_mut(), true).expect("input gradient requested");
            }
        }
        conv_back(&self.layout.stem, &trace.input, &g, grads, want_input)
    }

    /// Returns a copy whose group `i` carries the parameters of group
    /// `perm[i]` of `self`. Feeding it the input channels permuted the same
    /// way permutes the interpretability groups accordingly.
    pub fn permute_groups(&self, perm: &[usize]) -> Result<Self> {
        let g = self.config.groups;
        let mut seen = vec![false; g];
        if perm.len() != g || perm.iter().any(|&i| i >= g || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::Data(format!("not a permutation of {g} groups")));
        }
        let mut out = self.clone();
        for param in &mut out.params.params {
            if let Some(axis) = param.group_axis {
                param.data = permute_blocks(&param.data, &param.shape, axis, perm);
            }
        }
        out.normalizer.scale = permute_blocks(&self.normalizer.scale, &[self.config.channels], 0, perm);
        Ok(out)
    }
}

/// Permutes `perm.len()` equal blocks along `axis` of a row-major tensor.
fn permute_blocks(data: &[f32], shape: &[usize], axis: usize, perm: &[usize]) -> Vec<f32> {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let block = shape[axis] / perm.len() * inner;
    let row = shape[axis] * inner;
    let mut out = Vec::with_capacity(data.len());
    for o in 0..outer {
        let base = o * row;
        for &src in perm {
            out.extend_from_slice(&data[base + src * block..base + (src + 1) * block]);
        }
    }
    out
}

/// Splits a channel permutation-compatible patch: channel block `i` of the
/// result is channel block `perm[i]` of `patch`.
pub fn permute_channel_blocks(patch: &FeatureMap, groups: usize, perm: &[usize]) -> FeatureMap {
    let data = permute_blocks(&patch.data, &[patch.channels * patch.plane_len()], 0, perm);
    debug_assert_eq!(patch.channels % groups, 0);
    FeatureMap::from_vec(patch.channels, patch.height, patch.width, data)
}
