//! Group-separated layer kernels with hand-written backward passes.
//!
//! All feature maps are planar (channel-major). Channels are laid out group
//! by group, so group `g` owns the contiguous planes
//! `[g * per_group, (g + 1) * per_group)`. No kernel in this module reads a
//! plane outside the group it is computing.
//!
//! Kernels are generic over the scalar so the same code can be evaluated in
//! `f64` when checking gradients numerically.

use std::iter::Sum;

use num_traits::Float;

/// Scalar type accepted by the kernels.
pub trait Real: Float + Sum + Send + Sync + std::fmt::Debug + 'static {}

impl Real for f32 {}
impl Real for f64 {}

#[inline]
fn lit<T: Real>(v: f64) -> T {
    T::from(v).expect("representable constant")
}

/// Planar `channels x height x width` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T = f32> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), channels * height * width, "feature map size");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn plane_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut T {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-wise conversion to another scalar type.
    pub fn cast<U: Real>(&self) -> FeatureMap<U> {
        FeatureMap {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| U::from(v).expect("finite cast")).collect(),
        }
    }
}

/// Geometry of a grouped 2-D convolution. Weights are laid out
/// `[out_ch][in_ch / groups][kernel][kernel]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub groups: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn in_per_group(&self) -> usize {
        self.in_ch / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_ch / self.groups
    }

    pub fn weight_len(&self) -> usize {
        self.out_ch * self.in_per_group() * self.kernel * self.kernel
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_ch, self.in_per_group(), self.kernel, self.kernel]
    }

    pub fn fan_in(&self) -> usize {
        self.in_per_group() * self.kernel * self.kernel
    }

    pub fn out_size(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `ox` whose input column `ox * stride + kx - pad` lies
    /// inside `[0, in_w)`.
    #[inline]
    fn valid_cols(&self, kx: usize, in_w: usize, out_w: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kx as isize - self.pad as isize;
        // smallest ox with ox*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest ox with ox*s + off <= in_w - 1
        let hi_num = in_w as isize - 1 - off;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let lo = lo.max(0) as usize;
        let hi = (hi + 1).min(out_w as isize).max(0) as usize;
        (lo, hi.max(lo))
    }
}

/// Zero-padded copy of one plane with row stride `w + 2 pad`, followed by
/// `tail` extra zeros so shifted flat windows stay in bounds.
fn pad_plane<T: Real>(src: &[T], h: usize, w: usize, pad: usize, tail: usize) -> Vec<T> {
    let pw = w + 2 * pad;
    let mut out = vec![T::zero(); (h + 2 * pad) * pw + tail];
    for y in 0..h {
        let d = (y + pad) * pw + pad;
        out[d..d + w].copy_from_slice(&src[y * w..(y + 1) * w]);
    }
    out
}

// Stride-1 convolution on padded planes. Output rows are computed with the
// padded row stride, so every tap becomes one long contiguous loop; the
// extra columns at the end of each row are discarded.
fn conv_forward_s1<T: Real>(geom: &ConvGeom, weight: &[T], bias: &[T], input: &FeatureMap<T>) -> FeatureMap<T> {
    let (ih, iw, k, pad) = (input.height, input.width, geom.kernel, geom.pad);
    let (oh, ow) = (geom.out_size(ih), geom.out_size(iw));
    let pw = iw + 2 * pad;
    let n = oh * pw;
    let mut out = FeatureMap::<T>::zeros(geom.out_ch, oh, ow);
    let (ipg, opg) = (geom.in_per_group(), geom.out_per_group());
    let mut acc = vec![T::zero(); n];
    for g in 0..geom.groups {
        let padded: Vec<Vec<T>> = (0..ipg)
            .map(|i| pad_plane(input.plane(g * ipg + i), ih, iw, pad, k))
            .collect();
        for o in 0..opg {
            let oc = g * opg + o;
            acc.fill(bias[oc]);
            for (i, src) in padded.iter().enumerate() {
                let wbase = (oc * ipg + i) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let w = weight[wbase + ky * k + kx];
                        let off = ky * pw + kx;
                        for (a, &x) in acc.iter_mut().zip(&src[off..off + n]) {
                            *a = *a + w * x;
                        }
                    }
                }
            }
            let dst = out.plane_mut(oc);
            for y in 0..oh {
                dst[y * ow..(y + 1) * ow].copy_from_slice(&acc[y * pw..y * pw + ow]);
            }
        }
    }
    out
}

fn conv_backward_s1<T: Real>(
    geom: &ConvGeom,
    weight: &[T],
    input: &FeatureMap<T>,
    grad_out: &FeatureMap<T>,
    mut grad_w: Option<(&mut [T], &mut [T])>,
    want_input: bool,
) -> Option<FeatureMap<T>> {
    let (ih, iw, k, pad) = (input.height, input.width, geom.kernel, geom.pad);
    let (oh, ow) = (grad_out.height, grad_out.width);
    let pw = iw + 2 * pad;
    let ph = ih + 2 * pad;
    let n = oh * pw;
    let (ipg, opg) = (geom.in_per_group(), geom.out_per_group());
    let mut grad_in = want_input.then(|| FeatureMap::zeros(geom.in_ch, ih, iw));
    let mut go_pad = vec![T::zero(); n];
    let mut gi_pad: Vec<Vec<T>> = vec![vec![T::zero(); ph * pw + k]; ipg];
    for g in 0..geom.groups {
        let padded: Vec<Vec<T>> = (0..ipg)
            .map(|i| pad_plane(input.plane(g * ipg + i), ih, iw, pad, k))
            .collect();
        if want_input {
            gi_pad.iter_mut().for_each(|v| v.fill(T::zero()));
        }
        for o in 0..opg {
            let oc = g * opg + o;
            let go = grad_out.plane(oc);
            for y in 0..oh {
                go_pad[y * pw..y * pw + ow].copy_from_slice(&go[y * ow..(y + 1) * ow]);
            }
            if let Some((_, gb)) = grad_w.as_mut() {
                gb[oc] = gb[oc] + go.iter().copied().sum::<T>();
            }
            for i in 0..ipg {
                let wbase = (oc * ipg + i) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let off = ky * pw + kx;
                        if let Some((gw, _)) = grad_w.as_mut() {
                            let widx = wbase + ky * k + kx;
                            gw[widx] = gw[widx] + dot(&go_pad, &padded[i][off..off + n]);
                        }
                        if want_input {
                            let w = weight[wbase + ky * k + kx];
                            for (d, &x) in gi_pad[i][off..off + n].iter_mut().zip(&go_pad) {
                                *d = *d + w * x;
                            }
                        }
                    }
                }
            }
        }
        if let Some(gi) = grad_in.as_mut() {
            for (i, src) in gi_pad.iter().enumerate() {
                let dst = gi.plane_mut(g * ipg + i);
                for y in 0..ih {
                    let s = (y + pad) * pw + pad;
                    dst[y * iw..(y + 1) * iw].copy_from_slice(&src[s..s + iw]);
                }
            }
        }
    }
    grad_in
}

pub fn conv_forward<T: Real>(geom: &ConvGeom, weight: &[T], bias: &[T], input: &FeatureMap<T>) -> FeatureMap<T> {
    debug_assert_eq!(input.channels, geom.in_ch);
    debug_assert_eq!(weight.len(), geom.weight_len());
    if geom.stride == 1 && geom.kernel > 1 {
        return conv_forward_s1(geom, weight, bias, input);
    }
    let (ih, iw) = (input.height, input.width);
    let (oh, ow) = (geom.out_size(ih), geom.out_size(iw));
    let mut out = FeatureMap::<T>::zeros(geom.out_ch, oh, ow);
    let (ipg, opg, k) = (geom.in_per_group(), geom.out_per_group(), geom.kernel);
    for g in 0..geom.groups {
        for o in 0..opg {
            let oc = g * opg + o;
            let out_plane = out.plane_mut(oc);
            out_plane.fill(bias[oc]);
            for i in 0..ipg {
                let ic = g * ipg + i;
                let in_plane = input.plane(ic);
                let wbase = (oc * ipg + i) * k * k;
                if geom.is_pointwise() {
                    let w = weight[wbase];
                    for (o, &x) in out_plane.iter_mut().zip(in_plane) {
                        *o = *o + w * x;
                    }
                    continue;
                }
                for ky in 0..k {
                    for kx in 0..k {
                        let w = weight[wbase + ky * k + kx];
                        let (lo, hi) = geom.valid_cols(kx, iw, ow);
                        if lo >= hi {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            let in_row = &in_plane[iy as usize * iw..(iy as usize + 1) * iw];
                            let out_row = &mut out_plane[oy * ow + lo..oy * ow + hi];
                            let ix0 = lo * geom.stride + kx - geom.pad;
                            if geom.stride == 1 {
                                for (o, &x) in out_row.iter_mut().zip(&in_row[ix0..ix0 + (hi - lo)]) {
                                    *o = *o + w * x;
                                }
                            } else {
                                for (j, o) in out_row.iter_mut().enumerate() {
                                    *o = *o + w * in_row[ix0 + j * geom.stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates parameter gradients into `grad_w`/`grad_b` and, when
/// requested, returns the gradient with respect to the input.
pub fn conv_backward<T: Real>(
    geom: &ConvGeom,
    weight: &[T],
    input: &FeatureMap<T>,
    grad_out: &FeatureMap<T>,
    grad_w: Option<(&mut [T], &mut [T])>,
    want_input: bool,
) -> Option<FeatureMap<T>> {
    if geom.stride == 1 && geom.kernel > 1 {
        return conv_backward_s1(geom, weight, input, grad_out, grad_w, want_input);
    }
    let (ih, iw) = (input.height, input.width);
    let (oh, ow) = (grad_out.height, grad_out.width);
    let (ipg, opg, k) = (geom.in_per_group(), geom.out_per_group(), geom.kernel);
    let mut grad_in = want_input.then(|| FeatureMap::zeros(geom.in_ch, ih, iw));
    let mut grad_w = grad_w;
    for g in 0..geom.groups {
        for o in 0..opg {
            let oc = g * opg + o;
            let go_plane = grad_out.plane(oc);
            if let Some((_, gb)) = grad_w.as_mut() {
                gb[oc] = gb[oc] + go_plane.iter().copied().sum::<T>();
            }
            for i in 0..ipg {
                let ic = g * ipg + i;
                let in_plane = input.plane(ic);
                let wbase = (oc * ipg + i) * k * k;
                if geom.is_pointwise() {
                    if let Some((gw, _)) = grad_w.as_mut() {
                        gw[wbase] = gw[wbase] + dot(go_plane, in_plane);
                    }
                    if let Some(gi) = grad_in.as_mut() {
                        let w = weight[wbase];
                        for (d, &go) in gi.plane_mut(ic).iter_mut().zip(go_plane) {
                            *d = *d + w * go;
                        }
                    }
                    continue;
                }
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = wbase + ky * k + kx;
                        let w = weight[widx];
                        let (lo, hi) = geom.valid_cols(kx, iw, ow);
                        if lo >= hi {
                            continue;
                        }
                        let mut acc = T::zero();
                        for oy in 0..oh {
                            let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            let iy = iy as usize;
                            let go_row = &go_plane[oy * ow + lo..oy * ow + hi];
                            let ix0 = lo * geom.stride + kx - geom.pad;
                            if geom.stride == 1 {
                                let in_row = &in_plane[iy * iw + ix0..iy * iw + ix0 + (hi - lo)];
                                acc = acc + dot(go_row, in_row);
                                if let Some(gi) = grad_in.as_mut() {
                                    let gi_row =
                                        &mut gi.plane_mut(ic)[iy * iw + ix0..iy * iw + ix0 + (hi - lo)];
                                    for (d, &go) in gi_row.iter_mut().zip(go_row) {
                                        *d = *d + w * go;
                                    }
                                }
                            } else {
                                for (j, &go) in go_row.iter().enumerate() {
                                    let ix = iy * iw + ix0 + j * geom.stride;
                                    acc = acc + go * in_plane[ix];
                                    if let Some(gi) = grad_in.as_mut() {
                                        let d = &mut gi.plane_mut(ic)[ix];
                                        *d = *d + w * go;
                                    }
                                }
                            }
                        }
                        if let Some((gw, _)) = grad_w.as_mut() {
                            gw[widx] = gw[widx] + acc;
                        }
                    }
                }
            }
        }
    }
    grad_in
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    // Eight independent lanes keep the reduction vectorizable.
    let mut lanes = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] = lanes[l] + x[l] * y[l];
        }
    }
    let mut s: T = lanes.iter().copied().sum();
    for (x, y) in ra.iter().zip(rb) {
        s = s + *x * *y;
    }
    s
}

const NORM_EPS: f64 = 1e-6;

/// Cached statistics of a per-group layer norm.
#[derive(Debug, Clone)]
pub struct NormCache<T = f32> {
    pub xhat: FeatureMap<T>,
    /// Reciprocal standard deviation per (group, pixel).
    pub rstd: Vec<T>,
}

/// Layer norm over the features of one group at each pixel, followed by a
/// per-channel affine map. Statistics never span two groups.
pub fn group_norm_forward<T: Real>(
    x: &FeatureMap<T>,
    groups: usize,
    gamma: &[T],
    beta: &[T],
) -> (FeatureMap<T>, NormCache<T>) {
    let per = x.channels / groups;
    let n = x.plane_len();
    let inv = T::one() / lit(per as f64);
    let eps = lit(NORM_EPS);
    let mut xhat = FeatureMap::zeros(x.channels, x.height, x.width);
    let mut out = FeatureMap::zeros(x.channels, x.height, x.width);
    let mut rstd = vec![T::zero(); groups * n];
    let mut mean = vec![T::zero(); n];
    let mut var = vec![T::zero(); n];
    for g in 0..groups {
        mean.fill(T::zero());
        var.fill(T::zero());
        for c in g * per..(g + 1) * per {
            for (m, &v) in mean.iter_mut().zip(x.plane(c)) {
                *m = *m + v;
            }
        }
        mean.iter_mut().for_each(|m| *m = *m * inv);
        for c in g * per..(g + 1) * per {
            for ((s, &v), &m) in var.iter_mut().zip(x.plane(c)).zip(&mean) {
                let d = v - m;
                *s = *s + d * d;
            }
        }
        let r = &mut rstd[g * n..(g + 1) * n];
        for (r, &s) in r.iter_mut().zip(&var) {
            *r = T::one() / (s * inv + eps).sqrt();
        }
        for c in g * per..(g + 1) * per {
            let (gm, bt) = (gamma[c], beta[c]);
            let src = x.plane(c);
            let xh = xhat.plane_mut(c);
            for p in 0..n {
                xh[p] = (src[p] - mean[p]) * r[p];
            }
            let dst = out.plane_mut(c);
            for (d, &h) in dst.iter_mut().zip(xhat.plane(c)) {
                *d = h * gm + bt;
            }
        }
    }
    (out, NormCache { xhat, rstd })
}

pub fn group_norm_backward<T: Real>(
    cache: &NormCache<T>,
    groups: usize,
    gamma: &[T],
    grad_out: &FeatureMap<T>,
    grad_params: Option<(&mut [T], &mut [T])>,
) -> FeatureMap<T> {
    let xhat = &cache.xhat;
    let per = xhat.channels / groups;
    let n = xhat.plane_len();
    let inv = T::one() / lit(per as f64);
    let mut grad_in = FeatureMap::zeros(xhat.channels, xhat.height, xhat.width);
    if let Some((gg, gb)) = grad_params {
        for c in 0..xhat.channels {
            gg[c] = gg[c] + dot(grad_out.plane(c), xhat.plane(c));
            gb[c] = gb[c] + grad_out.plane(c).iter().copied().sum::<T>();
        }
    }
    let mut m1 = vec![T::zero(); n];
    let mut m2 = vec![T::zero(); n];
    for g in 0..groups {
        m1.fill(T::zero());
        m2.fill(T::zero());
        for c in g * per..(g + 1) * per {
            let gm = gamma[c];
            for ((p1, p2), (&go, &h)) in m1
                .iter_mut()
                .zip(m2.iter_mut())
                .zip(grad_out.plane(c).iter().zip(xhat.plane(c)))
            {
                let d = go * gm;
                *p1 = *p1 + d;
                *p2 = *p2 + d * h;
            }
        }
        let r = &cache.rstd[g * n..(g + 1) * n];
        for c in g * per..(g + 1) * per {
            let gm = gamma[c];
            let go = grad_out.plane(c);
            let h = xhat.plane(c);
            let gi = grad_in.plane_mut(c);
            for p in 0..n {
                gi[p] = r[p] * (go[p] * gm - inv * m1[p] - h[p] * inv * m2[p]);
            }
        }
    }
    grad_in
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let half = lit::<T>(0.5);
    half * x * (T::one() + tanh(lit::<T>(GELU_C) * (x + lit::<T>(GELU_A) * x * x * x)))
}

/// `tanh` through a single `exp`, noticeably cheaper than the libm call.
#[inline]
fn tanh<T: Real>(y: T) -> T {
    let two = lit::<T>(2.0);
    T::one() - two / ((two * y).exp() + T::one())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let (c, a, half) = (lit::<T>(GELU_C), lit::<T>(GELU_A), lit::<T>(0.5));
    let t = tanh(c * (x + a * x * x * x));
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + lit::<T>(3.0) * a * x * x)
}

#[inline]
fn softplus<T: Real>(x: T) -> T {
    // log(1 + e^x) without overflow for large |x|
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Applies softplus and averages each plane. Output has one nonnegative
/// value per channel.
pub fn softplus_pool_forward<T: Real>(x: &FeatureMap<T>) -> Vec<T> {
    let inv = 1.0 / x.plane_len() as f64;
    (0..x.channels)
        .map(|c| {
            let s: f64 = x.plane(c).iter().map(|&v| softplus(v).to_f64().unwrap_or(f64::NAN)).sum();
            lit(s * inv)
        })
        .collect()
}

pub fn softplus_pool_backward<T: Real>(x: &FeatureMap<T>, grad_pooled: &[T]) -> FeatureMap<T> {
    let inv = T::one() / lit(x.plane_len() as f64);
    let mut out = FeatureMap::zeros(x.channels, x.height, x.width);
    for c in 0..x.channels {
        let g = grad_pooled[c] * inv;
        if g == T::zero() {
            continue;
        }
        for (d, &v) in out.plane_mut(c).iter_mut().zip(x.plane(c)) {
            *d = g * sigmoid(v);
        }
    }
    out
}

/// Dense `out = W x + b` with `W` laid out `[out][in]`.
pub fn linear_forward<T: Real>(weight: &[T], bias: &[T], x: &[T]) -> Vec<T> {
    let n_in = x.len();
    bias.iter()
        .enumerate()
        .map(|(o, &b)| b + dot(&weight[o * n_in..(o + 1) * n_in], x))
        .collect()
}

pub fn linear_backward<T: Real>(
    weight: &[T],
    x: &[T],
    grad_out: &[T],
    grad_params: Option<(&mut [T], &mut [T])>,
) -> Vec<T> {
    let n_in = x.len();
    let mut grad_in = vec![T::zero(); n_in];
    for (o, &go) in grad_out.iter().enumerate() {
        if go == T::zero() {
            continue;
        }
        let row = &weight[o * n_in..(o + 1) * n_in];
        for (gi, &w) in grad_in.iter_mut().zip(row) {
            *gi = *gi + go * w;
        }
    }
    if let Some((gw, gb)) = grad_params {
        for (o, &go) in grad_out.iter().enumerate() {
            gb[o] = gb[o] + go;
            if go == T::zero() {
                continue;
            }
            for (g, &xi) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(x) {
                *g = *g + go * xi;
            }
        }
    }
    grad_in
}
