use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::layers::{linear_backward, linear_forward};
use crate::model::{Grads, ParamRole, ParamStore};
use crate::rng;

/// Two-layer MLP used only by the contrastive loss: `widths[0] -> widths[1]`
/// with ReLU, then `-> widths[2]`, followed by L2 normalization. The layers
/// have no biases, so every head tensor is trained with layer-wise rates.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub widths: [usize; 3],
    pub params: ParamStore,
    zero_bias: Vec<f32>,
}

/// Values kept from the forward pass of one embedding.
#[derive(Debug, Clone)]
pub struct HeadTrace {
    input: Vec<f32>,
    hidden: Vec<f32>,
    out: Vec<f32>,
    norm: f64,
    /// Unit-norm projection.
    pub z: Vec<f32>,
}

impl ProjectionHead {
    pub fn build(widths: &[usize], seed: u64) -> Result<Self> {
        let widths: [usize; 3] = widths
            .try_into()
            .map_err(|_| Error::config("projection_head", "exactly three widths are required"))?;
        if widths.contains(&0) {
            return Err(Error::config("projection_head", "widths must be positive"));
        }
        let mut rng = rng::stream(seed, &[rng::DOMAIN_INIT, 2]);
        let mut params = ParamStore::default();
        for (l, (fan_in, fan_out, gain)) in [(widths[0], widths[1], 2.0), (widths[1], widths[2], 1.0)].into_iter().enumerate() {
            let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("finite std");
            let w = (0..fan_in * fan_out).map(|_| normal.sample(&mut rng) as f32).collect();
            params.push(format!("head.{l}.weight"), vec![fan_out, fan_in], w, ParamRole::Weight, None);
        }
        Ok(Self {
            widths,
            params,
            zero_bias: vec![0.0; widths[1].max(widths[2])],
        })
    }

    pub fn forward(&self, embedding: &[f32]) -> HeadTrace {
        let p = &self.params.params;
        let pre = linear_forward(&p[0].data, &self.zero_bias[..self.widths[1]], embedding);
        // written so that NaN propagates instead of clamping to zero
        let hidden: Vec<f32> = pre.iter().map(|&v| if v < 0.0 { 0.0 } else { v }).collect();
        let out = linear_forward(&p[1].data, &self.zero_bias[..self.widths[2]], &hidden);
        let norm = out.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt().max(1e-12);
        let z = out.iter().map(|&v| (v as f64 / norm) as f32).collect();
        HeadTrace {
            input: embedding.to_vec(),
            hidden,
            out,
            norm,
            z,
        }
    }

    /// Gradient with respect to the embedding given `dL/dz`. Parameter
    /// gradients are accumulated into `grads`.
    pub fn backward(&self, trace: &HeadTrace, grad_z: &[f64], grads: &mut Grads) -> Vec<f32> {
        let p = &self.params.params;
        // z = out / |out|  =>  d out = (dz - z (z . dz)) / |out|
        let zdot: f64 = trace.z.iter().zip(grad_z).map(|(&z, &g)| z as f64 * g).sum();
        let g_out: Vec<f32> = trace
            .z
            .iter()
            .zip(grad_z)
            .map(|(&z, &g)| ((g - z as f64 * zdot) / trace.norm) as f32)
            .collect();
        debug_assert_eq!(g_out.len(), trace.out.len());
        let (g0, g1) = grads.split_at_mut(1);
        let mut unused = vec![0.0; self.zero_bias.len()];
        let mut g_hidden = linear_backward(
            &p[1].data,
            &trace.hidden,
            &g_out,
            Some((&mut g1[0], &mut unused[..self.widths[2]])),
        );
        for (g, &h) in g_hidden.iter_mut().zip(&trace.hidden) {
            if h <= 0.0 {
                *g = 0.0;
            }
        }
        linear_backward(
            &p[0].data,
            &trace.input,
            &g_hidden,
            Some((&mut g0[0], &mut unused[..self.widths[1]])),
        )
    }
}
