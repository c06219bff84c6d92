//! Fully connected stacks with SiLU between layers, shared by both networks.

use rand::Rng as _;

use crate::autograd::{Graph, NodeId};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
struct Dense {
    weight: ParamId,
    bias: ParamId,
}

/// Weights are stored `[in, out]`, so a layer computes `x·W + b`.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Dense>,
    widths: Vec<usize>,
}

impl Mlp {
    /// Registers `widths.len() - 1` layers named `<prefix>.<i>.{weight,bias}`
    /// with Glorot-uniform weights and zero biases.
    pub fn init(store: &mut ParamStore, prefix: &str, widths: &[usize], rng: &mut Rng) -> Result<Self> {
        let mut layers = Vec::with_capacity(widths.len().saturating_sub(1));
        for (i, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f32).sqrt();
            let w: Vec<f32> = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
            let weight = store.add(format!("{prefix}.{i}.weight"), Tensor::matrix(fan_in, fan_out, w)?)?;
            let bias = store.add(format!("{prefix}.{i}.bias"), Tensor::zeros(&[fan_out]))?;
            layers.push(Dense { weight, bias });
        }
        Ok(Mlp {
            layers,
            widths: widths.to_vec(),
        })
    }

    /// Re-binds to parameters already present in `store` (e.g. after loading a
    /// checkpoint).
    pub fn bind(store: &ParamStore, prefix: &str, widths: &[usize]) -> Result<Self> {
        let mut layers = Vec::new();
        for i in 0..widths.len().saturating_sub(1) {
            let find = |suffix: &str| {
                let name = format!("{prefix}.{i}.{suffix}");
                store
                    .id_of(&name)
                    .ok_or_else(|| crate::Error::format(format!("missing parameter `{name}`")))
            };
            layers.push(Dense {
                weight: find("weight")?,
                bias: find("bias")?,
            });
        }
        Ok(Mlp {
            layers,
            widths: widths.to_vec(),
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Linear layers with SiLU between them; the last layer is left linear.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = g.param(store, layer.weight);
            let b = g.param(store, layer.bias);
            h = g.matmul(h, w)?;
            h = g.add(h, b)?;
            if i + 1 < self.layers.len() {
                h = g.silu(h)?;
            }
        }
        Ok(h)
    }
}
