//! Convolution layer bookkeeping and seeded initialization shared by the
//! enhancement network, the segmenter and the perceptual extractor.

use ndarray::IxDyn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sllen_tensor::{Binding, Graph, ParamId, ParamSet, Tensor, Var};

use crate::Result;

/// Deterministic generator for one named component, independent of how many
/// other components were initialized before it.
pub fn component_rng(seed: u64, component: &str) -> ChaCha8Rng {
    // FNV-1a over the component name, folded into the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in component.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h.rotate_left(17))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// He-normal weights, zero bias; `pad = k / 2`.
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        Self::with_std(params, name, cin, cout, k, stride, std, rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_std(
        params: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let w = Tensor::from_shape_simple_fn(IxDyn(&[cout, cin, k, k]), || normal.sample(rng));
        let weight = params.add(format!("{name}.weight"), w);
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(IxDyn(&[cout])));
        Self {
            weight,
            bias,
            stride,
            pad: k / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding, x: Var) -> Result<Var> {
        Ok(g.conv2d(x, b[self.weight], Some(b[self.bias]), self.stride, self.pad)?)
    }

    pub fn forward_relu(&self, g: &mut Graph, b: &Binding, x: Var) -> Result<Var> {
        let y = self.forward(g, b, x)?;
        Ok(g.relu(y))
    }

    pub fn out_channels(&self, params: &ParamSet) -> usize {
        params.get(self.weight).shape()[0]
    }
}
