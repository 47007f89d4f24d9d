use rand_chacha::ChaCha8Rng;
use sllen_tensor::{Binding, Graph, ParamSet, Var};

use crate::nn::Conv;
use crate::{Error, Result};

/// Output of the encoder: bottleneck, pre-pool skips, and the per-stage
/// embeddings supervised by the distillation loss (the skips themselves).
#[derive(Debug, Clone)]
pub struct Encoded {
    pub l: Var,
    pub skips: Vec<Var>,
    pub embeddings: Vec<Var>,
}

#[derive(Debug, Clone)]
pub(crate) struct Encoder {
    stages: Vec<(Conv, Conv)>,
    bottleneck: (Conv, Conv),
    depth: usize,
}

impl Encoder {
    pub fn new(params: &mut ParamSet, base: usize, depth: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut cin = 3;
        let stages = (0..depth)
            .map(|i| {
                let c = base << i;
                let a = Conv::new(params, &format!("enc{}.conv1", i + 1), cin, c, 3, 1, rng);
                let b = Conv::new(params, &format!("enc{}.conv2", i + 1), c, c, 3, 1, rng);
                cin = c;
                (a, b)
            })
            .collect();
        let cb = base << depth;
        let bottleneck = (
            Conv::new(params, "bottleneck.conv1", cin, cb, 3, 1, rng),
            Conv::new(params, "bottleneck.conv2", cb, cb, 3, 1, rng),
        );
        Self {
            stages,
            bottleneck,
            depth,
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding, img: Var) -> Result<Encoded> {
        let s = g.shape(img).to_vec();
        let m = 1 << self.depth;
        if s.len() != 4 || s[1] != 3 || !s[2].is_multiple_of(m) || !s[3].is_multiple_of(m) || s[2] == 0 || s[3] == 0 {
            return Err(Error::Shape(format!(
                "encoder input must be (N,3,H,W) with H,W multiples of {m}, got {s:?}"
            )));
        }
        let mut x = img;
        let mut skips = Vec::with_capacity(self.depth);
        for (c1, c2) in &self.stages {
            let y = c1.forward_relu(g, b, x)?;
            let y = c2.forward_relu(g, b, y)?;
            skips.push(y);
            x = g.max_pool2(y)?;
        }
        let y = self.bottleneck.0.forward_relu(g, b, x)?;
        let l = self.bottleneck.1.forward_relu(g, b, y)?;
        Ok(Encoded {
            l,
            embeddings: skips.clone(),
            skips,
        })
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Decoder {
    /// Per stage: upsampling conv, then two convs after skip concatenation.
    stages: Vec<(Conv, Conv, Conv)>,
    out: Conv,
}

impl Decoder {
    pub fn new(params: &mut ParamSet, base: usize, depth: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut cin = base << depth;
        let stages = (0..depth)
            .map(|j| {
                let c = base << (depth - 1 - j);
                let n = j + 1;
                let up = Conv::new(params, &format!("dec{n}.up"), cin, c, 3, 1, rng);
                let a = Conv::new(params, &format!("dec{n}.conv1"), 2 * c, c, 3, 1, rng);
                let b = Conv::new(params, &format!("dec{n}.conv2"), c, c, 3, 1, rng);
                cin = c;
                (up, a, b)
            })
            .collect();
        let out = Conv::new(params, "dec.out", base, 3, 1, 1, rng);
        Self { stages, out }
    }

    /// Returns the sigmoid output image and the decoder embeddings `D_1..D_n`,
    /// where `D_j` mirrors encoder stage `n - j + 1`. Each embedding is the
    /// upsampled branch that meets the skip, taken before concatenation.
    pub fn forward(&self, g: &mut Graph, b: &Binding, f: Var, skips: &[Var]) -> Result<(Var, Vec<Var>)> {
        if skips.len() != self.stages.len() {
            return Err(Error::Shape(format!(
                "decoder expects {} skips, got {}",
                self.stages.len(),
                skips.len()
            )));
        }
        let mut x = f;
        let mut ds = Vec::with_capacity(skips.len());
        for ((up, c1, c2), &skip) in self.stages.iter().zip(skips.iter().rev()) {
            let ss = g.shape(skip).to_vec();
            let u = g.resize_bilinear(x, ss[2], ss[3])?;
            let u = up.forward_relu(g, b, u)?;
            ds.push(u);
            let cat = g.concat(&[skip, u], 1)?;
            let y = c1.forward_relu(g, b, cat)?;
            let y = c2.forward_relu(g, b, y)?;
            x = y;
        }
        let logits = self.out.forward(g, b, x)?;
        Ok((g.sigmoid(logits), ds))
    }
}
