use rand_chacha::ChaCha8Rng;
use sllen_tensor::{Binding, Graph, ParamSet, Var};

use crate::nn::Conv;
use crate::ssn::EMBEDDING_CHANNELS;
use crate::{Error, Result};

/// Smallest base allowed into the channel-wise power.
pub const POWER_BASE_FLOOR: f64 = 1e-6;

/// `softplus^-1(1) = ln(e - 1)`; head biases start here so alpha = beta = 1.
pub fn inverse_softplus_one() -> f64 {
    (std::f64::consts::E - 1.0).ln()
}

/// Semantic-map feature extractor: three conv3x3 + ReLU + 2x2 max-pool stages.
#[derive(Debug, Clone)]
pub(crate) struct Hseb {
    convs: Vec<Conv>,
}

impl Hseb {
    pub fn new(params: &mut ParamSet, classes: usize, widths: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut cin = classes;
        let convs = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let c = Conv::new(params, &format!("hseb.conv{}", i + 1), cin, w, 3, 1, rng);
                cin = w;
                c
            })
            .collect();
        Self { convs }
    }

    /// Features of `s`, resized to `(h, w)`.
    pub fn forward(&self, g: &mut Graph, b: &Binding, s: Var, h: usize, w: usize) -> Result<Var> {
        let mut x = s;
        for c in &self.convs {
            let y = c.forward_relu(g, b, x)?;
            x = g.max_pool2(y)?;
        }
        Ok(g.resize_bilinear(x, h, w)?)
    }
}

/// Attention with queries and values from the low-level feature and keys
/// from the semantic feature.
#[derive(Debug, Clone)]
pub(crate) struct Hsbab {
    q: Conv,
    k: Conv,
    v: Conv,
    dk: usize,
    residual: bool,
    token_cap: usize,
}

impl Hsbab {
    pub fn new(
        params: &mut ParamSet,
        channels: usize,
        semantic_channels: usize,
        dk: usize,
        residual: bool,
        token_cap: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            q: Conv::new(params, "hsbab.q", channels, dk, 1, 1, rng),
            k: Conv::new(params, "hsbab.k", semantic_channels, dk, 1, 1, rng),
            v: Conv::new(params, "hsbab.v", channels, channels, 1, 1, rng),
            dk,
            residual,
            token_cap,
        }
    }

    /// Returns `(L_H, A)` with `A` of shape (N, T, T), rows over keys.
    pub fn forward(&self, g: &mut Graph, b: &Binding, l: Var, h: Var) -> Result<(Var, Var)> {
        let ls = g.shape(l).to_vec();
        let hs = g.shape(h).to_vec();
        if ls[2..] != hs[2..] || ls[0] != hs[0] {
            return Err(Error::Shape(format!("attention inputs L {ls:?} and H {hs:?} differ spatially")));
        }
        let (n, c, t) = (ls[0], ls[1], ls[2] * ls[3]);
        if t > self.token_cap {
            return Err(Error::TokenBudgetExceeded {
                tokens: t,
                cap: self.token_cap,
            });
        }
        let q = self.q.forward(g, b, l)?;
        let q = g.reshape(q, &[n, self.dk, t])?;
        let q = g.permute(q, &[0, 2, 1])?;
        let k = self.k.forward(g, b, h)?;
        let k = g.reshape(k, &[n, self.dk, t])?;
        let logits = g.batch_matmul(q, k)?;
        let logits = g.scale(logits, 1.0 / (self.dk as f64).sqrt());
        let a = g.softmax(logits);
        let v = self.v.forward(g, b, l)?;
        let v = g.reshape(v, &[n, c, t])?;
        let vt = g.permute(v, &[0, 2, 1])?;
        let out = g.batch_matmul(a, vt)?;
        let out = g.permute(out, &[0, 2, 1])?;
        let out = g.reshape(out, &ls)?;
        let lh = if self.residual { g.add(out, l)? } else { out };
        Ok((lh, a))
    }
}

/// Channel-wise power transform `beta * max(L, floor)^alpha` with alpha and
/// beta of shape (N, C, 1, 1).
pub fn power_transform(g: &mut Graph, l: Var, alpha: Var, beta: Var) -> Result<Var> {
    let shifted = g.add_scalar(l, -POWER_BASE_FLOOR);
    let r = g.relu(shifted);
    let base = g.add_scalar(r, POWER_BASE_FLOOR);
    let logb = g.ln(base);
    let scaled = g.mul(logb, alpha)?;
    let pow = g.exp(scaled);
    Ok(g.mul(pow, beta)?)
}

/// Predicts per-channel alpha and beta from the segmenter embedding.
#[derive(Debug, Clone)]
pub(crate) struct Rsaeb {
    proj: Option<Conv>,
    c1: Conv,
    c2: Conv,
    pub(crate) head_alpha: Conv,
    pub(crate) head_beta: Conv,
}

impl Rsaeb {
    pub fn new(params: &mut ParamSet, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let proj = (channels != EMBEDDING_CHANNELS)
            .then(|| Conv::new(params, "rsaeb.proj", EMBEDDING_CHANNELS, channels, 1, 1, rng));
        let c1 = Conv::new(params, "rsaeb.conv1", channels, channels, 3, 1, rng);
        let c2 = Conv::new(params, "rsaeb.conv2", channels, channels, 3, 1, rng);
        let head_std = 0.01 / (channels as f64).sqrt();
        let mut head = |name: &str| {
            let c = Conv::with_std(params, name, channels, channels, 1, 1, head_std, rng);
            params.get_mut(c.bias).fill(inverse_softplus_one());
            c
        };
        let head_alpha = head("rsaeb.alpha");
        let head_beta = head("rsaeb.beta");
        Self {
            proj,
            c1,
            c2,
            head_alpha,
            head_beta,
        }
    }

    /// Returns `(L_B, alpha, beta)`.
    pub fn forward(&self, g: &mut Graph, b: &Binding, l: Var, emb: Var) -> Result<(Var, Var, Var)> {
        let es = g.shape(emb).to_vec();
        if es.len() != 4 || es[1] != EMBEDDING_CHANNELS || es[0] != g.shape(l)[0] {
            return Err(Error::Shape(format!(
                "embedding must be (N,{EMBEDDING_CHANNELS},h,w), got {es:?}"
            )));
        }
        let mut x = match &self.proj {
            Some(p) => p.forward(g, b, emb)?,
            None => emb,
        };
        x = self.c1.forward_relu(g, b, x)?;
        x = self.c2.forward_relu(g, b, x)?;
        let pooled = g.mean_axes(x, &[2, 3])?;
        let ar = self.head_alpha.forward(g, b, pooled)?;
        let br = self.head_beta.forward(g, b, pooled)?;
        let alpha = g.softplus(ar);
        let beta = g.softplus(br);
        let lb = power_transform(g, l, alpha, beta)?;
        Ok((lb, alpha, beta))
    }
}

/// Convex per-pixel fusion `W * a + (1 - W) * b`, `W` broadcast over channels.
pub fn fuse(g: &mut Graph, w: Var, a: Var, b: Var) -> Result<Var> {
    let wa = g.mul(w, a)?;
    let neg = g.scale(w, -1.0);
    let one_minus = g.add_scalar(neg, 1.0);
    let wb = g.mul(one_minus, b)?;
    Ok(g.add(wa, wb)?)
}

/// Fusion outputs: `F`, the weight map, and the two convolved inputs.
#[derive(Debug, Clone, Copy)]
pub struct Fused {
    pub f: Var,
    pub w_map: Var,
    pub lh_prime: Var,
    pub lb_prime: Var,
}

#[derive(Debug, Clone)]
pub(crate) struct Ffb {
    h: Conv,
    b: Conv,
    w: Conv,
}

impl Ffb {
    pub fn new(params: &mut ParamSet, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            h: Conv::new(params, "ffb.h", channels, channels, 3, 1, rng),
            b: Conv::new(params, "ffb.b", channels, channels, 3, 1, rng),
            w: Conv::new(params, "ffb.w", 2 * channels, 1, 3, 1, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, lh: Var, lb: Var) -> Result<Fused> {
        if g.shape(lh) != g.shape(lb) {
            return Err(Error::Shape(format!(
                "fusion inputs differ: {:?} vs {:?}",
                g.shape(lh),
                g.shape(lb)
            )));
        }
        let lh_prime = self.h.forward(g, bind, lh)?;
        let lb_prime = self.b.forward(g, bind, lb)?;
        let cat = g.concat(&[lh_prime, lb_prime], 1)?;
        let wl = self.w.forward(g, bind, cat)?;
        let w_map = g.sigmoid(wl);
        let f = fuse(g, w_map, lh_prime, lb_prime)?;
        Ok(Fused {
            f,
            w_map,
            lh_prime,
            lb_prime,
        })
    }
}
