//! Training losses. Each term is built on a [`Graph`] so it can be
//! differentiated; the `*_value` functions evaluate a term on plain tensors.
//!
//! All terms share the forward-difference operator of [`crate::imagecore`].

use std::path::PathBuf;

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};
use sllen_tensor::{Graph, ParamSet, Tensor, Var};

use crate::imagecore::{NATURAL_AVG_GRADIENT, RETINEX_EPS};
use crate::net::ForwardTrace;
use crate::nn::{component_rng, Conv};
use crate::weights::{Dtype, WeightFile};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_kd: f64,
    pub lambda_itv: f64,
    pub lambda_gra: f64,
    /// Target per-channel average gradient.
    #[serde(alias = "G")]
    pub g: f64,
    pub huber_delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_kd: 1.0,
            lambda_itv: 5.0,
            lambda_gra: 1.0,
            g: NATURAL_AVG_GRADIENT,
            huber_delta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("lambda_kd", self.lambda_kd),
            ("lambda_itv", self.lambda_itv),
            ("lambda_gra", self.lambda_gra),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.g > 0.0 && self.g < 1.0) {
            return Err(Error::Config(format!("G must lie in (0, 1), got {}", self.g)));
        }
        if !(self.huber_delta > 0.0 && self.huber_delta.is_finite()) {
            return Err(Error::Config(format!("huber_delta must be > 0, got {}", self.huber_delta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_s: f64,
    pub l_vgg: f64,
    pub l_kd: f64,
    pub l_itv: f64,
    pub l_gra: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "step,l_s,l_vgg,l_kd,l_itv,l_gra,total";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.l_s, self.l_vgg, self.l_kd, self.l_itv, self.l_gra, self.total
        )
    }

    /// Parses a row written by [`LossBreakdown::csv_row`].
    pub fn parse_csv_row(line: &str) -> Option<(usize, Self)> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 7 {
            return None;
        }
        let v: Vec<f64> = f[1..].iter().map(|s| s.parse().ok()).collect::<Option<_>>()?;
        Some((
            f[0].parse().ok()?,
            Self {
                l_s: v[0],
                l_vgg: v[1],
                l_kd: v[2],
                l_itv: v[3],
                l_gra: v[4],
                total: v[5],
            },
        ))
    }

    /// First non-finite term, if any.
    pub fn non_finite(&self) -> Option<(&'static str, f64)> {
        [
            ("l_s", self.l_s),
            ("l_vgg", self.l_vgg),
            ("l_kd", self.l_kd),
            ("l_itv", self.l_itv),
            ("l_gra", self.l_gra),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
    }
}

fn same_shape(g: &Graph, a: Var, b: Var, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

fn mse(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Mean Huber loss between `o` and `gt`.
pub fn smooth_loss(g: &mut Graph, o: Var, gt: Var, delta: f64) -> Result<Var> {
    same_shape(g, o, gt, "smooth loss")?;
    let d = g.sub(o, gt)?;
    let h = g.huber(d, delta);
    Ok(g.mean(h))
}

/// Frozen feature extractor used by the perceptual loss.
pub trait FeatureExtractor: Send + Sync {
    /// Features at each tap for an `(N, 3, H, W)` input.
    fn features(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>>;

    /// Parameters, for frozen-ness audits. Empty for parameter-free extractors.
    fn params(&self) -> Option<&ParamSet> {
        None
    }
}

/// Features are the input itself; the perceptual loss reduces to MSE.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn features(&self, _g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        Ok(vec![x])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    #[default]
    Conv,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerceptualConfig {
    pub kind: ExtractorKind,
    /// Output width of each conv stage; every stage is a tap.
    pub widths: Vec<usize>,
    pub seed: u64,
    pub weights_path: Option<PathBuf>,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        Self {
            kind: ExtractorKind::Conv,
            widths: vec![8, 16, 32],
            seed: 0,
            weights_path: None,
        }
    }
}

impl PerceptualConfig {
    pub fn build(&self) -> Result<Box<dyn FeatureExtractor>> {
        Ok(match self.kind {
            ExtractorKind::Identity => Box::new(IdentityExtractor),
            ExtractorKind::Conv => Box::new(ConvFeatureExtractor::build(self)?),
        })
    }
}

/// Seeded conv3x3 + ReLU stack with 2x2 max-pooling between stages.
#[derive(Debug, Clone)]
pub struct ConvFeatureExtractor {
    params: ParamSet,
    stages: Vec<Conv>,
}

impl ConvFeatureExtractor {
    pub fn build(cfg: &PerceptualConfig) -> Result<Self> {
        if cfg.widths.is_empty() || cfg.widths.contains(&0) {
            return Err(Error::Config("perceptual widths must be non-empty and positive".into()));
        }
        let mut params = ParamSet::new();
        let mut rng = component_rng(cfg.seed, "perceptual");
        let mut cin = 3;
        let stages = cfg
            .widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let c = Conv::new(&mut params, &format!("feat.stage{}", i + 1), cin, w, 3, 1, &mut rng);
                cin = w;
                c
            })
            .collect();
        let mut fx = Self { params, stages };
        if let Some(path) = &cfg.weights_path {
            let file = WeightFile::load(path)?;
            let rest = file.load_into(&mut fx.params)?;
            if !rest.is_empty() {
                return Err(Error::WeightLoad(format!(
                    "{} extra blocks in feature extractor weights",
                    rest.len()
                )));
            }
        }
        Ok(fx)
    }

    pub fn save_weights(&self, path: &std::path::Path) -> Result<()> {
        WeightFile::from_params(&self.params, Dtype::F32, serde_json::json!({})).save(path)
    }
}

impl FeatureExtractor for ConvFeatureExtractor {
    fn features(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let bind = self.params.bind(g, false);
        let mut taps = Vec::with_capacity(self.stages.len());
        let mut cur = x;
        for (i, c) in self.stages.iter().enumerate() {
            if i > 0 && g.shape(cur)[2] >= 2 && g.shape(cur)[3] >= 2 {
                cur = g.max_pool2(cur)?;
            }
            cur = c.forward_relu(g, &bind, cur)?;
            taps.push(cur);
        }
        Ok(taps)
    }

    fn params(&self) -> Option<&ParamSet> {
        Some(&self.params)
    }
}

/// Sum over taps of the mean squared feature distance.
pub fn perceptual_loss(g: &mut Graph, o: Var, gt: Var, feat: &dyn FeatureExtractor) -> Result<Var> {
    same_shape(g, o, gt, "perceptual loss")?;
    let fo = feat.features(g, o)?;
    let fg = feat.features(g, gt)?;
    let mut total = None;
    for (a, b) in fo.into_iter().zip(fg) {
        let b = g.detach(b);
        let term = mse(g, a, b)?;
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    Ok(total.expect("extractors produce at least one tap"))
}

/// Distillation: `sum_i MSE(E_i, D_{n-i+1})` with the encoder side detached.
pub fn kd_loss(g: &mut Graph, e: &[Var], d: &[Var]) -> Result<Var> {
    if e.len() != d.len() {
        return Err(Error::LengthMismatch(e.len(), d.len()));
    }
    let n = e.len();
    let mut total = g.constant(Tensor::zeros(IxDyn(&[])));
    for (i, &ei) in e.iter().enumerate() {
        let di = d[n - 1 - i];
        same_shape(g, ei, di, "distillation pair")?;
        let teacher = g.detach(ei);
        let term = mse(g, teacher, di)?;
        total = g.add(total, term)?;
    }
    Ok(total)
}

/// Mean squared forward-difference energy over the last two axes.
pub fn itv_loss(g: &mut Graph, u: Var) -> Result<Var> {
    let r = g.shape(u).len();
    if r < 2 {
        return Err(Error::Shape(format!("illumination map needs rank >= 2, got {r}")));
    }
    let gx = g.forward_diff(u, r - 1)?;
    let gy = g.forward_diff(u, r - 2)?;
    let a = g.square(gx);
    let b = g.square(gy);
    let s = g.add(a, b)?;
    Ok(g.mean(s))
}

/// Per-image, per-channel average gradient `(N, C, 1, 1)` of a batch.
pub fn avg_gradient_var(g: &mut Graph, o: Var) -> Result<Var> {
    let s = g.shape(o).to_vec();
    if s.len() != 4 {
        return Err(Error::Shape(format!("expected (N,C,H,W), got {s:?}")));
    }
    let gx = g.forward_diff(o, 3)?;
    let gy = g.forward_diff(o, 2)?;
    let ax = g.abs(gx);
    let ay = g.abs(gy);
    let sum = g.add(ax, ay)?;
    let half = g.scale(sum, 0.5);
    g.mean_axes(half, &[2, 3]).map_err(Into::into)
}

/// `(1 / (C N)) sum_i |O^g_i - G|_1` over an `(N, C, H, W)` batch.
pub fn gra_loss(g: &mut Graph, o: Var, target: f64) -> Result<Var> {
    let og = avg_gradient_var(g, o)?;
    let dev = g.add_scalar(og, -target);
    let a = g.abs(dev);
    Ok(g.mean(a))
}

/// Gradient loss from precomputed per-image channel statistics.
pub fn gra_loss_from_stats(stats: &[Vec<f64>], target: f64) -> f64 {
    let n: usize = stats.iter().map(Vec::len).sum();
    if n == 0 {
        return 0.0;
    }
    stats.iter().flatten().map(|v| (v - target).abs()).sum::<f64>() / n as f64
}

/// Graph handles of every term.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub l_s: Var,
    pub l_vgg: Var,
    pub l_kd: Var,
    pub l_itv: Var,
    pub l_gra: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            l_s: g.scalar(self.l_s),
            l_vgg: g.scalar(self.l_vgg),
            l_kd: g.scalar(self.l_kd),
            l_itv: g.scalar(self.l_itv),
            l_gra: g.scalar(self.l_gra),
            total: g.scalar(self.total),
        }
    }
}

/// Weighted total `L_s + L_vgg + l_kd*L_kd + l_itv*L_itv + l_gra*L_gra`.
/// Terms with a zero weight are left out of the sum entirely.
pub fn total_loss(
    g: &mut Graph,
    trace: &ForwardTrace,
    gt: Var,
    low: Var,
    w: &LossWeights,
    feat: &dyn FeatureExtractor,
) -> Result<LossVars> {
    let l_s = smooth_loss(g, trace.o, gt, w.huber_delta)?;
    let l_vgg = perceptual_loss(g, trace.o, gt, feat)?;
    let l_kd = kd_loss(g, &trace.e, &trace.d)?;
    same_shape(g, low, trace.o, "low vs enhanced")?;
    let den = g.add_scalar(trace.o, RETINEX_EPS);
    let u = g.div(low, den)?;
    let l_itv = itv_loss(g, u)?;
    let l_gra = gra_loss(g, trace.o, w.g)?;
    let mut total = g.add(l_s, l_vgg)?;
    for (lambda, term) in [(w.lambda_kd, l_kd), (w.lambda_itv, l_itv), (w.lambda_gra, l_gra)] {
        if lambda != 0.0 {
            let t = g.scale(term, lambda);
            total = g.add(total, t)?;
        }
    }
    Ok(LossVars {
        l_s,
        l_vgg,
        l_kd,
        l_itv,
        l_gra,
        total,
    })
}

fn eval1(x: &Tensor, f: impl FnOnce(&mut Graph, Var) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let out = f(&mut g, v)?;
    Ok(g.scalar(out))
}

fn eval2(a: &Tensor, b: &Tensor, f: impl FnOnce(&mut Graph, Var, Var) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(a.clone());
    let y = g.constant(b.clone());
    let out = f(&mut g, x, y)?;
    Ok(g.scalar(out))
}

pub fn smooth_loss_value(o: &Tensor, gt: &Tensor, delta: f64) -> Result<f64> {
    eval2(o, gt, |g, a, b| smooth_loss(g, a, b, delta))
}

pub fn perceptual_loss_value(o: &Tensor, gt: &Tensor, feat: &dyn FeatureExtractor) -> Result<f64> {
    eval2(o, gt, |g, a, b| perceptual_loss(g, a, b, feat))
}

pub fn kd_loss_value(e: &[Tensor], d: &[Tensor]) -> Result<f64> {
    let mut g = Graph::new();
    let ev: Vec<Var> = e.iter().map(|t| g.constant(t.clone())).collect();
    let dv: Vec<Var> = d.iter().map(|t| g.constant(t.clone())).collect();
    let out = kd_loss(&mut g, &ev, &dv)?;
    Ok(g.scalar(out))
}

pub fn itv_loss_value(u: &Tensor) -> Result<f64> {
    eval1(u, itv_loss)
}

pub fn gra_loss_value(o: &Tensor, target: f64) -> Result<f64> {
    eval1(o, |g, v| gra_loss(g, v, target))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::{avg_gradient, ImageTensor};
    use proptest::prelude::*;
    use sllen_tensor::check::{central_difference, relative_error};

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor {
        Tensor::from_shape_vec(IxDyn(shape), v).unwrap()
    }

    #[test]
    fn smooth_loss_cases() {
        let a = Tensor::from_elem(IxDyn(&[1, 3, 2, 2]), 0.3);
        assert_eq!(smooth_loss_value(&a, &a, 1.0).unwrap(), 0.0);
        let b = a.mapv(|v| v + 0.1);
        assert!((smooth_loss_value(&b, &a, 1.0).unwrap() - 0.005).abs() < 1e-15);
        let c = a.mapv(|v| v + 2.0);
        assert!((smooth_loss_value(&c, &a, 1.0).unwrap() - 1.5).abs() < 1e-15);
        let d = Tensor::zeros(IxDyn(&[1, 3, 2, 3]));
        assert!(matches!(smooth_loss_value(&a, &d, 1.0), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn perceptual_identity_is_mse() {
        let a = t(&[1, 3, 1, 2], vec![0.0, 1.0, 0.5, 0.5, 0.2, 0.4]);
        let b = t(&[1, 3, 1, 2], vec![1.0, 1.0, 0.0, 0.5, 0.2, 0.0]);
        let want = (1.0 + 0.25 + 0.16) / 6.0;
        assert!((perceptual_loss_value(&a, &b, &IdentityExtractor).unwrap() - want).abs() < 1e-15);
        let fx = ConvFeatureExtractor::build(&PerceptualConfig::default()).unwrap();
        let x = Tensor::from_shape_fn(IxDyn(&[1, 3, 8, 8]), |i| (i[2] * 8 + i[3]) as f64 / 64.0);
        assert_eq!(perceptual_loss_value(&x, &x, &fx).unwrap(), 0.0);
        assert!(perceptual_loss_value(&x, &x.mapv(|v| 1.0 - v), &fx).unwrap() > 0.0);
    }

    #[test]
    fn kd_loss_cases() {
        let e = vec![t(&[2], vec![0.0, 0.0])];
        let d = vec![t(&[2], vec![1.0, 1.0])];
        assert_eq!(kd_loss_value(&e, &d).unwrap(), 1.0);
        // Pairs are mirrored: E_1 with D_2, E_2 with D_1.
        let e = vec![t(&[2], vec![0.0, 0.0]), t(&[1], vec![0.0])];
        let d = vec![t(&[1], vec![0.75f64.sqrt()]), t(&[2], vec![0.5, 0.5])];
        assert!((kd_loss_value(&e, &d).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(kd_loss_value(&e, &d[..1]), Err(Error::LengthMismatch(2, 1))));
    }

    #[test]
    fn kd_gradient_never_reaches_teacher() {
        let mut g = Graph::new();
        let e = g.variable(t(&[3], vec![0.1, 0.2, 0.3]));
        let d = g.variable(t(&[3], vec![0.5, 0.0, 0.9]));
        let l = kd_loss(&mut g, &[e], &[d]).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(e).is_none_or(|x| x.iter().all(|&v| v == 0.0)));
        assert!(grads.get(d).unwrap().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn itv_loss_cases() {
        let u = t(&[1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]);
        assert_eq!(itv_loss_value(&u).unwrap(), 0.5);
        assert_eq!(itv_loss_value(&Tensor::from_elem(IxDyn(&[3, 4, 4]), 2.5)).unwrap(), 0.0);
        let scaled = u.mapv(|v| 3.0 * v);
        assert!((itv_loss_value(&scaled).unwrap() - 4.5).abs() < 1e-15);
    }

    /// Horizontal ramps whose per-channel average gradient is `targets[c]`.
    fn ramp_with_avg_gradient(targets: &[f64], h: usize, w: usize) -> Tensor {
        // Interior gx = k, last column 0, gy = 0: avg = k (w - 1) / (2 w).
        Tensor::from_shape_fn(IxDyn(&[1, targets.len(), h, w]), |i| {
            let k = targets[i[1]] * 2.0 * w as f64 / (w - 1) as f64;
            k * i[3] as f64
        })
    }

    #[test]
    fn gra_loss_cases() {
        let o = ramp_with_avg_gradient(&[0.051; 3], 4, 5);
        assert!(gra_loss_value(&o, 0.051).unwrap() < 1e-16);
        let o = ramp_with_avg_gradient(&[0.061, 0.051, 0.041], 4, 5);
        let img = ImageTensor::from_batch(&o, 0).unwrap();
        let stats = avg_gradient(&img).unwrap();
        assert!((stats[0] - 0.061).abs() < 1e-15);
        assert!((gra_loss_value(&o, 0.051).unwrap() - 0.02 / 3.0).abs() < 1e-12);
        assert!((gra_loss_from_stats(&[vec![0.061, 0.051, 0.041]], 0.051) - 0.02 / 3.0).abs() < 1e-15);
        let flat = Tensor::from_elem(IxDyn(&[1, 3, 4, 4]), 0.4);
        assert!((gra_loss_value(&flat, 0.051).unwrap() - 0.051).abs() < 1e-16);
    }

    #[test]
    fn zero_lambda_drops_term_exactly() {
        use crate::net::{NetConfig, SllenNet, Variant};
        let net = SllenNet::build(NetConfig {
            base_channels: 2,
            variant: Variant::Unet,
            ..Default::default()
        })
        .unwrap();
        let low = Tensor::from_shape_fn(IxDyn(&[1, 3, 8, 8]), |i| 0.1 + 0.01 * (i[2] + i[3]) as f64);
        let gt = low.mapv(|v| (v * 3.0).min(1.0));
        let run = |w: LossWeights| {
            let mut g = Graph::new();
            let b = net.params().bind(&mut g, false);
            let x = g.constant(low.clone());
            let y = g.constant(gt.clone());
            let tr = net.forward(&mut g, &b, x, None, None).unwrap();
            total_loss(&mut g, &tr, y, x, &w, &IdentityExtractor).unwrap().breakdown(&g)
        };
        let full = run(LossWeights::default());
        let no_itv = run(LossWeights {
            lambda_itv: 0.0,
            ..Default::default()
        });
        let doubled = run(LossWeights {
            lambda_itv: 10.0,
            ..Default::default()
        });
        let rest = full.l_s + full.l_vgg + full.l_kd + full.l_gra;
        assert_eq!(no_itv.total, rest);
        assert!((doubled.total - rest - 2.0 * (full.total - rest)).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip() {
        let b = LossBreakdown {
            l_s: 0.1,
            l_vgg: 0.2,
            l_kd: 0.3,
            l_itv: 1e-9,
            l_gra: 0.05,
            total: 0.7,
        };
        let (step, back) = LossBreakdown::parse_csv_row(&b.csv_row(12)).unwrap();
        assert_eq!((step, back), (12, b));
        assert!(b.non_finite().is_none());
        assert_eq!(
            LossBreakdown { l_kd: f64::NAN, ..b }.non_finite().map(|x| x.0),
            Some("l_kd")
        );
    }

    #[test]
    fn itv_gradient_matches_finite_difference() {
        let u0 = t(&[1, 2, 2], vec![0.3, 0.9, 0.1, 0.6]);
        let mut g = Graph::new();
        let u = g.variable(u0.clone());
        let l = itv_loss(&mut g, u).unwrap();
        let an = g.backward(l).unwrap().take(u).unwrap();
        for (k, a) in an.iter().enumerate() {
            let num = central_difference(
                |x| {
                    let mut u = u0.clone();
                    u.as_slice_mut().unwrap()[k] = x;
                    itv_loss_value(&u).unwrap()
                },
                u0.as_slice().unwrap()[k],
                1e-5,
            );
            assert!(relative_error(*a, num, 1e-8) < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn terms_are_nonnegative(v in proptest::collection::vec(0.0f64..1.0, 24)) {
            let a = t(&[1, 3, 2, 4], v[..24].to_vec());
            let b = a.mapv(|x| (x * 7.0).sin().abs());
            prop_assert!(smooth_loss_value(&a, &b, 1.0).unwrap() >= 0.0);
            prop_assert!(itv_loss_value(&a).unwrap() >= 0.0);
            prop_assert!(gra_loss_value(&a, 0.051).unwrap() >= 0.0);
            prop_assert!(perceptual_loss_value(&a, &b, &IdentityExtractor).unwrap() >= 0.0);
        }

        #[test]
        fn itv_zero_iff_constant_per_channel(v in proptest::collection::vec(-1.0f64..1.0, 12)) {
            let u = t(&[3, 2, 2], v.clone());
            let constant = v.chunks(4).all(|c| c.iter().all(|&x| x == c[0]));
            prop_assert_eq!(itv_loss_value(&u).unwrap() == 0.0, constant);
        }
    }
}
