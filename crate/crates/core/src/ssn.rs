//! Frozen fully-convolutional segmenter providing the semantic probability map
//! `S` and the 512-channel intermediate embedding `B`.
//!
//! The built-in network is seeded and random; pretrained weights can be loaded
//! from a weight file whose manifest must match the configured layout.

use std::path::PathBuf;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use sllen_tensor::{Graph, ParamSet, Tensor};

use crate::nn::{component_rng, Conv};
use crate::weights::{Dtype, WeightFile};
use crate::{Error, Result};

/// Channel count the enhancement branch expects from the tapped stage.
pub const EMBEDDING_CHANNELS: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsnConfig {
    pub num_classes: usize,
    /// 1-based index of the stage whose activation becomes `B`.
    pub tap_layer: usize,
    /// Output width of each stage; stages 1-3 downsample by 2.
    pub stage_widths: Vec<usize>,
    /// Take `B` before the stage's ReLU instead of after it.
    pub tap_pre_activation: bool,
    pub weights_path: Option<PathBuf>,
    pub seed: u64,
}

impl Default for SsnConfig {
    fn default() -> Self {
        Self {
            num_classes: 21,
            tap_layer: 4,
            stage_widths: vec![64, 128, 256, 512, 256],
            tap_pre_activation: false,
            weights_path: None,
            seed: 0,
        }
    }
}

impl SsnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 1 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        if self.stage_widths.len() < 5 {
            return Err(Error::Config(format!(
                "segmenter needs at least 5 stages, got {}",
                self.stage_widths.len()
            )));
        }
        if self.tap_layer == 0 || self.tap_layer > self.stage_widths.len() {
            return Err(Error::Config(format!(
                "tap_layer {} does not index one of {} stages",
                self.tap_layer,
                self.stage_widths.len()
            )));
        }
        let width = self.stage_widths[self.tap_layer - 1];
        if width != EMBEDDING_CHANNELS {
            return Err(Error::Config(format!(
                "tapped stage {} has {width} channels, need {EMBEDDING_CHANNELS}",
                self.tap_layer
            )));
        }
        if self.tap_layer < 3 {
            return Err(Error::Config(
                "tap_layer must be at or after the third (last downsampling) stage".into(),
            ));
        }
        Ok(())
    }
}

/// `s`: (N, classes, H, W) probabilities; `b`: (N, 512, H/8, W/8).
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticOutputs {
    pub s: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone)]
pub struct Ssn {
    cfg: SsnConfig,
    params: ParamSet,
    stages: Vec<Conv>,
    head: Conv,
}

impl Ssn {
    pub fn build(cfg: SsnConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut rng = component_rng(cfg.seed, "ssn");
        let mut cin = 3;
        let stages = cfg
            .stage_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let stride = if i < 3 { 2 } else { 1 };
                let c = Conv::new(&mut params, &format!("ssn.stage{}", i + 1), cin, w, 3, stride, &mut rng);
                cin = w;
                c
            })
            .collect();
        let head = Conv::new(&mut params, "ssn.head", cin, cfg.num_classes, 1, 1, &mut rng);
        let mut ssn = Self {
            cfg,
            params,
            stages,
            head,
        };
        if let Some(path) = ssn.cfg.weights_path.clone() {
            let file = WeightFile::load(&path).map_err(|e| match e {
                Error::WeightLoad(m) => Error::WeightLoad(m),
                other => Error::WeightLoad(other.to_string()),
            })?;
            let rest = file.load_into(&mut ssn.params)?;
            if !rest.is_empty() {
                return Err(Error::WeightLoad(format!(
                    "{} extra blocks in segmenter weight file",
                    rest.len()
                )));
            }
        }
        Ok(ssn)
    }

    pub fn config(&self) -> &SsnConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Zeroes the classification head so `S` becomes uniform.
    pub fn zero_head(&mut self) {
        self.params.get_mut(self.head.weight).fill(0.0);
        self.params.get_mut(self.head.bias).fill(0.0);
    }

    pub fn save_weights(&self, path: &std::path::Path) -> Result<()> {
        WeightFile::from_params(
            &self.params,
            Dtype::F32,
            serde_json::to_value(&self.cfg).expect("serializable"),
        )
        .save(path)
    }

    /// Runs the frozen network on an `(N, 3, H, W)` batch; H and W must be
    /// multiples of 8.
    pub fn forward(&self, x: &Tensor) -> Result<SemanticOutputs> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 || !s[2].is_multiple_of(8) || !s[3].is_multiple_of(8) || s[2] == 0 || s[3] == 0 {
            return Err(Error::Shape(format!(
                "segmenter input must be (N,3,H,W) with H,W multiples of 8, got {s:?}"
            )));
        }
        let (h, w) = (s[2], s[3]);
        let mut g = Graph::new();
        let bind = self.params.bind(&mut g, false);
        let mut cur = g.constant(x.clone());
        let mut tap = None;
        for (i, stage) in self.stages.iter().enumerate() {
            let pre = stage.forward(&mut g, &bind, cur)?;
            let post = g.relu(pre);
            if i + 1 == self.cfg.tap_layer {
                tap = Some(if self.cfg.tap_pre_activation { pre } else { post });
            }
            cur = post;
        }
        let logits = self.head.forward(&mut g, &bind, cur)?;
        let up = g.resize_bilinear(logits, h, w)?;
        // Softmax over the class axis: move classes last, normalize, move back.
        let last = g.permute(up, &[0, 2, 3, 1])?;
        let probs = g.softmax(last);
        let s = g.permute(probs, &[0, 3, 1, 2])?;
        Ok(SemanticOutputs {
            s: g.value(s).clone(),
            b: g.value(tap.expect("tap validated")).clone(),
        })
    }

    /// Per-pixel argmax class of `S` for sample `n`.
    pub fn predict_labels(&self, x: &Tensor) -> Result<Vec<Array2<u32>>> {
        let out = self.forward(x)?;
        Ok(out
            .s
            .axis_iter(Axis(0))
            .map(|probs| {
                let (k, h, w) = (probs.shape()[0], probs.shape()[1], probs.shape()[2]);
                Array2::from_shape_fn((h, w), |(y, x)| {
                    let mut best = 0;
                    for c in 1..k {
                        if probs[[c, y, x]] > probs[[best, y, x]] {
                            best = c;
                        }
                    }
                    best as u32
                })
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn small() -> SsnConfig {
        SsnConfig {
            num_classes: 5,
            stage_widths: vec![8, 8, 16, 512, 8],
            seed: 3,
            ..Default::default()
        }
    }

    fn input(h: usize, w: usize, k: f64) -> Tensor {
        Tensor::from_shape_fn(IxDyn(&[1, 3, h, w]), |i| {
            (((i[1] * 31 + i[2] * 7 + i[3] * 3) as f64) * k).sin() * 0.5 + 0.5
        })
    }

    #[test]
    fn embedding_is_512_at_one_eighth() {
        let ssn = Ssn::build(small()).unwrap();
        let out = ssn.forward(&input(32, 24, 0.3)).unwrap();
        assert_eq!(out.b.shape(), &[1, 512, 4, 3]);
        assert_eq!(out.s.shape(), &[1, 5, 32, 24]);
    }

    #[test]
    fn semantic_map_is_a_distribution() {
        let ssn = Ssn::build(small()).unwrap();
        let out = ssn.forward(&input(16, 16, 0.7)).unwrap();
        let sums = out.s.sum_axis(Axis(1));
        assert!(sums.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(out.s.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn zero_head_gives_uniform_map() {
        let mut ssn = Ssn::build(small()).unwrap();
        ssn.zero_head();
        let out = ssn.forward(&input(16, 16, 0.7)).unwrap();
        assert!(out.s.iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn deterministic_and_input_dependent() {
        let a = Ssn::build(small()).unwrap();
        let b = Ssn::build(small()).unwrap();
        assert_eq!(a.params(), b.params());
        let x = input(16, 16, 0.3);
        assert_eq!(a.forward(&x).unwrap(), b.forward(&x).unwrap());
        let y = input(16, 16, 1.9);
        assert_ne!(a.forward(&x).unwrap().b, a.forward(&y).unwrap().b);
    }

    #[test]
    fn config_errors() {
        let mut cfg = small();
        cfg.tap_layer = 3;
        assert!(matches!(Ssn::build(cfg), Err(Error::Config(_))));
        let mut cfg = small();
        cfg.tap_layer = 9;
        assert!(matches!(Ssn::build(cfg), Err(Error::Config(_))));
        let ssn = Ssn::build(small()).unwrap();
        assert!(matches!(ssn.forward(&input(12, 16, 0.1)), Err(Error::Shape(_))));
    }

    #[test]
    fn pre_activation_tap_can_be_negative() {
        let mut cfg = small();
        cfg.tap_pre_activation = true;
        let ssn = Ssn::build(cfg).unwrap();
        let out = ssn.forward(&input(16, 16, 0.3)).unwrap();
        assert!(out.b.iter().any(|&v| v < 0.0));
        let post = Ssn::build(small()).unwrap().forward(&input(16, 16, 0.3)).unwrap();
        assert!(post.b.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn weights_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ssn.bin");
        let src = Ssn::build(SsnConfig { seed: 11, ..small() }).unwrap();
        src.save_weights(&path).unwrap();
        let loaded = Ssn::build(SsnConfig {
            weights_path: Some(path.clone()),
            ..small()
        })
        .unwrap();
        for (a, b) in loaded.params().iter().zip(src.params().iter()) {
            for (x, y) in a.value.iter().zip(b.value.iter()) {
                assert_eq!(*x, (*y as f32) as f64);
            }
        }
        let other = SsnConfig {
            num_classes: 7,
            weights_path: Some(path),
            ..small()
        };
        assert!(matches!(Ssn::build(other), Err(Error::WeightLoad(_))));
    }
}
