//! Optimization loop, checkpointing, run logging and the ablation harness.
//!
//! A run directory holds `config.snapshot`, `log.csv`, `ckpt-<step>.bin`
//! and, for ablations, `ablation.csv`.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sllen_tensor::{Adam, AdamConfig, AdamState, Graph, Tensor};

use crate::dataset::{split_by_stem, Batch, BatchConfig, BatchPlan, SamplePair, DEFAULT_BATCH_SIZE};
use crate::imagecore::{crop, reflect_pad_to_multiple, write_atomic, ImageTensor};
use crate::losses::{total_loss, FeatureExtractor, LossBreakdown, LossWeights, PerceptualConfig};
use crate::metrics::{ceiq, loe, psnr, ssim, ImageMetrics, MetricReport};
use crate::net::{NetConfig, SllenNet, Variant};
use crate::ssn::{Ssn, SsnConfig};
use crate::weights::{Dtype, WeightFile};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Drives network initialization and the batch schedule.
    pub seed: u64,
    pub variant: Variant,
    pub loss_weights: LossWeights,
    pub adam_betas: [f64; 2],
    pub adam_eps: f64,
    /// Write a checkpoint every this many steps; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub patch: usize,
    pub flip: bool,
    /// Global L2 norm cap on the gradient; off when `None`.
    pub grad_clip: Option<f64>,
    /// Network shape; its `variant` and `seed` are taken from the fields above.
    pub net: NetConfig,
    pub ssn: SsnConfig,
    pub perceptual: PerceptualConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: DEFAULT_BATCH_SIZE,
            steps: 1000,
            seed: 0,
            variant: Variant::Full,
            loss_weights: LossWeights::default(),
            adam_betas: [0.9, 0.999],
            adam_eps: 1e-8,
            checkpoint_every: 0,
            patch: 64,
            flip: false,
            grad_clip: None,
            net: NetConfig::default(),
            ssn: SsnConfig::default(),
            perceptual: PerceptualConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        let [b1, b2] = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) || self.adam_eps <= 0.0 {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps be > 0".into()));
        }
        if let Some(c) = self.grad_clip {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::Config(format!("grad_clip must be > 0, got {c}")));
            }
        }
        if self.net.num_classes != self.ssn.num_classes {
            return Err(Error::Config(format!(
                "net.num_classes ({}) must equal ssn.num_classes ({})",
                self.net.num_classes, self.ssn.num_classes
            )));
        }
        self.loss_weights.validate()?;
        self.net_config().validate()?;
        self.ssn.validate()
    }

    /// Network config with the run's variant and seed applied.
    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            variant: self.variant,
            seed: self.seed,
            ..self.net.clone()
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_betas[0],
            beta2: self.adam_betas[1],
            eps: self.adam_eps,
        }
    }
}

/// Network, frozen helpers and optimizer state for one run.
pub struct Trainer {
    cfg: TrainConfig,
    net: SllenNet,
    ssn: Ssn,
    feat: Box<dyn FeatureExtractor>,
    adam: Adam,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let net = SllenNet::build(cfg.net_config())?;
        let ssn = Ssn::build(cfg.ssn.clone())?;
        let feat = cfg.perceptual.build()?;
        let adam = Adam::new(net.params(), cfg.adam());
        Ok(Self {
            cfg,
            net,
            ssn,
            feat,
            adam,
            step: 0,
        })
    }

    /// Restores network, optimizer state and step count from a checkpoint
    /// written by [`Trainer::save_checkpoint`].
    pub fn resume(cfg: TrainConfig, checkpoint: &Path) -> Result<Self> {
        let mut t = Self::new(cfg)?;
        let file = WeightFile::load(checkpoint)?;
        let (net, rest) = SllenNet::from_weight_file(&file, Some(&t.cfg.net_config()))?;
        let n = net.params().len();
        if rest.len() != 2 * n {
            return Err(Error::WeightLoad(format!(
                "checkpoint has {} optimizer blocks, expected {}",
                rest.len(),
                2 * n
            )));
        }
        for (i, p) in net.params().iter().enumerate() {
            let (mname, vname) = (&rest[i].0, &rest[n + i].0);
            if *mname != format!("adam.m.{}", p.name) || *vname != format!("adam.v.{}", p.name) {
                return Err(Error::WeightLoad(format!("optimizer block order broken at {}", p.name)));
            }
        }
        let step = file
            .meta
            .get("step")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::WeightLoad("checkpoint header has no step".into()))?;
        let state = AdamState {
            step: file.meta.get("adam_step").and_then(|v| v.as_u64()).unwrap_or(step),
            m: rest[..n].iter().map(|(_, t)| t.clone()).collect(),
            v: rest[n..].iter().map(|(_, t)| t.clone()).collect(),
        };
        t.adam = Adam::with_state(net.params(), t.cfg.adam(), state)?;
        t.net = net;
        t.step = step as usize;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn net(&self) -> &SllenNet {
        &self.net
    }

    pub fn into_net(self) -> SllenNet {
        self.net
    }

    pub fn ssn(&self) -> &Ssn {
        &self.ssn
    }

    pub fn feature_extractor(&self) -> &dyn FeatureExtractor {
        self.feat.as_ref()
    }

    /// Completed optimizer steps.
    pub fn step(&self) -> usize {
        self.step
    }

    /// One forward pass, loss and Adam update. Returns the loss before the
    /// update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        let refs = batch.references.as_ref().ok_or(Error::NoReference)?;
        let sem = if self.net.needs_semantics() {
            Some(self.ssn.forward(&batch.lows)?)
        } else {
            None
        };
        let mut g = Graph::new();
        let bind = self.net.params().bind(&mut g, true);
        let x = g.constant(batch.lows.clone());
        let gt = g.constant(refs.clone());
        let (s, b) = match &sem {
            Some(so) => (Some(g.constant(so.s.clone())), Some(g.constant(so.b.clone()))),
            None => (None, None),
        };
        let trace = self.net.forward(&mut g, &bind, x, s, b)?;
        let vars = total_loss(&mut g, &trace, gt, x, &self.cfg.loss_weights, self.feat.as_ref())?;
        let breakdown = vars.breakdown(&g);
        if let Some((term, value)) = breakdown.non_finite() {
            return Err(Error::NonFiniteLoss {
                term,
                value,
                step: self.step,
            });
        }
        let grads = g.backward(vars.total)?;
        let mut grads = bind.gradients(&grads);
        if let Some(c) = self.cfg.grad_clip {
            clip_global_norm(&mut grads, c);
        }
        self.adam.step(self.net.params_mut(), &grads)?;
        self.step += 1;
        Ok(breakdown)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let st = self.adam.state();
        let names: Vec<String> = self.net.params().iter().map(|p| p.name.clone()).collect();
        let extra = names
            .iter()
            .zip(&st.m)
            .map(|(n, t)| (format!("adam.m.{n}"), t.clone()))
            .chain(names.iter().zip(&st.v).map(|(n, t)| (format!("adam.v.{n}"), t.clone())))
            .collect();
        let meta = serde_json::json!({ "step": self.step, "adam_step": st.step });
        self.net.to_weight_file(Dtype::F64, meta, extra).save(path)
    }

    /// Trains until `cfg.steps` steps are done, logging into `run_dir` when
    /// given.
    pub fn run(&mut self, pairs: &[SamplePair], run_dir: Option<&Path>) -> Result<RunLog> {
        let plan = BatchPlan::new(
            pairs,
            BatchConfig {
                batch_size: self.cfg.batch_size,
                patch: self.cfg.patch,
                seed: self.cfg.seed,
                flip: self.cfg.flip,
            },
        )?;
        let mut log_file = match run_dir {
            Some(dir) => Some(prepare_run_dir(dir, &self.cfg, self.step)?),
            None => None,
        };
        let mut log = RunLog {
            rows: Vec::new(),
            step_seconds: Vec::new(),
            config: self.cfg.clone(),
            final_checkpoint: None,
        };
        while self.step < self.cfg.steps {
            let step = self.step;
            let batch = plan.batch_at_step(step);
            let t0 = Instant::now();
            let b = self.train_step(&batch)?;
            log.step_seconds.push(t0.elapsed().as_secs_f64());
            log.rows.push((step, b));
            if let Some((f, path)) = log_file.as_mut() {
                writeln!(f, "{}", b.csv_row(step)).map_err(|e| Error::io(path.clone(), e))?;
            }
            let done = self.step == self.cfg.steps;
            let periodic = self.cfg.checkpoint_every > 0 && self.step.is_multiple_of(self.cfg.checkpoint_every);
            if let (Some(dir), true) = (run_dir, done || periodic) {
                let p = dir.join(format!("ckpt-{}.bin", self.step));
                self.save_checkpoint(&p)?;
                log.final_checkpoint = Some(p);
            }
        }
        Ok(log)
    }
}

fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) {
    let sq: f64 = grads.iter().flatten().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * k);
        }
    }
}

/// Creates the run directory, writes or checks the config snapshot, and
/// opens `log.csv` for appending.
fn prepare_run_dir(dir: &Path, cfg: &TrainConfig, start: usize) -> Result<(fs::File, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let snap = dir.join("config.snapshot");
    let text = serde_json::to_string_pretty(cfg).expect("config serializes");
    if snap.exists() {
        let old = fs::read_to_string(&snap).map_err(|e| Error::io(&snap, e))?;
        let old: TrainConfig = serde_json::from_str(&old)
            .map_err(|e| Error::Config(format!("unreadable config snapshot: {e}")))?;
        // Only the step budget may grow when a run is continued.
        if (TrainConfig { steps: cfg.steps, ..old }) != *cfg {
            return Err(Error::Config(format!(
                "{} holds a different configuration",
                snap.display()
            )));
        }
    }
    write_atomic(&snap, text.as_bytes())?;
    let log_path = dir.join("log.csv");
    if start == 0 || !log_path.exists() {
        write_atomic(&log_path, format!("{}\n", LossBreakdown::CSV_HEADER).as_bytes())?;
    } else {
        truncate_log(&log_path, start)?;
    }
    let f = fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    Ok((f, log_path))
}

/// Drops log rows at or after `step`, e.g. ones written after the checkpoint
/// a run resumes from.
fn truncate_log(path: &Path, step: usize) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0 || LossBreakdown::parse_csv_row(line).is_some_and(|(s, _)| s < step);
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    write_atomic(path, out.as_bytes())
}

/// Per-step losses and timings of one run.
#[derive(Debug, Clone)]
pub struct RunLog {
    pub rows: Vec<(usize, LossBreakdown)>,
    pub step_seconds: Vec<f64>,
    pub config: TrainConfig,
    pub final_checkpoint: Option<PathBuf>,
}

/// Reads a `log.csv` back into rows.
pub fn read_log(path: &Path) -> Result<Vec<(usize, LossBreakdown)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().skip(1).filter_map(LossBreakdown::parse_csv_row).collect())
}

/// Checkpoint with the highest step in `dir`.
pub fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
    fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_str()?.to_string();
            let step: usize = name.strip_prefix("ckpt-")?.strip_suffix(".bin")?.parse().ok()?;
            Some((step, e.path()))
        })
        .max_by_key(|(s, _)| *s)
        .map(|(_, p)| p)
}

/// Trains a fresh network on `pairs`.
pub fn fit(cfg: &TrainConfig, pairs: &[SamplePair], run_dir: Option<&Path>) -> Result<(Trainer, RunLog)> {
    let mut t = Trainer::new(cfg.clone())?;
    let log = t.run(pairs, run_dir)?;
    Ok((t, log))
}

/// Enhances an image of any size: reflect-pads to a multiple of the network
/// and segmenter strides, runs both, and crops back.
pub fn enhance(net: &SllenNet, ssn: &Ssn, img: &ImageTensor) -> Result<ImageTensor> {
    let rgb = img.to_rgb();
    let m = net.config().spatial_multiple().max(8);
    let (padded, h, w) = reflect_pad_to_multiple(&rgb, m);
    let x = padded.to_batch();
    let sem = if net.needs_semantics() {
        Some(ssn.forward(&x)?)
    } else {
        None
    };
    let out = net.infer(&x, sem.as_ref())?;
    let out = ImageTensor::from_batch(&out, 0)?;
    Ok(crop(&out, 0, 0, h, w))
}

/// Mean metrics of `net` over `pairs`; PSNR/SSIM only where references exist.
pub fn evaluate_pairs(net: &SllenNet, ssn: &Ssn, pairs: &[SamplePair]) -> Result<ImageMetrics> {
    let mut rows = Vec::with_capacity(pairs.len());
    for p in pairs {
        let o = enhance(net, ssn, &p.low)?;
        let low = p.low.to_rgb();
        let mut m = ImageMetrics {
            loe: Some(loe(&low, &o)?),
            ceiq: Some(ceiq(&o)),
            ..Default::default()
        };
        if let Some(r) = &p.reference {
            let r = r.to_rgb();
            m.psnr = Some(psnr(&o, &r)?);
            m.ssim = ssim(&o, &r).ok();
        }
        rows.push((p.id.clone(), m));
    }
    Ok(MetricReport::from_rows(rows).averages)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub params: usize,
    pub metrics: ImageMetrics,
    pub final_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub const CSV_HEADER: &'static str = "variant,params,psnr,ssim,loe,ceiq,final_total";

    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let m = &r.metrics;
            out.push_str(&format!(
                "{},{},{},{},{},{},{:e}\n",
                r.label,
                r.params,
                cell(m.psnr),
                cell(m.ssim),
                cell(m.loe),
                cell(m.ceiq),
                r.final_total
            ));
        }
        out
    }
}

/// Deterministic 80/20 split; when the held-out side is empty (tiny
/// datasets) the training pairs are evaluated instead.
fn ablation_split(pairs: &[SamplePair]) -> (Vec<SamplePair>, Vec<SamplePair>) {
    let (train, held) = split_by_stem(pairs);
    if held.is_empty() || train.is_empty() {
        log::warn!("held-out split is empty; evaluating on the training pairs");
        return (pairs.to_vec(), pairs.to_vec());
    }
    (train, held)
}

fn ablate(
    runs: Vec<(String, TrainConfig)>,
    pairs: &[SamplePair],
    run_dir: Option<&Path>,
) -> Result<AblationTable> {
    let (train, held) = ablation_split(pairs);
    let mut rows = Vec::with_capacity(runs.len());
    for (label, cfg) in runs {
        let sub = run_dir.map(|d| d.join(label.replace(['/', ' '], "_")));
        let (t, log) = fit(&cfg, &train, sub.as_deref())?;
        let metrics = evaluate_pairs(t.net(), t.ssn(), &held)?;
        rows.push(AblationRow {
            label,
            params: t.net().param_count(),
            metrics,
            final_total: log.rows.last().map(|(_, b)| b.total).unwrap_or(f64::NAN),
        });
    }
    let table = AblationTable { rows };
    if let Some(d) = run_dir {
        write_atomic(&d.join("ablation.csv"), table.to_csv().as_bytes())?;
    }
    Ok(table)
}

/// Trains every variant from the same seed and data order.
pub fn run_ablation(base: &TrainConfig, pairs: &[SamplePair], run_dir: Option<&Path>) -> Result<AblationTable> {
    let runs = Variant::ALL
        .iter()
        .map(|&v| {
            (
                v.label().to_string(),
                TrainConfig {
                    variant: v,
                    ..base.clone()
                },
            )
        })
        .collect();
    ablate(runs, pairs, run_dir)
}

/// Trains the full network with all losses and with each weighted term
/// switched off in turn.
pub fn loss_ablation(base: &TrainConfig, pairs: &[SamplePair], run_dir: Option<&Path>) -> Result<AblationTable> {
    let w = base.loss_weights;
    let with = |label: &str, lw: LossWeights| {
        (
            label.to_string(),
            TrainConfig {
                variant: Variant::Full,
                loss_weights: lw,
                ..base.clone()
            },
        )
    };
    let runs = vec![
        with("all", w),
        with("w/o L_kd", LossWeights { lambda_kd: 0.0, ..w }),
        with("w/o L_itv", LossWeights { lambda_itv: 0.0, ..w }),
        with("w/o L_gra", LossWeights { lambda_gra: 0.0, ..w }),
    ];
    ablate(runs, pairs, run_dir)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimingRow {
    pub height: usize,
    pub width: usize,
    pub median_seconds: f64,
}

/// Median wall-clock time of [`enhance`] at each size, after one warm-up.
pub fn time_inference(net: &SllenNet, ssn: &Ssn, sizes: &[(usize, usize)], repeats: usize) -> Result<Vec<TimingRow>> {
    if repeats < 3 {
        return Err(Error::InvalidParam(format!("repeats must be >= 3, got {repeats}")));
    }
    sizes
        .iter()
        .map(|&(h, w)| {
            let img = ImageTensor::from_fn(3, h, w, |(c, y, x)| ((c + y + x) % 17) as f64 / 17.0)?;
            enhance(net, ssn, &img)?;
            let mut times: Vec<f64> = (0..repeats)
                .map(|_| {
                    let t0 = Instant::now();
                    enhance(net, ssn, &img).map(|_| t0.elapsed().as_secs_f64())
                })
                .collect::<Result<_>>()?;
            times.sort_by(|a, b| a.total_cmp(b));
            Ok(TimingRow {
                height: h,
                width: w,
                median_seconds: median_sorted(&times),
            })
        })
        .collect()
}

pub fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::darken;

    pub(crate) fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            steps: 3,
            batch_size: 2,
            patch: 16,
            lr: 1e-3,
            seed: 1,
            net: NetConfig {
                base_channels: 4,
                attention_dk: 4,
                num_classes: 3,
                hseb_widths: vec![4, 4, 8],
                ..Default::default()
            },
            ssn: SsnConfig {
                num_classes: 3,
                stage_widths: vec![4, 4, 8, 512, 4],
                ..Default::default()
            },
            perceptual: PerceptualConfig {
                widths: vec![4, 4],
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub(crate) fn pairs(n: usize, side: usize) -> Vec<SamplePair> {
        (0..n)
            .map(|i| {
                let r = ImageTensor::from_fn(3, side, side, |(c, y, x)| {
                    0.3 + 0.4 * (((c + 1) * (x + 2 * y + i)) as f64 * 0.05).sin().abs()
                })
                .unwrap();
                SamplePair {
                    id: format!("img{i}"),
                    low: darken(&r, Some(2.5), Some(0.6), 0).unwrap(),
                    reference: Some(r),
                    label_map: None,
                }
            })
            .collect()
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut t = Trainer::new(TrainConfig { lr: 0.0, ..tiny_cfg() }).unwrap();
        let before = t.net().params().clone();
        let data = pairs(2, 16);
        let plan = BatchPlan::new(&data, BatchConfig { batch_size: 2, patch: 16, seed: 0, flip: false }).unwrap();
        t.train_step(&plan.batch(0, 0)).unwrap();
        assert_eq!(t.net().params(), &before);
    }

    #[test]
    fn missing_reference_is_rejected() {
        let mut t = Trainer::new(tiny_cfg()).unwrap();
        let mut data = pairs(1, 16);
        data[0].reference = None;
        let plan = BatchPlan::new(&data, BatchConfig { batch_size: 1, patch: 16, seed: 0, flip: false }).unwrap();
        assert!(matches!(t.train_step(&plan.batch(0, 0)), Err(Error::NoReference)));
    }

    #[test]
    fn steps_must_be_positive() {
        assert!(matches!(Trainer::new(TrainConfig { steps: 0, ..tiny_cfg() }), Err(Error::Config(_))));
    }

    #[test]
    fn runs_are_deterministic_and_freeze_helpers() {
        let data = pairs(3, 16);
        let (t1, a) = fit(&tiny_cfg(), &data, None).unwrap();
        let (_, b) = fit(&tiny_cfg(), &data, None).unwrap();
        assert_eq!(a.rows, b.rows);
        let fresh = Ssn::build(tiny_cfg().ssn).unwrap();
        assert_eq!(t1.ssn().params(), fresh.params());
        let fx = tiny_cfg().perceptual.build().unwrap();
        assert_eq!(t1.feature_extractor().params(), fx.params());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = pairs(3, 16);
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { steps: 4, checkpoint_every: 2, ..tiny_cfg() };
        let (_, full) = fit(&cfg, &data, None).unwrap();
        let run = dir.path().join("r");
        fit(&TrainConfig { steps: 2, ..cfg.clone() }, &data, Some(&run)).unwrap();
        let ck = latest_checkpoint(&run).unwrap();
        assert!(ck.ends_with("ckpt-2.bin"));
        let mut t = Trainer::resume(cfg.clone(), &ck).unwrap();
        let tail = t.run(&data, Some(&run)).unwrap();
        assert_eq!(tail.rows[..], full.rows[2..]);
        let logged = read_log(&run.join("log.csv")).unwrap();
        assert_eq!(logged.len(), 4);
        assert_eq!(logged.iter().map(|r| r.0).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        for ((_, a), (_, b)) in logged.iter().zip(&full.rows) {
            assert!((a.total - b.total).abs() <= 1e-6 * b.total.abs().max(1.0));
        }
    }

    #[test]
    fn run_dir_layout() {
        let data = pairs(2, 16);
        let dir = tempfile::tempdir().unwrap();
        let (_, log) = fit(&tiny_cfg(), &data, Some(dir.path())).unwrap();
        assert!(dir.path().join("config.snapshot").exists());
        assert_eq!(read_log(&dir.path().join("log.csv")).unwrap().len(), 3);
        assert_eq!(log.final_checkpoint.unwrap(), dir.path().join("ckpt-3.bin"));
        let other = TrainConfig { lr: 0.5, ..tiny_cfg() };
        assert!(matches!(fit(&other, &data, Some(dir.path())), Err(Error::Config(_))));
    }

    #[test]
    fn enhance_preserves_size() {
        let t = Trainer::new(tiny_cfg()).unwrap();
        for s in [9, 13, 16] {
            let img = ImageTensor::constant(3, s, s + 3, 0.2).unwrap();
            let o = enhance(t.net(), t.ssn(), &img).unwrap();
            assert_eq!(o.shape(), [3, s, s + 3]);
            assert!(o.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn ablation_tables_have_four_rows() {
        let data = pairs(2, 16);
        let cfg = TrainConfig { steps: 1, ..tiny_cfg() };
        let dir = tempfile::tempdir().unwrap();
        let t = run_ablation(&cfg, &data, Some(dir.path())).unwrap();
        let labels: Vec<&str> = t.rows.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels, ["FULL", "SLLEN-1", "SLLEN-2", "SLLEN-3"]);
        let p: Vec<usize> = t.rows.iter().map(|r| r.params).collect();
        assert!(p[3] < p[1] && p[3] < p[2] && p[1] <= p[0] && p[2] <= p[0]);
        assert_eq!(fs::read_to_string(dir.path().join("ablation.csv")).unwrap().lines().count(), 5);
        let l = loss_ablation(&cfg, &data, None).unwrap();
        assert_eq!(l.rows.len(), 4);
    }

    #[test]
    fn timing_table() {
        let t = Trainer::new(tiny_cfg()).unwrap();
        let rows = time_inference(t.net(), t.ssn(), &[(16, 16), (32, 32)], 3).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.median_seconds > 0.0));
        assert!(time_inference(t.net(), t.ssn(), &[(16, 16)], 2).is_err());
        assert_eq!(median_sorted(&[1.0, 2.0, 10.0]), 2.0);
    }
}
