//! Paired dataset scanning, synthetic darkening and seeded patch batching.
//!
//! Expected layout: `<root>/low/*.png`, `<root>/ref/*.png` and optionally
//! `<root>/labels/*.png` (8-bit class-id maps). Files are paired by stem.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sllen_tensor::Tensor;

use crate::imagecore::{load_image, ImageTensor};
use crate::{Error, Result};

/// Default number of samples per batch.
pub const DEFAULT_BATCH_SIZE: usize = 6;
/// Encoder downsampling factor; patch sides must be multiples of it.
pub const SPATIAL_MULTIPLE: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub id: String,
    pub low: ImageTensor,
    pub reference: Option<ImageTensor>,
    pub label_map: Option<Array2<u32>>,
}

/// Result of a directory scan: matched pairs (sorted by stem) plus every stem
/// that only appeared on one side.
#[derive(Debug, Clone)]
pub struct ScanReport {
    pub pairs: Vec<SamplePair>,
    pub unmatched: Vec<String>,
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Image files in `dir`, keyed by stem.
pub fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::FileNotFound(dir.to_path_buf()));
    }
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_image(&path) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Stems present in exactly one of the two maps, sorted.
pub fn unmatched_stems<A, B>(a: &BTreeMap<String, A>, b: &BTreeMap<String, B>) -> Vec<String> {
    let mut out: Vec<String> = a
        .keys()
        .filter(|k| !b.contains_key(*k))
        .chain(b.keys().filter(|k| !a.contains_key(*k)))
        .cloned()
        .collect();
    out.sort();
    out
}

/// Loads an 8-bit class-id map (grayscale PNG) as `(H, W)` labels.
pub fn load_label_map(path: &Path) -> Result<Array2<u32>> {
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    let img = image::open(path).map_err(|e| Error::CorruptImage {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let luma = img.to_luma8();
    let (w, h) = luma.dimensions();
    Ok(Array2::from_shape_vec(
        (h as usize, w as usize),
        luma.into_raw().into_iter().map(u32::from).collect(),
    )
    .unwrap())
}

/// Pairs `low_dir` and `ref_dir` by file stem.
pub fn scan_paired_dir(low_dir: &Path, ref_dir: &Path) -> Result<ScanReport> {
    let lows = list_images(low_dir)?;
    let refs = list_images(ref_dir)?;
    let unmatched = unmatched_stems(&lows, &refs);
    if !unmatched.is_empty() {
        log::warn!("unmatched stems: {}", unmatched.join(", "));
    }
    let mut pairs = Vec::new();
    for (stem, low_path) in &lows {
        let Some(ref_path) = refs.get(stem) else { continue };
        let low = load_image(low_path)?;
        let reference = load_image(ref_path)?;
        if low.height() != reference.height() || low.width() != reference.width() {
            return Err(Error::ShapeMismatch(format!(
                "pair {stem}: low {:?} vs reference {:?}",
                low.shape(),
                reference.shape()
            )));
        }
        pairs.push(SamplePair {
            id: stem.clone(),
            low: low.to_rgb(),
            reference: Some(reference.to_rgb()),
            label_map: None,
        });
    }
    if pairs.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no stem-matched pairs in {} and {}",
            low_dir.display(),
            ref_dir.display()
        )));
    }
    Ok(ScanReport { pairs, unmatched })
}

/// Scans `<root>/low` + `<root>/ref`, attaching `<root>/labels` maps when present.
pub fn scan_dataset_root(root: &Path) -> Result<ScanReport> {
    let mut report = scan_paired_dir(&root.join("low"), &root.join("ref"))?;
    let label_dir = root.join("labels");
    if label_dir.is_dir() {
        let labels = list_images(&label_dir)?;
        for pair in &mut report.pairs {
            if let Some(p) = labels.get(&pair.id) {
                let map = load_label_map(p)?;
                if map.dim() != (pair.low.height(), pair.low.width()) {
                    return Err(Error::ShapeMismatch(format!("label map for {}", pair.id)));
                }
                pair.label_map = Some(map);
            }
        }
    }
    Ok(report)
}

/// Gamma-then-scale darkening parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DarkenParams {
    pub gamma: f64,
    pub scale: f64,
}

impl DarkenParams {
    pub const GAMMA_RANGE: (f64, f64) = (2.0, 5.0);
    pub const SCALE_RANGE: (f64, f64) = (0.4, 0.9);

    /// Fills unset parameters from a generator seeded with `seed`. Both values
    /// are always drawn, so a given seed maps to one fixed pair.
    pub fn resolve(gamma: Option<f64>, scale: Option<f64>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = rng.random_range(Self::GAMMA_RANGE.0..=Self::GAMMA_RANGE.1);
        let sc = rng.random_range(Self::SCALE_RANGE.0..=Self::SCALE_RANGE.1);
        let p = Self {
            gamma: gamma.unwrap_or(g),
            scale: scale.unwrap_or(sc),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 1.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidParam(format!("gamma must be >= 1, got {}", self.gamma)));
        }
        if !(self.scale > 0.0 && self.scale <= 1.0) {
            return Err(Error::InvalidParam(format!(
                "scale must be in (0, 1], got {}",
                self.scale
            )));
        }
        Ok(())
    }

    pub fn apply(&self, img: &ImageTensor) -> Result<ImageTensor> {
        self.validate()?;
        let (gamma, scale) = (self.gamma, self.scale);
        img.map(|v| scale * v.max(0.0).powf(gamma))
    }
}

/// Synthetic low-light rendering `scale * img^gamma`; unset parameters are
/// drawn from `gamma ~ U[2, 5]`, `scale ~ U[0.4, 0.9]` with the given seed.
pub fn darken(
    img: &ImageTensor,
    gamma: Option<f64>,
    scale: Option<f64>,
    seed: u64,
) -> Result<ImageTensor> {
    DarkenParams::resolve(gamma, scale, seed)?.apply(img)
}

/// A stacked mini-batch of patches.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub lows: Tensor,
    pub references: Option<Tensor>,
    pub ids: Vec<String>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchConfig {
    pub batch_size: usize,
    pub patch: usize,
    pub seed: u64,
    /// Random horizontal flips (off by default).
    pub flip: bool,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a simple combination.
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed-addressable batch schedule: the batch at any global step can be
/// rebuilt without replaying earlier ones, which makes resumption exact.
#[derive(Debug, Clone)]
pub struct BatchPlan<'a> {
    pairs: &'a [SamplePair],
    cfg: BatchConfig,
}

impl<'a> BatchPlan<'a> {
    pub fn new(pairs: &'a [SamplePair], cfg: BatchConfig) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyDataset("no samples to batch".into()));
        }
        if cfg.batch_size == 0 {
            return Err(Error::InvalidParam("batch_size must be >= 1".into()));
        }
        if cfg.patch == 0 || !cfg.patch.is_multiple_of(SPATIAL_MULTIPLE) {
            return Err(Error::InvalidParam(format!(
                "patch must be a positive multiple of {SPATIAL_MULTIPLE}, got {}",
                cfg.patch
            )));
        }
        for p in pairs {
            if p.low.height() < cfg.patch || p.low.width() < cfg.patch {
                return Err(Error::PatchLargerThanImage {
                    patch: cfg.patch,
                    id: p.id.clone(),
                    height: p.low.height(),
                    width: p.low.width(),
                });
            }
        }
        Ok(Self { pairs, cfg })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.pairs.len().div_ceil(self.cfg.batch_size)
    }

    /// Sample order for one epoch.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.pairs.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.cfg.seed, epoch as u64, 0));
        order.shuffle(&mut rng);
        order
    }

    /// Batch number `index` within `epoch`; the last one may be partial.
    pub fn batch(&self, epoch: usize, index: usize) -> Batch {
        let order = self.epoch_order(epoch);
        let bs = self.cfg.batch_size;
        let members = &order[index * bs..((index + 1) * bs).min(order.len())];
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.cfg.seed, epoch as u64, index as u64 + 1));
        let p = self.cfg.patch;
        let mut lows = Array4::<f64>::zeros((members.len(), 3, p, p));
        let with_refs = members.iter().all(|&i| self.pairs[i].reference.is_some());
        let mut refs = with_refs.then(|| Array4::<f64>::zeros((members.len(), 3, p, p)));
        let mut ids = Vec::with_capacity(members.len());
        for (n, &i) in members.iter().enumerate() {
            let pair = &self.pairs[i];
            let top = rng.random_range(0..=pair.low.height() - p);
            let left = rng.random_range(0..=pair.low.width() - p);
            let flip = self.cfg.flip && rng.random_bool(0.5);
            let put = |dst: &mut Array4<f64>, img: &ImageTensor| {
                let rgb = img.to_rgb();
                let mut view = rgb.data().slice(s![.., top..top + p, left..left + p]);
                if flip {
                    view.invert_axis(Axis(2));
                }
                dst.index_axis_mut(Axis(0), n).assign(&view);
            };
            put(&mut lows, &pair.low);
            if let (Some(r), Some(img)) = (refs.as_mut(), pair.reference.as_ref()) {
                put(r, img);
            }
            ids.push(pair.id.clone());
        }
        Batch {
            lows: lows.into_dyn(),
            references: refs.map(|r| r.into_dyn()),
            ids,
        }
    }

    /// Batch consumed at global step `step` (0-based), across epochs.
    pub fn batch_at_step(&self, step: usize) -> Batch {
        let bpe = self.batches_per_epoch();
        self.batch(step / bpe, step % bpe)
    }
}

/// Endless stream of batches, epoch after epoch.
pub struct BatchStream<'a> {
    plan: BatchPlan<'a>,
    step: usize,
}

impl Iterator for BatchStream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let b = self.plan.batch_at_step(self.step);
        self.step += 1;
        Some(b)
    }
}

/// Shuffled, randomly cropped batches; deterministic in `seed`.
pub fn iterate_batches(
    pairs: &[SamplePair],
    batch_size: usize,
    patch: usize,
    seed: u64,
) -> Result<BatchStream<'_>> {
    let plan = BatchPlan::new(
        pairs,
        BatchConfig {
            batch_size,
            patch,
            seed,
            flip: false,
        },
    )?;
    Ok(BatchStream { plan, step: 0 })
}

/// Deterministic 80/20 split by stem hash: `(train, held_out)`.
pub fn split_by_stem(pairs: &[SamplePair]) -> (Vec<SamplePair>, Vec<SamplePair>) {
    let mut train = Vec::new();
    let mut held = Vec::new();
    for p in pairs {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in p.id.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        if h.is_multiple_of(5) {
            held.push(p.clone());
        } else {
            train.push(p.clone());
        }
    }
    (train, held)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::save_image;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn pair(id: &str, side: usize, v: f64) -> SamplePair {
        let img = ImageTensor::from_fn(3, side, side, |(c, y, x)| {
            (v + 0.01 * (c + y * side + x) as f64).fract()
        })
        .unwrap();
        SamplePair {
            id: id.into(),
            low: img.clone(),
            reference: Some(img),
            label_map: None,
        }
    }

    #[test]
    fn darken_fixed_values() {
        let img = ImageTensor::constant(3, 2, 2, 0.5).unwrap();
        let out = darken(&img, Some(2.0), Some(0.8), 0).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
        let id = darken(&img, Some(1.0), Some(1.0), 0).unwrap();
        assert_eq!(id, img);
        assert!(darken(&img, Some(0.5), Some(0.8), 0).is_err());
        assert!(darken(&img, Some(2.0), Some(0.0), 0).is_err());
        assert!(darken(&img, Some(2.0), Some(1.1), 0).is_err());
    }

    #[test]
    fn seeded_darken_is_deterministic_and_in_range() {
        let img = ImageTensor::from_fn(3, 4, 4, |(c, y, x)| (c + y + x) as f64 / 9.0).unwrap();
        let a = darken(&img, None, None, 42).unwrap();
        let b = darken(&img, None, None, 42).unwrap();
        assert_eq!(a, b);
        let p = DarkenParams::resolve(None, None, 42).unwrap();
        assert!((2.0..=5.0).contains(&p.gamma));
        assert!((0.4..=0.9).contains(&p.scale));
        assert_ne!(DarkenParams::resolve(None, None, 43).unwrap(), p);
    }

    #[test]
    fn seven_pairs_batch_six() {
        let pairs: Vec<_> = (0..7).map(|i| pair(&format!("p{i}"), 16, i as f64 * 0.1)).collect();
        let sizes: Vec<usize> = iterate_batches(&pairs, DEFAULT_BATCH_SIZE, 8, 3)
            .unwrap()
            .take(2)
            .map(|b| b.len())
            .collect();
        assert_eq!(sizes, vec![6, 1]);
    }

    #[test]
    fn same_seed_same_crops() {
        let pairs: Vec<_> = (0..5).map(|i| pair(&format!("p{i}"), 24, i as f64 * 0.1)).collect();
        let a: Vec<_> = iterate_batches(&pairs, 2, 8, 9).unwrap().take(7).collect();
        let b: Vec<_> = iterate_batches(&pairs, 2, 8, 9).unwrap().take(7).collect();
        assert_eq!(a, b);
        let c: Vec<_> = iterate_batches(&pairs, 2, 8, 10).unwrap().take(7).collect();
        assert_ne!(a, c);
    }

    #[test]
    fn crops_are_shared_between_low_and_reference() {
        let mut pairs: Vec<_> = (0..3).map(|i| pair(&format!("p{i}"), 24, i as f64 * 0.2)).collect();
        for p in &mut pairs {
            p.reference = Some(p.low.map(|v| 1.0 - v).unwrap());
        }
        for b in iterate_batches(&pairs, 2, 8, 1).unwrap().take(4) {
            let r = b.references.unwrap();
            for (l, r) in b.lows.iter().zip(r.iter()) {
                assert!((l + r - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn patch_errors() {
        let pairs = vec![pair("a", 16, 0.1)];
        assert!(matches!(
            iterate_batches(&pairs, 1, 24, 0).err(),
            Some(Error::PatchLargerThanImage { .. })
        ));
        assert!(matches!(iterate_batches(&pairs, 1, 12, 0).err(), Some(Error::InvalidParam(_))));
        assert!(matches!(iterate_batches(&pairs, 0, 8, 0).err(), Some(Error::InvalidParam(_))));
    }

    #[test]
    fn scan_pairs_and_reports_unmatched() {
        let root = tempfile::tempdir().unwrap();
        let (low, rf) = (root.path().join("low"), root.path().join("ref"));
        std::fs::create_dir_all(&low).unwrap();
        std::fs::create_dir_all(&rf).unwrap();
        assert!(matches!(scan_paired_dir(&low, &rf), Err(Error::EmptyDataset(_))));
        let img = ImageTensor::constant(3, 8, 8, 0.25).unwrap();
        for stem in ["b", "a"] {
            save_image(&img, &low.join(format!("{stem}.png"))).unwrap();
        }
        save_image(&img, &rf.join("a.png")).unwrap();
        let r = scan_paired_dir(&low, &rf).unwrap();
        assert_eq!(r.pairs.len(), 1);
        assert_eq!(r.unmatched, vec!["b".to_string()]);
        save_image(&img, &rf.join("b.png")).unwrap();
        let r = scan_dataset_root(root.path()).unwrap();
        let ids: Vec<_> = r.pairs.iter().map(|p| p.id.as_str()).collect();
        assert_eq!(ids, ["a", "b"]);
        assert!(r.unmatched.is_empty());

        save_image(&ImageTensor::constant(3, 8, 16, 0.2).unwrap(), &rf.join("b.png")).unwrap();
        assert!(matches!(scan_paired_dir(&low, &rf), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn split_is_deterministic_partition() {
        let pairs: Vec<_> = (0..40).map(|i| pair(&format!("img{i:03}"), 8, 0.1)).collect();
        let (t1, h1) = split_by_stem(&pairs);
        let (t2, h2) = split_by_stem(&pairs);
        assert_eq!(t1.len() + h1.len(), 40);
        assert_eq!(t1, t2);
        assert_eq!(h1, h2);
        assert!(!h1.is_empty() && !t1.is_empty());
    }

    proptest! {
        #[test]
        fn darken_is_monotone(x in 0.0f64..1.0, y in 0.0f64..1.0, gamma in 1.0f64..6.0, scale in 0.01f64..1.0) {
            let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
            let a = darken(&ImageTensor::constant(1, 1, 1, lo).unwrap(), Some(gamma), Some(scale), 0).unwrap();
            let b = darken(&ImageTensor::constant(1, 1, 1, hi).unwrap(), Some(gamma), Some(scale), 0).unwrap();
            prop_assert!(a.data()[[0, 0, 0]] <= b.data()[[0, 0, 0]]);
        }

        #[test]
        fn epoch_partitions_ids(n in 1usize..20, bs in 1usize..8, seed in 0u64..1000, epoch in 0usize..5) {
            let pairs: Vec<_> = (0..n).map(|i| pair(&format!("s{i}"), 8, 0.1)).collect();
            let plan = BatchPlan::new(&pairs, BatchConfig { batch_size: bs, patch: 8, seed, flip: false }).unwrap();
            let mut seen = HashSet::new();
            let mut total = 0;
            for b in 0..plan.batches_per_epoch() {
                for id in plan.batch(epoch, b).ids {
                    total += 1;
                    seen.insert(id);
                }
            }
            prop_assert_eq!(total, n);
            prop_assert_eq!(seen.len(), n);
        }
    }
}
