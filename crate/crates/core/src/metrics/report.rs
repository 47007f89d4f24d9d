use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ceiq, crop_labels, loe, miou, psnr, ssim};
use crate::dataset::{list_images, load_label_map, unmatched_stems, SPATIAL_MULTIPLE};
use crate::imagecore::{load_image, reflect_pad_to_multiple, ImageTensor};
use crate::ssn::Ssn;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Second directory holds references: PSNR, SSIM, LOE and CEIQ.
    Paired,
    /// Second directory holds the low-light inputs: LOE and CEIQ only.
    Unpaired,
}

/// Scores for one image; `None` where a metric does not apply.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub loe: Option<f64>,
    pub ceiq: Option<f64>,
    pub miou: Option<f64>,
}

impl ImageMetrics {
    fn fields(&self) -> [Option<f64>; 5] {
        [self.psnr, self.ssim, self.loe, self.ceiq, self.miou]
    }

    fn from_fields(f: [Option<f64>; 5]) -> Self {
        Self {
            psnr: f[0],
            ssim: f[1],
            loe: f[2],
            ceiq: f[3],
            miou: f[4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Rows ordered by stem.
    pub per_image: Vec<(String, ImageMetrics)>,
    pub averages: ImageMetrics,
    pub count: usize,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "id,psnr,ssim,loe,ceiq,miou";

    pub fn from_rows(per_image: Vec<(String, ImageMetrics)>) -> Self {
        let mut avg = [None; 5];
        for (k, slot) in avg.iter_mut().enumerate() {
            let vals: Vec<f64> = per_image.iter().filter_map(|(_, m)| m.fields()[k]).collect();
            if !vals.is_empty() {
                *slot = Some(vals.iter().sum::<f64>() / vals.len() as f64);
            }
        }
        Self {
            count: per_image.len(),
            averages: ImageMetrics::from_fields(avg),
            per_image,
        }
    }

    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        let rows = self
            .per_image
            .iter()
            .map(|(id, m)| (id.as_str(), m))
            .chain(std::iter::once(("AVERAGE", &self.averages)));
        for (id, m) in rows {
            let f = m.fields();
            writeln!(out, "{id},{},{},{},{},{}", cell(f[0]), cell(f[1]), cell(f[2]), cell(f[3]), cell(f[4]))
                .expect("writing to a string");
        }
        out
    }
}

/// Options for [`evaluate_dir`].
#[derive(Default)]
pub struct EvalOptions<'a> {
    /// Ground-truth label maps, matched by stem.
    pub labels_dir: Option<PathBuf>,
    /// Predicted label maps; when absent, `ssn` segments the images instead.
    pub pred_labels_dir: Option<PathBuf>,
    pub ssn: Option<&'a Ssn>,
}

/// Metrics for every image of `pred_dir` that has a same-stem partner in
/// `other_dir` (references in paired mode, low-light inputs otherwise).
pub fn evaluate_dir(
    pred_dir: &Path,
    other_dir: &Path,
    mode: EvalMode,
    opts: &EvalOptions<'_>,
) -> Result<MetricReport> {
    let preds = list_images(pred_dir)?;
    let others = list_images(other_dir)?;
    for stem in unmatched_stems(&preds, &others) {
        log::warn!("no partner for '{stem}' between {} and {}", pred_dir.display(), other_dir.display());
    }
    let stems: Vec<String> = preds.keys().filter(|k| others.contains_key(*k)).cloned().collect();
    if stems.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no matching images in {} and {}",
            pred_dir.display(),
            other_dir.display()
        )));
    }
    let labels = opts.labels_dir.as_deref().map(list_images).transpose()?;
    let pred_labels = opts.pred_labels_dir.as_deref().map(list_images).transpose()?;
    let rows = stems
        .par_iter()
        .map(|stem| {
            let o = load_image(&preds[stem])?.to_rgb();
            let x = load_image(&others[stem])?.to_rgb();
            let mut m = ImageMetrics::default();
            if mode == EvalMode::Paired {
                m.psnr = Some(psnr(&o, &x)?);
                m.ssim = match ssim(&o, &x) {
                    Ok(v) => Some(v),
                    Err(Error::ImageTooSmall { .. }) => {
                        log::warn!("'{stem}' is too small for SSIM");
                        None
                    }
                    Err(e) => return Err(e),
                };
            }
            m.loe = Some(loe(&x, &o)?);
            m.ceiq = Some(ceiq(&o));
            if let Some(gt) = labels.as_ref().and_then(|l| l.get(stem)) {
                let gt = load_label_map(gt)?;
                let pred = match pred_labels.as_ref().and_then(|l| l.get(stem)) {
                    Some(p) => load_label_map(p)?,
                    None => segment(opts.ssn, &o)?,
                };
                let classes = opts.ssn.map(|s| s.config().num_classes).unwrap_or_else(|| {
                    1 + pred.iter().chain(gt.iter()).copied().max().unwrap_or(0) as usize
                });
                m.miou = Some(miou(&pred, &gt, classes)?.1);
            }
            Ok((stem.clone(), m))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_rows(rows))
}

fn segment(ssn: Option<&Ssn>, img: &ImageTensor) -> Result<Array2<u32>> {
    let ssn = ssn.ok_or_else(|| {
        Error::Config("label maps given without predicted labels or a segmenter".into())
    })?;
    let (padded, h, w) = reflect_pad_to_multiple(img, SPATIAL_MULTIPLE);
    let labels = ssn.predict_labels(&padded.to_batch())?;
    Ok(crop_labels(&labels[0], h, w))
}

/// Average of each metric keyed by name, for summaries.
pub fn averages_map(report: &MetricReport) -> BTreeMap<&'static str, f64> {
    let names = ["psnr", "ssim", "loe", "ceiq", "miou"];
    names
        .into_iter()
        .zip(report.averages.fields())
        .filter_map(|(n, v)| v.map(|v| (n, v)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::save_image;

    fn fixture(dir: &Path, stem: &str, k: f64) {
        let img = ImageTensor::from_fn(3, 12, 12, |(c, y, x)| ((c + y * 3 + x) as f64 * k).sin() * 0.4 + 0.5).unwrap();
        save_image(&img, &dir.join(format!("{stem}.png"))).unwrap();
    }

    #[test]
    fn identical_dirs_give_identity_scores() {
        let d = tempfile::tempdir().unwrap();
        fixture(d.path(), "a", 0.3);
        let r = evaluate_dir(d.path(), d.path(), EvalMode::Paired, &EvalOptions::default()).unwrap();
        assert_eq!(r.count, 1);
        assert_eq!(r.averages.psnr, Some(100.0));
        assert!((r.averages.ssim.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(r.averages.loe, Some(0.0));
        assert!(r.to_csv().lines().last().unwrap().starts_with("AVERAGE,100.000000,1.000000,0.000000,"));
    }

    #[test]
    fn averages_and_unpaired_columns() {
        let p = tempfile::tempdir().unwrap();
        let q = tempfile::tempdir().unwrap();
        for (s, k) in [("a", 0.3), ("b", 0.7), ("c", 0.9)] {
            fixture(p.path(), s, k);
        }
        fixture(q.path(), "a", 0.5);
        fixture(q.path(), "b", 0.1);
        let r = evaluate_dir(p.path(), q.path(), EvalMode::Paired, &EvalOptions::default()).unwrap();
        assert_eq!(r.count, 2);
        let mean = (r.per_image[0].1.psnr.unwrap() + r.per_image[1].1.psnr.unwrap()) / 2.0;
        assert_eq!(r.averages.psnr.unwrap(), mean);
        let u = evaluate_dir(p.path(), q.path(), EvalMode::Unpaired, &EvalOptions::default()).unwrap();
        assert!(u.averages.psnr.is_none() && u.averages.ssim.is_none());
        let avg_row = u.to_csv().lines().last().unwrap().to_string();
        assert!(avg_row.starts_with("AVERAGE,,,"));
        assert_eq!(averages_map(&u).len(), 2);
    }

    #[test]
    fn labels_add_miou() {
        let p = tempfile::tempdir().unwrap();
        let l = tempfile::tempdir().unwrap();
        fixture(p.path(), "a", 0.3);
        let lab = image::GrayImage::from_fn(12, 12, |x, _| image::Luma([(x % 2) as u8]));
        lab.save(l.path().join("a.png")).unwrap();
        let opts = EvalOptions {
            labels_dir: Some(l.path().to_path_buf()),
            pred_labels_dir: Some(l.path().to_path_buf()),
            ssn: None,
        };
        let r = evaluate_dir(p.path(), p.path(), EvalMode::Paired, &opts).unwrap();
        assert_eq!(r.averages.miou, Some(1.0));
    }

    #[test]
    fn empty_is_an_error() {
        let p = tempfile::tempdir().unwrap();
        assert!(matches!(
            evaluate_dir(p.path(), p.path(), EvalMode::Paired, &EvalOptions::default()),
            Err(Error::EmptyDataset(_))
        ));
    }
}
