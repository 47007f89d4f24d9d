//! Image quality and segmentation metrics.
//!
//! LOE and CEIQ follow the structure of their original definitions but are
//! local definitions: CEIQ here is a fixed linear surrogate over the same
//! three features, so its magnitudes are not comparable with published ones.

mod report;

use ndarray::{s, Array2, Axis};
use rayon::prelude::*;

use crate::imagecore::{quantize, ColorSpace, ImageTensor};
use crate::{Error, Result};

pub use report::{averages_map, evaluate_dir, EvalMode, EvalOptions, ImageMetrics, MetricReport};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Longer side of the lightness maps compared by LOE.
pub const LOE_MAX_SIDE: usize = 100;
/// Surrogate CEIQ weights `(w0, w1, w2, w3)` for intercept, SSIM to the
/// equalized image, entropy and cross-entropy.
pub const CEIQ_WEIGHTS: [f64; 4] = [0.0, 1.0, 0.35, -0.5];

fn check_shapes(a: &ImageTensor, b: &ImageTensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` for unit dynamic range, capped at [`PSNR_CAP`].
pub fn psnr(o: &ImageTensor, gt: &ImageTensor) -> Result<f64> {
    check_shapes(o, gt, "psnr")?;
    let n = o.data().len() as f64;
    let mse = o
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Normalized 1-D Gaussian of length [`SSIM_WINDOW`].
pub fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of `x` with `k` along both axes.
fn filter_valid(x: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    let n = k.len();
    let rows = Array2::from_shape_fn((h, w + 1 - n), |(y, c)| {
        (0..n).map(|i| k[i] * x[[y, c + i]]).sum::<f64>()
    });
    Array2::from_shape_fn((h + 1 - n, w + 1 - n), |(r, c)| {
        (0..n).map(|i| k[i] * rows[[r + i, c]]).sum::<f64>()
    })
}

fn ssim_components(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64) -> f64 {
    ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
        / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
}

/// SSIM between two single-channel maps.
pub fn ssim_gray(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!("ssim: {:?} vs {:?}", a.dim(), b.dim())));
    }
    let (h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::ImageTooSmall { height: h, width: w });
    }
    let k = gaussian_window();
    let mx = filter_valid(a, &k);
    let my = filter_valid(b, &k);
    let exx = filter_valid(&(a * a), &k);
    let eyy = filter_valid(&(b * b), &k);
    let exy = filter_valid(&(a * b), &k);
    let mut acc = 0.0;
    for ((((&mx, &my), &xx), &yy), &xy) in mx.iter().zip(&my).zip(&exx).zip(&eyy).zip(&exy) {
        acc += ssim_components(mx, my, xx - mx * mx, yy - my * my, xy - mx * my);
    }
    Ok(acc / mx.len() as f64)
}

/// Single-scale SSIM on BT.601 luma.
pub fn ssim(o: &ImageTensor, gt: &ImageTensor) -> Result<f64> {
    check_shapes(o, gt, "ssim")?;
    ssim_gray(&o.luma(), &gt.luma())
}

/// SSIM from whole-image (unweighted) statistics.
pub fn ssim_global(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let n = a.len() as f64;
    let mx = a.sum() / n;
    let my = b.sum() / n;
    let vx = a.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
    let vy = b.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
    let cxy = a.iter().zip(b).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / n;
    ssim_components(mx, my, vx, vy, cxy)
}

/// Per-pixel maximum over channels.
pub fn lightness(img: &ImageTensor) -> Array2<f64> {
    img.data()
        .map_axis(Axis(0), |px| px.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// Nearest-neighbour downsampling so the longer side is at most `max_side`.
pub fn downsample_nearest(x: &Array2<f64>, max_side: usize) -> Array2<f64> {
    let (h, w) = x.dim();
    let longest = h.max(w);
    if longest <= max_side {
        return x.clone();
    }
    let nh = ((h * max_side) as f64 / longest as f64).round().max(1.0) as usize;
    let nw = ((w * max_side) as f64 / longest as f64).round().max(1.0) as usize;
    Array2::from_shape_fn((nh, nw), |(i, j)| {
        let y = (((i as f64 + 0.5) * h as f64 / nh as f64) as usize).min(h - 1);
        let x_ = (((j as f64 + 0.5) * w as f64 / nw as f64) as usize).min(w - 1);
        x[[y, x_]]
    })
}

/// Lightness order error between two lightness maps of equal shape.
pub fn loe_maps(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!("loe: {:?} vs {:?}", a.dim(), b.dim())));
    }
    let la: Vec<f64> = a.iter().copied().collect();
    let lb: Vec<f64> = b.iter().copied().collect();
    let m = la.len();
    let disagreements: u64 = (0..m)
        .into_par_iter()
        .map(|x| {
            let (ax, bx) = (la[x], lb[x]);
            la.iter()
                .zip(&lb)
                .filter(|(&ay, &by)| (ax >= ay) != (bx >= by))
                .count() as u64
        })
        .sum();
    Ok(disagreements as f64 / m as f64)
}

/// LOE of `o` relative to `low`, on max-RGB lightness downsampled to
/// [`LOE_MAX_SIDE`].
pub fn loe(low: &ImageTensor, o: &ImageTensor) -> Result<f64> {
    check_shapes(low, o, "loe")?;
    let a = downsample_nearest(&lightness(low), LOE_MAX_SIDE);
    let b = downsample_nearest(&lightness(o), LOE_MAX_SIDE);
    loe_maps(&a, &b)
}

/// Grayscale plane used by the histogram metrics.
fn gray(img: &ImageTensor) -> Array2<f64> {
    img.luma()
}

/// 256-bin histogram of a map in `[0, 1]`.
pub fn histogram256(x: &Array2<f64>) -> [u64; 256] {
    let mut h = [0u64; 256];
    for &v in x {
        h[quantize(v) as usize] += 1;
    }
    h
}

/// Equalization lookup table from a histogram. A single-level histogram
/// yields the identity.
pub fn equalization_lut(hist: &[u64; 256]) -> [f64; 256] {
    let total: u64 = hist.iter().sum();
    let mut cdf = [0u64; 256];
    let mut acc = 0;
    for (c, &n) in cdf.iter_mut().zip(hist) {
        acc += n;
        *c = acc;
    }
    let cdf_min = cdf.iter().copied().find(|&c| c > 0).unwrap_or(0);
    let mut lut = [0.0; 256];
    for (i, l) in lut.iter_mut().enumerate() {
        *l = if total == cdf_min {
            i as f64 / 255.0
        } else {
            let r = (cdf[i].saturating_sub(cdf_min)) as f64 / (total - cdf_min) as f64;
            (r * 255.0).round() / 255.0
        };
    }
    lut
}

/// Histogram equalization driven by the grayscale histogram; the same table
/// is applied to every channel.
pub fn histeq(img: &ImageTensor) -> ImageTensor {
    let lut = equalization_lut(&histogram256(&gray(img)));
    let data = img.data().mapv(|v| lut[quantize(v) as usize]);
    ImageTensor::new(data, img.color()).expect("lut values are finite and in range")
}

/// Shannon entropy in bits of a histogram.
pub fn entropy_bits(hist: &[u64; 256]) -> f64 {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return 0.0;
    }
    hist.iter()
        .filter(|&&n| n > 0)
        .map(|&n| {
            let p = n as f64 / total as f64;
            -p * p.log2()
        })
        .sum()
}

/// Cross-entropy `-sum p log2 q` divided by 8 bits, with `q` Laplace-smoothed
/// so empty bins stay finite.
pub fn normalized_cross_entropy(p: &[u64; 256], q: &[u64; 256]) -> f64 {
    let tp: u64 = p.iter().sum();
    let tq: u64 = q.iter().sum();
    if tp == 0 {
        return 0.0;
    }
    let ce: f64 = p
        .iter()
        .zip(q)
        .filter(|(&pn, _)| pn > 0)
        .map(|(&pn, &qn)| {
            let pp = pn as f64 / tp as f64;
            let qq = (qn as f64 + 1.0) / (tq as f64 + 256.0);
            -pp * qq.log2()
        })
        .sum();
    ce / 8.0
}

/// The three CEIQ features `(f1, f2, f3)`.
///
/// `f1` uses whole-image SSIM statistics so the score depends only on the
/// pixel values and their equalized counterparts, not on their arrangement.
pub fn ceiq_features(img: &ImageTensor) -> (f64, f64, f64) {
    let eq = histeq(img);
    let (a, b) = (gray(img), gray(&eq));
    let f1 = ssim_global(&a, &b);
    let (ha, hb) = (histogram256(&a), histogram256(&b));
    (f1, entropy_bits(&ha), normalized_cross_entropy(&ha, &hb))
}

/// Surrogate contrast-enhancement quality score.
pub fn ceiq(img: &ImageTensor) -> f64 {
    let (f1, f2, f3) = ceiq_features(img);
    let [w0, w1, w2, w3] = CEIQ_WEIGHTS;
    w0 + w1 * f1 + w2 * f2 + w3 * f3
}

/// Per-class IoU (`None` for classes absent from both maps) and their mean.
pub fn miou(pred: &Array2<u32>, gt: &Array2<u32>, num_classes: usize) -> Result<(Vec<Option<f64>>, f64)> {
    if pred.dim() != gt.dim() {
        return Err(Error::ShapeMismatch(format!("miou: {:?} vs {:?}", pred.dim(), gt.dim())));
    }
    let mut inter = vec![0u64; num_classes];
    let mut union = vec![0u64; num_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        for l in [p, g] {
            if l as usize >= num_classes {
                return Err(Error::LabelOutOfRange { label: l, num_classes });
            }
        }
        if p == g {
            inter[p as usize] += 1;
            union[p as usize] += 1;
        } else {
            union[p as usize] += 1;
            union[g as usize] += 1;
        }
    }
    let per: Vec<Option<f64>> = inter
        .iter()
        .zip(&union)
        .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
        .collect();
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok((per, mean))
}

/// Grayscale image from a map, for metric fixtures.
pub fn gray_image(x: Array2<f64>) -> Result<ImageTensor> {
    ImageTensor::new(x.insert_axis(Axis(0)), ColorSpace::Gray)
}

/// Crops `labels` to the top-left `h x w` region.
pub(crate) fn crop_labels(labels: &Array2<u32>, h: usize, w: usize) -> Array2<u32> {
    labels.slice(s![..h, ..w]).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rgb(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> ImageTensor {
        ImageTensor::from_fn(3, h, w, |(c, y, x)| f(c, y, x)).unwrap()
    }

    #[test]
    fn psnr_closed_forms() {
        let a = rgb(4, 4, |_, _, _| 0.3);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        let b = a.map(|v| v + 0.1).unwrap();
        assert!((psnr(&b, &a).unwrap() - 20.0).abs() < 1e-9);
        let c = a.map(|v| v + 0.5).unwrap();
        assert!((psnr(&c, &a).unwrap() - 10.0 * 4f64.log10()).abs() < 1e-9);
    }

    /// Direct weighted statistics over every 11x11 window with a 2-D kernel.
    fn ssim_oracle(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let r = 5.0;
        let mut k2 = Array2::from_shape_fn((11, 11), |(i, j)| {
            (-(((i as f64 - r).powi(2) + (j as f64 - r).powi(2)) / (2.0 * 1.5 * 1.5))).exp()
        });
        let s = k2.sum();
        k2.mapv_inplace(|v| v / s);
        let (h, w) = a.dim();
        let mut acc = 0.0;
        let mut n = 0.0;
        for y in 0..=h - 11 {
            for x in 0..=w - 11 {
                let pa = a.slice(s![y..y + 11, x..x + 11]);
                let pb = b.slice(s![y..y + 11, x..x + 11]);
                let mx = (&pa * &k2).sum();
                let my = (&pb * &k2).sum();
                let vx = (&k2 * &pa.mapv(|v| (v - mx).powi(2))).sum();
                let vy = (&k2 * &pb.mapv(|v| (v - my).powi(2))).sum();
                let cxy = (&k2 * &(&pa.mapv(|v| v - mx) * &pb.mapv(|v| v - my))).sum();
                acc += ((2.0 * mx * my + 1e-4) * (2.0 * cxy + 9e-4))
                    / ((mx * mx + my * my + 1e-4) * (vx + vy + 9e-4));
                n += 1.0;
            }
        }
        acc / n
    }

    #[test]
    fn ssim_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (h, w) in [(11, 11), (12, 14), (16, 11), (13, 13), (15, 12)] {
            let a = Array2::from_shape_fn((h, w), |_| rng.random::<f64>());
            let b = a.mapv(|v| (v * 0.7 + 0.1 * rng.random::<f64>()).min(1.0));
            let got = ssim_gray(&a, &b).unwrap();
            assert!((got - ssim_oracle(&a, &b)).abs() < 1e-10);
        }
    }

    #[test]
    fn ssim_identity_and_errors() {
        let a = rgb(12, 12, |c, y, x| ((c + y * x) % 7) as f64 / 7.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let k = rgb(11, 11, |_, _, _| 0.5);
        assert!((ssim(&k, &k).unwrap() - 1.0).abs() < 1e-15);
        let small = rgb(10, 20, |_, _, _| 0.5);
        assert!(matches!(
            ssim(&small, &small),
            Err(Error::ImageTooSmall { height: 10, width: 20 })
        ));
    }

    fn loe_brute(a: &[f64], b: &[f64]) -> f64 {
        let mut n = 0;
        for x in 0..a.len() {
            for y in 0..a.len() {
                if (a[x] >= a[y]) ^ (b[x] >= b[y]) {
                    n += 1;
                }
            }
        }
        n as f64 / a.len() as f64
    }

    #[test]
    fn loe_reversed_order_fixture() {
        let low = gray_image(arr2(&[[0.1, 0.2], [0.3, 0.4]])).unwrap();
        let out = gray_image(arr2(&[[0.4, 0.3], [0.2, 0.1]])).unwrap();
        assert_eq!(loe(&low, &out).unwrap(), 3.0);
        assert_eq!(loe(&low, &low).unwrap(), 0.0);
        let half = low.map(|v| v * 0.5).unwrap();
        assert_eq!(loe(&low, &half).unwrap(), 0.0);
    }

    #[test]
    fn loe_uses_max_rgb_and_caps_size() {
        let a = rgb(2, 2, |c, y, x| if c == 2 { (y * 2 + x) as f64 / 4.0 } else { 0.0 });
        assert_eq!(lightness(&a), arr2(&[[0.0, 0.25], [0.5, 0.75]]));
        let big = Array2::from_shape_fn((150, 300), |(y, x)| (y * 300 + x) as f64);
        let d = downsample_nearest(&big, 100);
        assert_eq!(d.dim(), (50, 100));
        assert_eq!(d[[0, 0]], big[[1, 1]]);
    }

    #[test]
    fn miou_fixtures() {
        let pred = arr2(&[[0u32, 0], [1, 1]]);
        let gt = arr2(&[[0u32, 1], [1, 1]]);
        let (per, mean) = miou(&pred, &gt, 3).unwrap();
        assert_eq!(per, vec![Some(0.5), Some(2.0 / 3.0), None]);
        assert_eq!(mean, (0.5 + 2.0 / 3.0) / 2.0);
        assert_eq!(miou(&pred, &pred, 2).unwrap().1, 1.0);
        let zeros = Array2::<u32>::zeros((2, 2));
        let ones = Array2::<u32>::ones((2, 2));
        assert_eq!(miou(&zeros, &ones, 2).unwrap().1, 0.0);
        assert!(matches!(
            miou(&pred, &arr2(&[[0u32, 5], [1, 1]]), 3),
            Err(Error::LabelOutOfRange { label: 5, .. })
        ));
    }

    fn all_levels() -> ImageTensor {
        gray_image(Array2::from_shape_fn((16, 16), |(y, x)| (y * 16 + x) as f64 / 255.0)).unwrap()
    }

    #[test]
    fn histeq_fixed_points() {
        let u = all_levels();
        let eq = histeq(&u);
        for (a, b) in eq.data().iter().zip(u.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-12);
        }
        let k = ImageTensor::constant(3, 5, 5, 0.4).unwrap();
        let ek = histeq(&k);
        let v0 = ek.data()[[0, 0, 0]];
        assert!(ek.data().iter().all(|&v| v == v0));
    }

    /// L1 distance of the 16-bin coarsened histogram from uniform. Discrete
    /// equalization spreads levels apart rather than splitting them, so the
    /// comparison is made at a resolution where that spreading shows.
    fn l1_to_uniform(h: &[u64; 256]) -> f64 {
        let n: u64 = h.iter().sum();
        let u = n as f64 / 16.0;
        h.chunks(16).map(|c| (c.iter().sum::<u64>() as f64 - u).abs()).sum()
    }

    #[test]
    fn histeq_flattens_histograms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let x = Array2::from_shape_fn((32, 32), |_| rng.random::<f64>().powi(3));
            let img = gray_image(x).unwrap();
            let before = l1_to_uniform(&histogram256(&gray(&img)));
            let after = l1_to_uniform(&histogram256(&gray(&histeq(&img))));
            assert!(after < before);
        }
    }

    #[test]
    fn ceiq_entropy_endpoints_and_ordering() {
        let k = ImageTensor::constant(1, 12, 12, 0.3).unwrap();
        let (f1, f2, f3) = ceiq_features(&k);
        assert_eq!(f2, 0.0);
        assert_eq!(ceiq(&k), f1 - 0.5 * f3);
        let two = gray_image(Array2::from_shape_fn((4, 4), |(y, _)| (y % 2) as f64)).unwrap();
        assert_eq!(ceiq_features(&two).1, 1.0);
        let u = all_levels();
        let coarse = u.map(|v| ((v * 255.0 / 16.0).floor() * 16.0) / 255.0).unwrap();
        assert!(ceiq(&u) >= ceiq(&coarse));
    }

    proptest! {
        #[test]
        fn loe_matches_brute_force(v in proptest::collection::vec(0.0f64..1.0, 12), w in proptest::collection::vec(0.0f64..1.0, 12)) {
            let a = Array2::from_shape_vec((3, 4), v.clone()).unwrap();
            let b = Array2::from_shape_vec((3, 4), w.clone()).unwrap();
            prop_assert_eq!(loe_maps(&a, &b).unwrap(), loe_brute(&v, &w));
        }

        #[test]
        fn loe_invariant_under_increasing_remap(v in proptest::collection::vec(0.0f64..1.0, 12), w in proptest::collection::vec(0.0f64..1.0, 12)) {
            let a = Array2::from_shape_vec((3, 4), v).unwrap();
            let b = Array2::from_shape_vec((3, 4), w).unwrap();
            let remapped = b.mapv(|x| x.powi(3) * 2.0 + 0.1);
            prop_assert_eq!(loe_maps(&a, &b).unwrap(), loe_maps(&a, &remapped).unwrap());
        }

        #[test]
        fn miou_is_symmetric(p in proptest::collection::vec(0u32..4, 9), q in proptest::collection::vec(0u32..4, 9)) {
            let a = Array2::from_shape_vec((3, 3), p).unwrap();
            let b = Array2::from_shape_vec((3, 3), q).unwrap();
            prop_assert_eq!(miou(&a, &b, 4).unwrap(), miou(&b, &a, 4).unwrap());
        }

        #[test]
        fn psnr_decreases_with_error(e1 in 0.001f64..0.4, d in 0.001f64..0.4) {
            let a = ImageTensor::constant(3, 4, 4, 0.1).unwrap();
            let b = a.map(|v| v + e1).unwrap();
            let c = a.map(|v| v + e1 + d).unwrap();
            prop_assert!(psnr(&c, &a).unwrap() < psnr(&b, &a).unwrap());
        }

        #[test]
        fn ceiq_is_pixel_permutation_invariant(v in proptest::collection::vec(0.0f64..1.0, 16), k in 1usize..15) {
            // Cyclic shifts preserve the histogram.
            let a = Array3::from_shape_vec((1, 4, 4), v.clone()).unwrap();
            let mut w = v.clone();
            w.rotate_left(k);
            let b = Array3::from_shape_vec((1, 4, 4), w).unwrap();
            let ia = ImageTensor::new(a, ColorSpace::Gray).unwrap();
            let ib = ImageTensor::new(b, ColorSpace::Gray).unwrap();
            prop_assert!((ceiq(&ia) - ceiq(&ib)).abs() < 1e-12);
        }
    }
}
