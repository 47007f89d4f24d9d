//! 2-D convolution via im2col and GEMM.
//!
//! Output rows are processed in chunks so the column buffer stays bounded
//! for large inputs (a 512x512 forward would otherwise need gigabytes).

use ndarray::linalg::general_mat_mul;
use ndarray::{s, ArrayView2, ArrayViewMut2, IxDyn};

use crate::{Result, Tensor, TensorError};

/// Upper bound on the number of elements in one column buffer.
const COL_BUDGET: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 {
            return Err(TensorError::Rank {
                op: "conv2d",
                expected: 4,
                got: x.to_vec(),
            });
        }
        if w.len() != 4 || w[1] != x[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: x.to_vec(),
                rhs: w.to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                msg: "stride must be positive".into(),
            });
        }
        let (h, wd) = (x[2] + 2 * pad, x[3] + 2 * pad);
        if h < w[2] || wd < w[3] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: x.to_vec(),
                rhs: w.to_vec(),
            });
        }
        Ok(Self {
            batch: x[0],
            in_ch: x[1],
            height: x[2],
            width: x[3],
            out_ch: w[0],
            kh: w[2],
            kw: w[3],
            stride,
            pad,
            out_h: (h - w[2]) / stride + 1,
            out_w: (wd - w[3]) / stride + 1,
        })
    }

    fn k(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows_per_chunk(&self) -> usize {
        (COL_BUDGET / (self.k() * self.out_w).max(1)).clamp(1, self.out_h)
    }

    fn in_plane(&self) -> usize {
        self.in_ch * self.height * self.width
    }

    fn out_plane(&self) -> usize {
        self.out_ch * self.out_h * self.out_w
    }
}

/// Output columns `lo..hi` whose stride-1 tap `kj` lands inside the row.
fn valid_span(geo: &ConvGeometry, kj: usize) -> (usize, usize) {
    let lo = geo.pad.saturating_sub(kj).min(geo.out_w);
    let hi = (geo.width + geo.pad).saturating_sub(kj).min(geo.out_w).max(lo);
    (lo, hi)
}

fn im2col(geo: &ConvGeometry, x: &[f64], oh0: usize, oh1: usize, cols: &mut [f64]) {
    let len = (oh1 - oh0) * geo.out_w;
    let (h, w) = (geo.height as isize, geo.width as isize);
    for c in 0..geo.in_ch {
        let plane = &x[c * geo.height * geo.width..(c + 1) * geo.height * geo.width];
        for ki in 0..geo.kh {
            for kj in 0..geo.kw {
                let row = (c * geo.kh + ki) * geo.kw + kj;
                let dst = &mut cols[row * len..(row + 1) * len];
                for oh in oh0..oh1 {
                    let drow = &mut dst[(oh - oh0) * geo.out_w..(oh - oh0 + 1) * geo.out_w];
                    let ih = (oh * geo.stride + ki) as isize - geo.pad as isize;
                    if ih < 0 || ih >= h {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * geo.width..(ih as usize + 1) * geo.width];
                    if geo.stride == 1 {
                        let (lo, hi) = valid_span(geo, kj);
                        drow[..lo].fill(0.0);
                        drow[hi..].fill(0.0);
                        if lo < hi {
                            let off = lo + kj - geo.pad;
                            drow[lo..hi].copy_from_slice(&src[off..off + hi - lo]);
                        }
                        continue;
                    }
                    for (ow, d) in drow.iter_mut().enumerate() {
                        let iw = (ow * geo.stride + kj) as isize - geo.pad as isize;
                        *d = if iw >= 0 && iw < w { src[iw as usize] } else { 0.0 };
                    }
                }
            }
        }
    }
}

fn col2im(geo: &ConvGeometry, cols: &[f64], oh0: usize, oh1: usize, dx: &mut [f64]) {
    let len = (oh1 - oh0) * geo.out_w;
    let (h, w) = (geo.height as isize, geo.width as isize);
    for c in 0..geo.in_ch {
        let plane = &mut dx[c * geo.height * geo.width..(c + 1) * geo.height * geo.width];
        for ki in 0..geo.kh {
            for kj in 0..geo.kw {
                let row = (c * geo.kh + ki) * geo.kw + kj;
                let src = &cols[row * len..(row + 1) * len];
                for oh in oh0..oh1 {
                    let ih = (oh * geo.stride + ki) as isize - geo.pad as isize;
                    if ih < 0 || ih >= h {
                        continue;
                    }
                    let srow = &src[(oh - oh0) * geo.out_w..(oh - oh0 + 1) * geo.out_w];
                    let drow = &mut plane[ih as usize * geo.width..(ih as usize + 1) * geo.width];
                    if geo.stride == 1 {
                        let (lo, hi) = valid_span(geo, kj);
                        if lo < hi {
                            let off = lo + kj - geo.pad;
                            for (d, &v) in drow[off..off + hi - lo].iter_mut().zip(&srow[lo..hi]) {
                                *d += v;
                            }
                        }
                        continue;
                    }
                    for (ow, &v) in srow.iter().enumerate() {
                        let iw = (ow * geo.stride + kj) as isize - geo.pad as isize;
                        if iw >= 0 && iw < w {
                            drow[iw as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn contiguous(t: &Tensor) -> std::borrow::Cow<'_, [f64]> {
    match t.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(t.iter().copied().collect()),
    }
}

/// Cross-correlation of `x` (N,Ci,H,W) with `w` (Co,Ci,kh,kw), zero padding.
pub fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let geo = ConvGeometry::new(x.shape(), w.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.len() != geo.out_ch {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                lhs: w.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
    }
    let xs = contiguous(x);
    let ws = contiguous(w);
    let wmat = ArrayView2::from_shape((geo.out_ch, geo.k()), &ws).expect("weight layout");
    let mut out = vec![0.0; geo.batch * geo.out_plane()];
    let chunk = geo.rows_per_chunk();
    let mut cols = Vec::new();
    for n in 0..geo.batch {
        let xn = &xs[n * geo.in_plane()..(n + 1) * geo.in_plane()];
        let on = &mut out[n * geo.out_plane()..(n + 1) * geo.out_plane()];
        let mut omat =
            ArrayViewMut2::from_shape((geo.out_ch, geo.out_h * geo.out_w), on).expect("out layout");
        if geo.is_pointwise() {
            let xmat = ArrayView2::from_shape((geo.k(), geo.height * geo.width), xn).unwrap();
            general_mat_mul(1.0, &wmat, &xmat, 0.0, &mut omat);
        } else {
            let mut oh0 = 0;
            while oh0 < geo.out_h {
                let oh1 = (oh0 + chunk).min(geo.out_h);
                let len = (oh1 - oh0) * geo.out_w;
                cols.resize(geo.k() * len, 0.0);
                im2col(&geo, xn, oh0, oh1, &mut cols);
                let cmat = ArrayView2::from_shape((geo.k(), len), &cols[..]).unwrap();
                let mut oslice = omat.slice_mut(s![.., oh0 * geo.out_w..oh1 * geo.out_w]);
                general_mat_mul(1.0, &wmat, &cmat, 0.0, &mut oslice);
                oh0 = oh1;
            }
        }
        if let Some(b) = bias {
            for (co, &bv) in b.iter().enumerate() {
                omat.row_mut(co).mapv_inplace(|v| v + bv);
            }
        }
    }
    Ok(Tensor::from_shape_vec(
        IxDyn(&[geo.batch, geo.out_ch, geo.out_h, geo.out_w]),
        out,
    )
    .expect("conv output shape"))
}

/// Gradients of [`conv2d_forward`] with respect to input, weight and bias.
pub struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dw: Option<Tensor>,
    pub db: Option<Tensor>,
}

pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    stride: usize,
    pad: usize,
    want: (bool, bool, bool),
) -> Result<ConvGrads> {
    let geo = ConvGeometry::new(x.shape(), w.shape(), stride, pad)?;
    let (want_dx, want_dw, want_db) = want;
    let xs = contiguous(x);
    let ws = contiguous(w);
    let gs = contiguous(gout);
    let wmat = ArrayView2::from_shape((geo.out_ch, geo.k()), &ws).unwrap();
    let wt = wmat.t();
    let mut dx = if want_dx {
        Some(vec![0.0; geo.batch * geo.in_plane()])
    } else {
        None
    };
    let mut dw = if want_dw {
        Some(ndarray::Array2::<f64>::zeros((geo.out_ch, geo.k())))
    } else {
        None
    };
    let mut db = if want_db {
        Some(vec![0.0; geo.out_ch])
    } else {
        None
    };
    let chunk = geo.rows_per_chunk();
    let mut cols = Vec::new();
    let mut dcols = Vec::new();
    for n in 0..geo.batch {
        let xn = &xs[n * geo.in_plane()..(n + 1) * geo.in_plane()];
        let gn = &gs[n * geo.out_plane()..(n + 1) * geo.out_plane()];
        let gmat = ArrayView2::from_shape((geo.out_ch, geo.out_h * geo.out_w), gn).unwrap();
        if let Some(db) = db.as_mut() {
            for (co, row) in gmat.rows().into_iter().enumerate() {
                db[co] += row.sum();
            }
        }
        if geo.is_pointwise() {
            if let Some(dw) = dw.as_mut() {
                let xmat = ArrayView2::from_shape((geo.k(), geo.height * geo.width), xn).unwrap();
                general_mat_mul(1.0, &gmat, &xmat.t(), 1.0, dw);
            }
            if let Some(dx) = dx.as_mut() {
                let dxn = &mut dx[n * geo.in_plane()..(n + 1) * geo.in_plane()];
                let mut dmat =
                    ArrayViewMut2::from_shape((geo.k(), geo.height * geo.width), dxn).unwrap();
                general_mat_mul(1.0, &wt, &gmat, 0.0, &mut dmat);
            }
            continue;
        }
        let mut oh0 = 0;
        while oh0 < geo.out_h {
            let oh1 = (oh0 + chunk).min(geo.out_h);
            let len = (oh1 - oh0) * geo.out_w;
            let gchunk = gmat.slice(s![.., oh0 * geo.out_w..oh1 * geo.out_w]);
            if let Some(dw) = dw.as_mut() {
                cols.resize(geo.k() * len, 0.0);
                im2col(&geo, xn, oh0, oh1, &mut cols);
                let cmat = ArrayView2::from_shape((geo.k(), len), &cols[..]).unwrap();
                general_mat_mul(1.0, &gchunk, &cmat.t(), 1.0, dw);
            }
            if let Some(dx) = dx.as_mut() {
                dcols.resize(geo.k() * len, 0.0);
                {
                    let mut dmat = ArrayViewMut2::from_shape((geo.k(), len), &mut dcols[..]).unwrap();
                    general_mat_mul(1.0, &wt, &gchunk, 0.0, &mut dmat);
                }
                let dxn = &mut dx[n * geo.in_plane()..(n + 1) * geo.in_plane()];
                col2im(&geo, &dcols, oh0, oh1, dxn);
            }
            oh0 = oh1;
        }
    }
    Ok(ConvGrads {
        dx: dx.map(|v| Tensor::from_shape_vec(IxDyn(x.shape()), v).unwrap()),
        dw: dw.map(|m| m.into_shape_with_order(IxDyn(w.shape())).unwrap()),
        db: db.map(|v| Tensor::from_shape_vec(IxDyn(&[geo.out_ch]), v).unwrap()),
    })
}
