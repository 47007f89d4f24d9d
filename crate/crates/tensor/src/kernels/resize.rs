use ndarray::IxDyn;

use crate::{Result, Tensor, TensorError};

/// Interpolation taps along one axis: (low index, high index, high weight).
fn taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn check(x: &[usize], out_h: usize, out_w: usize) -> Result<()> {
    if x.len() != 4 {
        return Err(TensorError::Rank {
            op: "resize_bilinear",
            expected: 4,
            got: x.to_vec(),
        });
    }
    if out_h == 0 || out_w == 0 || x[2] == 0 || x[3] == 0 {
        return Err(TensorError::InvalidArgument {
            op: "resize_bilinear",
            msg: format!("cannot resize {x:?} to {out_h}x{out_w}"),
        });
    }
    Ok(())
}

/// Bilinear resize of the last two axes with half-pixel centres
/// (`align_corners = false`). Resizing to the same size is the identity.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    check(x.shape(), out_h, out_w)?;
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().unwrap();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in 0..n * c {
        let p = &xs[plane * h * w..(plane + 1) * h * w];
        for &(y0, y1, ly) in &ty {
            for &(x0, x1, lx) in &tx {
                let top = p[y0 * w + x0] * (1.0 - lx) + p[y0 * w + x1] * lx;
                let bot = p[y1 * w + x0] * (1.0 - lx) + p[y1 * w + x1] * lx;
                out.push(top * (1.0 - ly) + bot * ly);
            }
        }
    }
    Ok(Tensor::from_shape_vec(IxDyn(&[n, c, out_h, out_w]), out).unwrap())
}

/// Adjoint of [`resize_bilinear`].
pub fn resize_bilinear_backward(input_shape: &[usize], gout: &Tensor) -> Tensor {
    let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (out_h, out_w) = (gout.shape()[2], gout.shape()[3]);
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let gs = gout.as_standard_layout();
    let gs = gs.as_slice().unwrap();
    let mut dx = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let g = &gs[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        let d = &mut dx[plane * h * w..(plane + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let v = g[oy * out_w + ox];
                d[y0 * w + x0] += v * (1.0 - ly) * (1.0 - lx);
                d[y0 * w + x1] += v * (1.0 - ly) * lx;
                d[y1 * w + x0] += v * ly * (1.0 - lx);
                d[y1 * w + x1] += v * ly * lx;
            }
        }
    }
    Tensor::from_shape_vec(IxDyn(input_shape), dx).unwrap()
}
