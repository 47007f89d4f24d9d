use ndarray::{Axis, Zip};

use crate::Tensor;

/// Forward difference along `axis`: `y[i] = x[i+1] - x[i]`, with the last
/// position set to zero (replicate padding).
pub fn forward_diff(x: &Tensor, axis: usize) -> Tensor {
    let n = x.shape()[axis];
    let mut y = Tensor::zeros(x.raw_dim());
    if n < 2 {
        return y;
    }
    let lo = x.slice_axis(Axis(axis), (0..n - 1).into());
    let hi = x.slice_axis(Axis(axis), (1..n).into());
    let mut head = y.slice_axis_mut(Axis(axis), (0..n - 1).into());
    Zip::from(&mut head)
        .and(&hi)
        .and(&lo)
        .for_each(|d, &b, &a| *d = b - a);
    y
}

/// Adjoint of [`forward_diff`].
pub fn forward_diff_adjoint(g: &Tensor, axis: usize) -> Tensor {
    let n = g.shape()[axis];
    let mut dx = Tensor::zeros(g.raw_dim());
    if n < 2 {
        return dx;
    }
    let gh = g.slice_axis(Axis(axis), (0..n - 1).into());
    {
        let mut up = dx.slice_axis_mut(Axis(axis), (1..n).into());
        up += &gh;
    }
    let mut down = dx.slice_axis_mut(Axis(axis), (0..n - 1).into());
    down -= &gh;
    dx
}
