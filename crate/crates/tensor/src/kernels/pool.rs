use ndarray::IxDyn;

use crate::{Result, Tensor, TensorError};

/// 2x2 max pooling with stride 2 over the last two axes of a rank-4 tensor.
///
/// Odd trailing rows/columns are dropped. Returns the pooled tensor and, for
/// every output element, the flat index of the selected input element (the
/// first maximum in row-major window order wins ties).
pub fn max_pool2(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(TensorError::Rank {
            op: "max_pool2",
            expected: 4,
            got: shape.to_vec(),
        });
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(TensorError::InvalidArgument {
            op: "max_pool2",
            msg: format!("spatial size {h}x{w} too small"),
        });
    }
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().unwrap();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = base + (2 * i + di) * w + 2 * j + dj;
                    if xs[cand] > xs[best] {
                        best = cand;
                    }
                }
                out.push(xs[best]);
                idx.push(best);
            }
        }
    }
    Ok((
        Tensor::from_shape_vec(IxDyn(&[n, c, oh, ow]), out).unwrap(),
        idx,
    ))
}

pub fn max_pool2_backward(input_shape: &[usize], argmax: &[usize], gout: &Tensor) -> Tensor {
    let mut dx = vec![0.0; input_shape.iter().product()];
    for (&i, &g) in argmax.iter().zip(gout.iter()) {
        dx[i] += g;
    }
    Tensor::from_shape_vec(IxDyn(input_shape), dx).unwrap()
}
