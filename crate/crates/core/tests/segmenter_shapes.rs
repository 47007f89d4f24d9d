use ndarray::{Axis, IxDyn};
use sllen_core::ssn::{Ssn, SsnConfig};
use sllen_tensor::Tensor;

fn probe(side: usize) -> Tensor {
    Tensor::from_shape_fn(IxDyn(&[1, 3, side, side]), |i| {
        ((i[1] * 17 + i[2] * 5 + i[3] * 3) as f64 * 0.11).sin() * 0.5 + 0.5
    })
}

#[test]
fn default_embedding_at_512() {
    let ssn = Ssn::build(SsnConfig::default()).unwrap();
    let out = ssn.forward(&probe(512)).unwrap();
    assert_eq!(out.b.shape(), &[1, 512, 64, 64]);
    assert_eq!(out.s.shape(), &[1, 21, 512, 512]);
    let sums = out.s.sum_axis(Axis(1));
    assert!(sums.iter().all(|v| (v - 1.0).abs() < 1e-5));
}

#[test]
fn default_embedding_at_256() {
    let ssn = Ssn::build(SsnConfig::default()).unwrap();
    let out = ssn.forward(&probe(256)).unwrap();
    assert_eq!(out.b.shape(), &[1, 512, 32, 32]);
}

#[test]
fn odd_grid_rejected() {
    let ssn = Ssn::build(SsnConfig::default()).unwrap();
    assert!(ssn.forward(&probe(20)).is_err());
}
