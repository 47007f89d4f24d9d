//! A small reverse-mode automatic differentiation engine over `f64` tensors.
//!
//! Everything runs on the CPU in double precision and single-threaded, so a
//! given sequence of operations always yields bitwise-identical values and
//! gradients. Tensors are plain [`ndarray::ArrayD<f64>`] values in
//! channel-first (`N, C, H, W`) layout.
//!
//! ```
//! use ndarray::ArrayD;
//! use sllen_tensor::Graph;
//!
//! let mut g = Graph::new();
//! let x = g.variable(ArrayD::from_elem(vec![2, 2], 3.0));
//! let y = g.square(x);
//! let loss = g.sum(y);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap()[[0, 0]], 6.0);
//! ```

pub mod check;
mod error;
mod graph;
pub mod kernels;
mod optim;
mod params;

pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig, AdamState};
pub use params::{Binding, Param, ParamId, ParamSet};

/// Dynamic-rank tensor used throughout the engine.
pub type Tensor = ndarray::ArrayD<f64>;
