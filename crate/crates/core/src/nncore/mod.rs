//! Dense tensors and parameter sets with seeded randomness, plus the
//! differentiable ops needed to train residual multilayer networks.
//!
//! Everything is generic over [`Scalar`] so the same kernels run in `f32` for
//! training and in `f64` for finite-difference checks.

mod gradcheck;
mod ops;
mod params;
mod rng;
mod tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

pub use gradcheck::{grad_check, GradCheckReport};
pub use ops::{argmax_rows, dense_backward, dense_forward, relu, relu_backward, softmax_xent};
pub(crate) use ops::{axpy, dot, relu_in_place};
pub use params::{sgd_step, ParamEntry, ParamId, ParamSet};
pub use rng::RngState;
pub use tensor::Tensor;

pub trait Scalar: Float + Default + Debug + Display + Send + Sync + Sum + 'static {}

impl Scalar for f32 {}
impl Scalar for f64 {}
