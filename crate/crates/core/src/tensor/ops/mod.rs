//! Differentiable operators on [`Tensor`](super::Tensor).

mod conv;
mod elementwise;
mod norm;
mod scan;
mod shape;

#[allow(unused_imports)]
pub(crate) use shape::permute_data;
