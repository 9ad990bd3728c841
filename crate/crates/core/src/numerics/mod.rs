//! Dense tensors, tape-based reverse-mode differentiation, layers and optimizers.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_params};
pub use graph::{Activation, Graph, Var};
pub use layers::Ctx;
pub use optim::{Method, OptimizerConfig, OptimizerState};
pub use params::{ParamId, ParamStore, Parameter, Role};
pub use tensor::{Real, Tensor};

/// `u·v / (‖u‖‖v‖ + 1e-8)` outside of any graph.
pub fn cosine_similarity<T: Real>(u: &[T], v: &[T]) -> T {
    let dot: T = u.iter().zip(v).map(|(&a, &b)| a * b).sum();
    let nu = u.iter().map(|&a| a * a).sum::<T>().sqrt();
    let nv = v.iter().map(|&a| a * a).sum::<T>().sqrt();
    if nu == T::zero() && nv == T::zero() {
        log::warn!("cosine similarity of two all-zero vectors; returning 0");
    }
    dot / (nu * nv + T::lit(graph::COSINE_EPS))
}
