//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Every backward rule is written in terms of recorded tensor ops, so a
//! gradient obtained with `create_graph = true` is an ordinary graph node and
//! can be differentiated again. Convolutions close under differentiation
//! through the pair of adjoint kernels (input- and weight-gradient), which is
//! what makes gradient-derived saliency usable inside a training loss.

pub mod array;
mod backward;
mod tensor;

pub use array::{Array, ConvGeom};
pub use backward::{grad, grad_with_seed};
pub use tensor::{is_grad_enabled, no_grad, NoGradGuard, Tensor};

/// Central finite differences of a scalar function at `x`.
pub fn numeric_gradient(x: &Array, eps: f64, mut f: impl FnMut(&Array) -> f64) -> Array {
    let mut probe = x.clone();
    let mut out = Array::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let lo = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (hi - lo) / (2.0 * eps);
    }
    out
}
