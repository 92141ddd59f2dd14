//! Dense real-valued tensors with a reverse-mode gradient tape.
//!
//! Values are plain row-major `f64` buffers ([`Tensor`]). Differentiable
//! computations are recorded on a [`Tape`]: every operation appends a node,
//! and [`Tape::backward`] walks the nodes once in reverse creation order.
//! Only the primitives needed by the renderer and the 3D U-Net are provided;
//! broadcasting is limited to scalars and per-channel biases.

mod error;
mod kernels;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use kernels::{conv3d_forward, gemm, MatRef};
pub use tape::{CustomOp, Gradients, Tape, Var};
pub use tensor::Tensor;

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
