//! Minimal CPU neural-network engine with explicit forward/backward passes.
//!
//! Activations are NHWC `f32` tensors. Every layer returns a context object
//! from `forward` that its `backward` consumes; parameter gradients are
//! accumulated into the layer's [`Param`]s. Everything runs single-threaded so
//! results are bit-reproducible for a given seed.

mod act;
mod conv;
mod gemm;
mod linear;
mod loss;
mod norm;
mod optim;
mod tensor;

pub use act::{leaky_relu, leaky_relu_backward, relu, relu_backward};
pub use conv::{Conv2d, ConvCtx, ConvTranspose2d, Geom};
pub use gemm::gemm;
pub use linear::{global_avg_pool, global_avg_pool_backward, Linear};
pub use loss::{cross_entropy, distillation, softmax_rows};
pub use norm::{BatchNorm2d, BnCtx, Gdn, GdnCtx};
pub use optim::{Adam, Sgd};
pub use tensor::{Param, Tensor};

use rand::Rng;

/// Anything that owns parameters.
pub trait Module {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

/// Uniform initialisation in `[-bound, bound]`.
pub(crate) fn uniform_init<R: Rng>(rng: &mut R, len: usize, bound: f32) -> Vec<f32> {
    (0..len).map(|_| rng.gen_range(-bound..=bound)).collect()
}
