//! Differentiable building blocks with hand-written backward passes.
//!
//! Every layer offers a pure `forward` (evaluation, safe to share across
//! threads) and a `forward_train`/`backward` pair that caches what the
//! backward pass needs and accumulates parameter gradients.

mod activation;
mod batchnorm;
pub mod checkpoint;
mod conv;
mod dense;
mod loss;
mod optim;
mod param;

pub use activation::{global_avg_pool, global_avg_pool_backward, GlobalAvgPool, Relu};
pub use batchnorm::{
    batch_norm_backward, batch_norm_eval, batch_norm_train, BatchNorm, BnCache, RunningStats, BN_EPSILON, BN_MOMENTUM,
};
pub use checkpoint::Checkpoint;
pub use conv::{conv2d, conv2d_backward, conv_output_size, Conv2d};
pub use dense::{dense, dense_backward, Dense};
pub use loss::{l2_loss, softmax, softmax_cross_entropy};
pub use optim::{sgd_step, SgdConfig};
pub use param::Parameter;

/// Draws from `N(0, std^2)`.
pub(crate) fn gaussian_init(shape: &[usize], std: f64, rng: &mut impl rand::Rng) -> crate::tensor::Tensor {
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0, std).expect("finite std");
    let mut t = crate::tensor::Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = normal.sample(rng);
    }
    t
}
