//! Minimal differentiable building blocks with hand-written backward passes.
//!
//! Every learned stage of the detector is a composition of [`DenseLayer`]s,
//! shared per-point [`Mlp`]s and [`set_maxpool`]. Each forward function has a
//! `*_train` twin that returns a cache consumed by the matching `backward`.

mod checkpoint;
mod gradcheck;
pub(crate) mod layer;
mod loss;
mod optim;
mod pool;
mod tensor;

pub use checkpoint::{load_into, read_checkpoint, write_checkpoint, LayerRecord, CHECKPOINT_MAGIC};
pub use gradcheck::{grad_check, relative_error, FD_STEP, REL_ERROR_FLOOR};
pub use layer::{
    accumulate, zero_grads, zeroed_like, Activation, DenseCache, DenseLayer, Layered, Mlp,
    MlpCache,
};
pub use loss::{cross_entropy, smooth_l1, softmax};
pub use optim::{Adam, StepSchedule};
pub use pool::{set_maxpool, set_maxpool_backward, MaxPoolCache};
pub use tensor::Tensor2;
