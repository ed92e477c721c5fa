//! The forward and backward Student MLPs: forward pass, analytic gradients,
//! Adam, and the joint training loop.

mod adam;
mod loss;
mod mlp;
mod model_io;
mod real;
mod train;

pub use adam::adam_step;
pub use loss::{per_patch_loss, LossDistance, LossReduction, LossStats};
pub use mlp::{gelu, gelu_grad, AdamState, ForwardCache, Params, StudentNet, BLOCK_NAMES};
pub use model_io::{decode_model, encode_model, load_model, save_model, MODEL_FORMAT_VERSION, MODEL_MAGIC};
pub use real::Real;
pub use train::{load_pair, train, train_with, EpochLog, TrainConfig, TrainedModel, TrainingLog};
