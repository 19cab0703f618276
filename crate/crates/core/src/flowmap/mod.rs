//! Residual MLP flow maps `x -> x + net(x)` trained at a fixed step size.

mod io;
mod model;
mod train;

pub use io::{load_model, save_model, MODEL_FORMAT_VERSION};
pub use model::{compose_forward, forward, FlowMapModel, Params};
pub use train::{
    adam_update, loss_and_grad, one_step_mse, train, AdamState, BatchPolicy, InitScheme,
    TrainConfig, TrainHistory,
};
