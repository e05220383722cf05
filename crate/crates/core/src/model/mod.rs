//! The per-level predictor: graph convolutions over the window, an LSTM over
//! the seven history days and dense fusion layers, with exact gradients.

pub mod layers;
pub mod network;
pub mod params;
pub mod train;

pub use layers::{gc_forward, lstm_step, Activation, LstmWeights};
pub use network::{backward, check_sample, evaluate_mse, forward, gradients, loss_mse, predict, ForwardCache};
pub use params::{ModelDims, ModelParams, TENSOR_NAMES};
pub use train::{train_level, HyperParams, TrainReport};

#[cfg(test)]
mod tests;
