//! Toy vision transformer exposing per-layer patch features.

mod checkpoint;
mod config;
mod model;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use config::{TapSet, VitConfig, MLP_RATIO};
pub use model::{argmax_rows, embed, encoder_layer, BlockVars, ForwardResult, GraphForward, VitModel};

#[cfg(test)]
mod tests;
