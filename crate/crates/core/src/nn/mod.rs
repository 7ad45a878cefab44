//! Minimal convolutional network engine: layers, backpropagation, Adam and
//! a binary weight format.

mod gemm;
pub mod io;
mod layer;
mod network;
mod tensor;
mod train;

use thiserror::Error;

pub use layer::{Layer, LayerSpec, Scratch, Shape};
pub use network::{Gradients, LossKind, Network, Trace};
pub use tensor::Tensor;
pub use train::{train, train_with, Adam, AdamConfig, TrainConfig, TrainReport};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("network configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("training diverged in epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("weight file: {0}")]
    Format(String),
    #[error("{0}")]
    Io(String),
}

fn conv_block(filters: usize) -> [LayerSpec; 5] {
    [
        LayerSpec::Conv2d { filters, kernel: 3 },
        LayerSpec::Relu,
        LayerSpec::Conv2d { filters, kernel: 3 },
        LayerSpec::Relu,
        LayerSpec::MaxPool { size: 2 },
    ]
}

fn dense_head(outputs: usize, head: LayerSpec) -> [LayerSpec; 7] {
    [
        LayerSpec::Flatten,
        LayerSpec::Dense { neurons: 100 },
        LayerSpec::Relu,
        LayerSpec::Dense { neurons: 100 },
        LayerSpec::Relu,
        LayerSpec::Dense { neurons: outputs },
        head,
    ]
}

/// Layer list of the vessel presence classifier.
pub fn classifier_specs() -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    specs.extend(conv_block(16));
    specs.extend(conv_block(16));
    specs.extend(dense_head(2, LayerSpec::Softmax));
    specs
}

/// Layer list of the vessel centre regressor. Outputs `(col, row)`
/// normalized to `[0, 1]` of the frame extent.
pub fn regressor_specs() -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    for filters in [8, 12, 16] {
        specs.extend(conv_block(filters));
    }
    specs.extend(dense_head(2, LayerSpec::LinearOutput));
    specs
}

/// Two conv blocks of 16 filters, two dense layers of 100, softmax over
/// {no vessel, vessel}.
pub fn build_classifier(input: Shape, seed: u64) -> Result<Network, NnError> {
    Network::new(input, &classifier_specs(), LossKind::CrossEntropy, seed)
}

/// Three conv blocks of 8, 12 and 16 filters, two dense layers of 100,
/// linear `(col, row)` output.
pub fn build_regressor(input: Shape, seed: u64) -> Result<Network, NnError> {
    Network::new(input, &regressor_specs(), LossKind::Mse, seed)
}
