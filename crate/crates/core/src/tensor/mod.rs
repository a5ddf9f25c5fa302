//! Differentiable computation substrate: tensors, the reverse-mode tape,
//! recurrent and convolutional layers, batch norm, dropout, and Adam.

mod array;
pub mod checkpoint;
mod graph;
pub mod layers;
pub mod optim;
mod params;

pub use array::Tensor;
pub use checkpoint::{Checkpoint, CheckpointHeader};
pub use graph::{Gradients, Graph, Var, MASK_LOGIT};
pub use layers::{
    apply_buffer_updates, BatchNorm1d, BiLstm, BiLstmOutput, CnnEncoder, Embedding, Forward,
    GruCell, Linear, Mode,
};
pub use optim::AdamState;
pub use params::{DiffTensor, ParamId, ParamStore};
