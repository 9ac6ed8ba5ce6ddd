//! Dense tensors, a reverse-mode tape, the Adam optimizer and the binary
//! checkpoint format.

mod adam;
mod checkpoint;
mod graph;
mod params;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use graph::{FaultInjection, Gradients, Graph, Var};
pub use params::ParamStore;
pub use tensor::{Real, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
}
