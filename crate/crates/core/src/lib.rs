//! Desk-scale boomerang distillation: pretrain a small transformer teacher,
//! distill a layer-pruned student aligned block-by-block to it, then rebuild
//! every intermediate depth by patching teacher blocks back into the student.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod distill;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod pruning;
pub mod surgery;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use model::{ForwardResult, LayerBlock, LmHead, ModelConfig, ParameterSet, PositionEncoding};
pub use tensor::{Real, Tensor};
