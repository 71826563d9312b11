//! Kernel registry: reference integer semantics, C templates, scratch
//! sizes and tiling rules for every (op kind, engine, type signature).

mod eval;
pub mod reference;
mod registry;
mod tensor;

pub use eval::{eval_node, eval_tile, interpret, interpret_all, softmax_params};
pub use reference::{Requant, SoftmaxParams};
pub use registry::{
    tile_constraints_for, KernelSignature, KernelTemplate, OperandDim, OutType, Predicate, Registry, TileConstraintSpec,
    TileRule, TypePat, CODEGEN_PASSES,
};
pub use tensor::Tensor;
pub(crate) use tensor::{for_each_index, strides};

#[derive(Debug, thiserror::Error)]
pub enum KernelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("type mismatch: {0}")]
    Type(String),
    #[error("bad parameter: {0}")]
    Param(String),
    #[error("unknown kernel `{0}`")]
    Unknown(String),
    #[error("missing value `{0}`")]
    Missing(String),
    #[error("template `{kernel}` has unbound hole `{hole}`")]
    UnboundHole { kernel: String, hole: String },
    #[error("node `{node}`: {source}")]
    Node {
        node: String,
        #[source]
        source: Box<KernelError>,
    },
}
