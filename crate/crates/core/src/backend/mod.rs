//! Code generation: the scheduled program structure, per-node code
//! segments and closures, and C source emission with static arenas and
//! double-buffered DMA tile loops.

mod codegen;
mod emit;
mod program;

pub use codegen::{gen_node_code, make_closure, Bound, Closure, CodeSegment, FreeVar, NodeCode, Offload, Symbols};
pub use emit::{emit, SourceArtifact};
pub use program::{
    build_program, ArenaPlan, BufferPlan, LevelPlan, OperandPlan, Program, SolverInfo, StepPlan, PLAN_FILE, PLAN_WEIGHTS,
};

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("i/o: {0}")]
    Io(String),
    #[error("malformed artifact: {0}")]
    Malformed(String),
    #[error("free variable `{0}` has no binding")]
    Unbound(String),
    #[error("code generation precondition: {0}")]
    Precondition(String),
    #[error("internal: {0}")]
    Internal(String),
    #[error("{0}")]
    Kernel(#[from] crate::kernels::KernelError),
}
