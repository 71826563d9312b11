//! Lowering into the platform dialect: pattern passes, operator fusion,
//! transpose insertion, GEMM to pointwise-convolution rewriting, type
//! inference with kernel selection, and memory-level annotation.

mod annotate;
mod passes;
mod select;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

pub use annotate::{annotate_memory_levels, AnnotationPolicy};
pub use passes::{
    apply_passes, default_passes, gemm_requant_fusion, gemm_to_pointwise, gemm_to_pointwise_pass, transpose_folding,
    transpose_insertion, PatNode, Pass, Pattern, Replace,
};
pub use select::{infer_types_select_kernels, Binding, NodeBinding};

use crate::ir::{DataType, Graph};
use crate::kernels::Registry;
use crate::target::{EngineKind, TargetDescription};

#[derive(Debug, thiserror::Error)]
pub enum FrontendError {
    #[error("pass `{pass}` failed: {message}")]
    Pass { pass: &'static str, message: String },
    #[error("no kernel for node `{node}` ({op}) with input types ({})", .types.join(", "))]
    NoKernel { node: String, op: String, types: Vec<String> },
    #[error("buffer `{buffer}` typed both {first} and {second}")]
    TypeConflict {
        buffer: String,
        first: DataType,
        second: DataType,
    },
    #[error("buffer `{buffer}` needs {size} bytes, level `{level}` holds {capacity}")]
    Capacity {
        buffer: String,
        level: String,
        size: usize,
        capacity: usize,
    },
    #[error("missing {0}")]
    Missing(String),
}

/// Deployment scenario: engine preferences, lowering passes and weight
/// placement policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scenario {
    SingleCore,
    OctaCore,
    Npu,
    NpuWeightMem,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::SingleCore, Scenario::OctaCore, Scenario::Npu, Scenario::NpuWeightMem];

    pub fn name(&self) -> &'static str {
        match self {
            Scenario::SingleCore => "single-core",
            Scenario::OctaCore => "octa-core",
            Scenario::Npu => "npu",
            Scenario::NpuWeightMem => "npu+weightmem",
        }
    }

    /// Engine kinds in preference order; the scalar core is always the
    /// last resort.
    pub fn engine_prefs(&self) -> Vec<EngineKind> {
        let mut v = match self {
            Scenario::SingleCore => vec![],
            Scenario::OctaCore => vec![EngineKind::MultiCoreCluster],
            Scenario::Npu | Scenario::NpuWeightMem => vec![EngineKind::ConvNpu, EngineKind::MultiCoreCluster],
        };
        v.push(EngineKind::ScalarCore);
        v
    }

    pub fn passes(&self) -> Vec<Pass> {
        let mut p = default_passes();
        if matches!(self, Scenario::Npu | Scenario::NpuWeightMem) {
            p.push(gemm_to_pointwise_pass());
        }
        p
    }

    pub fn policy(&self) -> AnnotationPolicy {
        match self {
            Scenario::NpuWeightMem => AnnotationPolicy::NmsWeights,
            _ => AnnotationPolicy::NoNms,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown scenario `{s}` (single-core, octa-core, npu, npu+weightmem)"))
    }
}

/// Runs the whole frontend for `scenario`: passes, kernel selection and
/// level annotation.
pub fn lower(g: &Graph, t: &TargetDescription, scenario: Scenario, reg: &Registry) -> Result<(Graph, Binding), FrontendError> {
    let lowered = apply_passes(g, &scenario.passes())?;
    let (typed, binding) = infer_types_select_kernels(&lowered, reg, t, &BTreeMap::new(), &scenario.engine_prefs())?;
    let annotated = annotate_memory_levels(&typed, t, scenario.policy(), &binding)?;
    Ok((annotated, binding))
}
