//! End-to-end compilation: lowering, tiling constraints, the joint solve,
//! transfer planning and program assembly.

use std::time::{Duration, Instant};

use crate::backend::{build_program, BackendError, Program};
use crate::frontend::{lower, Binding, FrontendError, Scenario};
use crate::ir::{topo_schedule, validate, Graph, IrError, Schedule};
use crate::kernels::Registry;
use crate::memalloc::{
    allocation_problems, plan_transfers, solve_joint, AllocError, AllocationProblem, Budget, MemoryMap, TilingSolution,
    TransferSchedule,
};
use crate::target::TargetDescription;
use crate::tileflow::{build_tile_cp, tiling_objective, ConstraintProgram, TileError, TileOpts, TilingPolicy};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CompileOptions {
    pub scenario: Scenario,
    pub double_buffer: bool,
    pub budget: Budget,
}

impl Default for CompileOptions {
    fn default() -> Self {
        CompileOptions {
            scenario: Scenario::SingleCore,
            double_buffer: true,
            budget: Budget::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CompileError {
    #[error("{0}")]
    Graph(#[from] IrError),
    #[error("{0}")]
    Frontend(#[from] FrontendError),
    #[error("{0}")]
    Tile(#[from] TileError),
    #[error("{0}")]
    Alloc(#[from] AllocError),
    #[error("{0}")]
    Backend(#[from] BackendError),
}

impl CompileError {
    /// No tiling and allocation fits the target's capacities.
    pub fn is_infeasible(&self) -> bool {
        matches!(
            self,
            CompileError::Alloc(AllocError::Infeasible { .. })
                | CompileError::Alloc(AllocError::Tile(TileError::Unsatisfiable { .. }))
                | CompileError::Tile(TileError::Unsatisfiable { .. })
                | CompileError::Frontend(FrontendError::Capacity { .. })
        )
    }
}

/// Every intermediate result of one compilation.
#[derive(Clone, Debug)]
pub struct Compiled {
    pub lowered: Graph,
    pub binding: Binding,
    pub schedule: Schedule,
    pub cp: ConstraintProgram,
    pub problems: Vec<AllocationProblem>,
    pub tiling: TilingSolution,
    pub memory: MemoryMap,
    pub transfers: TransferSchedule,
    pub program: Program,
    pub elapsed: Duration,
}

impl Compiled {
    /// Human-readable record of the solve.
    pub fn solver_log(&self) -> String {
        let mut s = format!(
            "objective {}\noptimal {}\nexplored {}\nvariables {}\nconstraints {}\n",
            self.tiling.objective,
            self.tiling.optimal,
            self.tiling.explored,
            self.cp.vars.len(),
            self.cp.constraints.len()
        );
        for (l, m) in &self.memory.levels {
            s += &format!(
                "level {l} peak {} capacity {} buffers {} {}\n",
                m.peak,
                m.capacity,
                m.entries.len(),
                if m.exact { "exact" } else { "heuristic" }
            );
        }
        for (tensor, h) in &self.tiling.hops {
            s += &format!("tile {tensor}@{} {:?} of {:?} x{} count {}\n", h.level, h.tile, h.extent, h.factor, h.count);
        }
        s
    }
}

pub fn compile(g: &Graph, t: &TargetDescription, opts: CompileOptions) -> Result<Compiled, CompileError> {
    let start = Instant::now();
    let diags = validate(g);
    if !diags.is_empty() {
        return Err(IrError::Invalid(diags).into());
    }
    let reg = Registry::builtin();
    let (lowered, binding) = lower(g, t, opts.scenario, &reg)?;
    let schedule = topo_schedule(&lowered)?;
    let topts = TileOpts {
        double_buffer: opts.double_buffer,
    };
    let cp = build_tile_cp(&lowered, &binding, t, &reg, &schedule, topts)?;
    let cp = tiling_objective(cp, TilingPolicy::MaxTiles).map_err(BackendError::Internal)?;
    let problems = allocation_problems(&lowered, &binding, t, &schedule, &cp, topts)?;
    let (tiling, memory) = solve_joint(&cp, &problems, opts.budget)?;
    let transfers = plan_transfers(&tiling, &lowered, &binding, t, &reg, &schedule, topts)?;
    let program = build_program(
        &g.name,
        opts.scenario.name(),
        opts.double_buffer,
        &lowered,
        &binding,
        t,
        &schedule,
        &tiling,
        &memory,
        &transfers,
    )?;
    Ok(Compiled {
        lowered,
        binding,
        schedule,
        cp,
        problems,
        tiling,
        memory,
        transfers,
        program,
        elapsed: start.elapsed(),
    })
}
