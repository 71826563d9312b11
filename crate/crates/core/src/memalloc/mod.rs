//! Buffer lifetimes and the joint tiling and static allocation solve:
//! Tetris placement over a searched buffer permutation, per-level capacity
//! limits, and tile transfer planning.

mod report;
mod solve;
mod tetris;
mod transfers;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use report::mem_report;
pub use solve::{solve_joint, Budget, TensorTiling, TilingSolution};
pub use tetris::{best_order, tetris_allocate, OrderResult, SearchLimits, EXACT_LIMIT};
pub use transfers::{box_descriptors, plan_transfers, Dir, Dma2d, Event, NodeTransfers, TileBox, Transfer, TransferSchedule};

use crate::frontend::Binding;
use crate::ir::{BufferKind, Graph, Schedule, Scope};
use crate::target::TargetDescription;
use crate::tileflow::{placement, Constraint, ConstraintProgram, Expr, SizeKind, TileError, TileOpts, VarId};

#[derive(Debug, thiserror::Error)]
pub enum AllocError {
    #[error("buffer `{0}` is never produced")]
    NeverProduced(String),
    #[error("infeasible: level `{level}` needs at least {min_peak} bytes, capacity {capacity}")]
    Infeasible {
        level: String,
        min_peak: usize,
        capacity: usize,
    },
    #[error("search budget exhausted before any feasible tiling was found")]
    Budget,
    #[error("{0}")]
    Tile(#[from] TileError),
    #[error("{0}")]
    Other(String),
}

/// Inclusive range of schedule steps during which a buffer holds data.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Lifetime {
    pub buffer: String,
    pub start: usize,
    pub end: usize,
}

/// Lifetimes of every graph buffer over `s`. Global buffers (graph I/O,
/// caches, constants) span the whole schedule; a local lives from its
/// producer to its last consumer; a transient lives at its node's step.
pub fn compute_lifetimes(g: &Graph, s: &Schedule) -> Result<Vec<Lifetime>, AllocError> {
    let steps = s.steps();
    let last = s.len().saturating_sub(1);
    let mut produced: BTreeMap<&str, usize> = BTreeMap::new();
    let mut used: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, n) in g.nodes.iter().enumerate() {
        let st = steps[i];
        for o in &n.outputs {
            produced.insert(o, st);
        }
        for x in n.inputs.iter().chain(&n.scratch) {
            let e = used.entry(x).or_insert(st);
            *e = (*e).max(st);
        }
        for x in &n.scratch {
            produced.entry(x).or_insert(st);
        }
    }
    g.buffers()
        .map(|b| {
            let global = b.scope == Scope::Global || b.kind == BufferKind::Constant || g.is_graph_io(&b.name);
            let (start, end) = if global {
                (0, last)
            } else {
                let p = *produced
                    .get(b.name.as_str())
                    .ok_or_else(|| AllocError::NeverProduced(b.name.clone()))?;
                (p, used.get(b.name.as_str()).copied().unwrap_or(p).max(p))
            };
            Ok(Lifetime {
                buffer: b.name.clone(),
                start,
                end,
            })
        })
        .collect()
}

/// Lifetime of a tile arena for the node at `step`; double-buffered arenas
/// also cover the neighbouring steps.
pub fn arena_lifetime(step: usize, double_buffer: bool, steps: usize) -> (usize, usize) {
    if double_buffer {
        (step.saturating_sub(1), (step + 1).min(steps.saturating_sub(1)))
    } else {
        (step, step)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cost {
    Fixed(usize),
    /// Bytes given by a program variable.
    Var(VarId),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocItem {
    pub name: String,
    pub start: usize,
    pub end: usize,
    pub cost: Cost,
}

/// Buffers of one memory level to be placed under its capacity.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationProblem {
    pub level: String,
    pub capacity: usize,
    pub items: Vec<AllocItem>,
}

impl AllocationProblem {
    pub fn spans(&self) -> Vec<(usize, usize)> {
        self.items.iter().map(|i| (i.start, i.end)).collect()
    }

    /// `A[j][i]` is set iff the lifetimes of `j` and `i` overlap (`i != j`).
    pub fn adjacency(&self) -> Vec<Vec<bool>> {
        let s = self.spans();
        (0..s.len())
            .map(|j| (0..s.len()).map(|i| i != j && tetris::overlaps(s[i], s[j])).collect())
            .collect()
    }

    pub fn sizes(&self, a: &[i64]) -> Vec<usize> {
        self.items
            .iter()
            .map(|i| match i.cost {
                Cost::Fixed(b) => b,
                Cost::Var(v) => a[v.0].max(0) as usize,
            })
            .collect()
    }

    pub fn is_fixed(&self) -> bool {
        self.items.iter().all(|i| matches!(i.cost, Cost::Fixed(_)))
    }

    /// Adds the permutation block, the height recurrence and the capacity
    /// bound of this level to `cp`. Returns the block and height variables.
    pub fn encode(&self, cp: &mut ConstraintProgram) -> (Vec<Vec<VarId>>, Vec<VarId>) {
        let n = self.items.len();
        let block = cp.add_permutation(&format!("P[{}]", self.level), n);
        let heights: Vec<VarId> = (0..n)
            .map(|j| cp.add_var(format!("H[{}][{j}]", self.level), 0, self.capacity as i64))
            .collect();
        let costs = self
            .items
            .iter()
            .map(|i| match i.cost {
                Cost::Fixed(b) => Expr::Const(b as i64),
                Cost::Var(v) => Expr::Var(v),
            })
            .collect();
        cp.add(Constraint::Tetris {
            level: self.level.clone(),
            block: block.clone(),
            overlap: self.adjacency(),
            costs,
            heights: heights.clone(),
        });
        for h in &heights {
            cp.add(Constraint::Le(Expr::Var(*h), Expr::Const(self.capacity as i64)));
        }
        (block, heights)
    }
}

/// Name of the tile arena a node uses for its staged operand `k`.
pub fn arena_name(tensor: &str, node: &str, k: usize) -> String {
    format!("{tensor}@{node}.{k}")
}

/// One allocation problem per memory level holding anything: graph buffers
/// at fixed sizes, kernel scratch and per-node tile arenas at the sizes
/// given by their SizeVars.
pub fn allocation_problems(
    g: &Graph,
    b: &Binding,
    t: &TargetDescription,
    s: &Schedule,
    cp: &ConstraintProgram,
    opts: TileOpts,
) -> Result<Vec<AllocationProblem>, AllocError> {
    let lifetimes = compute_lifetimes(g, s)?;
    let places = placement(g, b, t)?;
    let steps = s.steps();
    let mut items: BTreeMap<String, Vec<AllocItem>> = t.levels.iter().map(|l| (l.name.clone(), Vec::new())).collect();
    let size_var = |tensor: &str, level: &str, kind: SizeKind| {
        cp.size_vars
            .iter()
            .find(|v| v.tensor == tensor && v.level == level && v.kind == kind)
            .map(|v| v.var)
    };
    for (buf, l) in g.buffers().zip(&lifetimes) {
        let level = buf
            .level
            .clone()
            .ok_or_else(|| AllocError::Other(format!("buffer `{}` has no memory level", buf.name)))?;
        let cost = match buf.kind {
            BufferKind::Transient => match size_var(&buf.name, &level, SizeKind::Transient) {
                Some(v) => Cost::Var(v),
                None => Cost::Fixed(t.aligned(buf.size_bytes().unwrap_or(0))),
            },
            _ => Cost::Fixed(t.aligned(buf.size_bytes().unwrap_or(0))),
        };
        items.entry(level).or_default().push(AllocItem {
            name: buf.name.clone(),
            start: l.start,
            end: l.end,
            cost,
        });
    }
    for &i in &s.order {
        let p = &places[i];
        for (k, o) in p.operands.iter().enumerate().filter(|(_, o)| o.staged) {
            let v = size_var(&o.buffer, &p.stage_level, SizeKind::Tile)
                .ok_or_else(|| AllocError::Other(format!("no size variable for staged `{}`", o.buffer)))?;
            let (start, end) = arena_lifetime(steps[i], opts.double_buffer, s.len());
            items.entry(p.stage_level.clone()).or_default().push(AllocItem {
                name: arena_name(&o.buffer, &g.nodes[i].name, k),
                start,
                end,
                cost: Cost::Var(v),
            });
        }
    }
    Ok(t
        .levels
        .iter()
        .filter_map(|l| {
            let it = items.remove(&l.name)?;
            (!it.is_empty()).then(|| AllocationProblem {
                level: l.name.clone(),
                capacity: l.capacity,
                items: it,
            })
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapEntry {
    pub name: String,
    pub offset: usize,
    pub reserved: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelMap {
    pub capacity: usize,
    pub peak: usize,
    /// Permutation the offsets were built from (indices into `entries`).
    pub order: Vec<usize>,
    /// Peak proven minimal for the chosen sizes.
    pub exact: bool,
    pub entries: Vec<MapEntry>,
}

impl LevelMap {
    /// Independent of the placement rule: concurrently live entries must
    /// not share bytes, and everything must fit.
    pub fn check(&self, level: &str) -> Result<(), String> {
        for e in &self.entries {
            if e.offset + e.reserved > self.capacity {
                return Err(format!(
                    "`{}` at {}+{} exceeds `{level}` capacity {}",
                    e.name, e.offset, e.reserved, self.capacity
                ));
            }
        }
        for (i, a) in self.entries.iter().enumerate() {
            for b in &self.entries[i + 1..] {
                let live = a.start <= b.end && b.start <= a.end;
                let disjoint = a.offset + a.reserved <= b.offset || b.offset + b.reserved <= a.offset;
                if live && !disjoint && a.reserved > 0 && b.reserved > 0 {
                    return Err(format!("`{}` and `{}` overlap in `{level}` while both live", a.name, b.name));
                }
            }
        }
        Ok(())
    }

    /// Highest byte reserved by buffers live at `step`.
    pub fn high_water(&self, step: usize) -> usize {
        self.entries
            .iter()
            .filter(|e| e.start <= step && step <= e.end)
            .map(|e| e.offset + e.reserved)
            .max()
            .unwrap_or(0)
    }
}

/// Static placement of every buffer, per level.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryMap {
    pub levels: BTreeMap<String, LevelMap>,
}

impl MemoryMap {
    pub fn entry(&self, name: &str) -> Option<(&str, &MapEntry)> {
        self.levels
            .iter()
            .find_map(|(l, m)| m.entries.iter().find(|e| e.name == name).map(|e| (l.as_str(), e)))
    }

    pub fn check(&self) -> Result<(), String> {
        self.levels.iter().try_for_each(|(l, m)| m.check(l))
    }
}
