use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::frontend::Binding;
use crate::ir::{BufferKind, DataType, Graph, Node, Schedule, Scope};
use crate::memalloc::{arena_name, MemoryMap, NodeTransfers, TilingSolution, TransferSchedule};
use crate::target::TargetDescription;
use crate::tileflow::placement;

use super::BackendError;

pub const PLAN_FILE: &str = "plan.json";
pub const PLAN_WEIGHTS: &str = "plan.weights";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelPlan {
    pub name: String,
    pub capacity: usize,
    /// Arena size: the level's allocation peak.
    pub peak: usize,
    pub exact: bool,
}

/// A graph buffer at its static address.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferPlan {
    pub name: String,
    pub kind: BufferKind,
    pub scope: Scope,
    pub dtype: DataType,
    pub shape: Vec<usize>,
    pub level: String,
    pub offset: usize,
    /// Bytes set aside, alignment included.
    pub reserved: usize,
    /// Bytes of data.
    pub bytes: usize,
    pub start: usize,
    pub end: usize,
    /// Offset of a constant's payload in the weights file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload_at: Option<usize>,
    #[serde(skip)]
    pub payload: Option<Arc<[u8]>>,
}

/// Tile arena of one staged operand of one step.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArenaPlan {
    pub name: String,
    pub level: String,
    pub offset: usize,
    pub reserved: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperandPlan {
    pub buffer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arena: Option<String>,
    pub slot_bytes: usize,
}

impl OperandPlan {
    pub fn staged(&self) -> bool {
        self.arena.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepPlan {
    pub node: Node,
    pub kernel: String,
    pub engine: String,
    /// Runs through a closure on an engine other than the host.
    pub offload: bool,
    /// Inputs, then the output.
    pub operands: Vec<OperandPlan>,
    pub loops: NodeTransfers,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolverInfo {
    pub objective: i64,
    pub optimal: bool,
    pub explored: u64,
}

/// Fully scheduled, allocated and tiled program: what the simulator
/// interprets and what C emission renders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Program {
    pub name: String,
    pub scenario: String,
    pub double_buffer: bool,
    pub target: TargetDescription,
    pub levels: Vec<LevelPlan>,
    pub buffers: Vec<BufferPlan>,
    pub arenas: Vec<ArenaPlan>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub steps: Vec<StepPlan>,
    pub solver: SolverInfo,
}

impl Program {
    pub fn buffer(&self, name: &str) -> Option<&BufferPlan> {
        self.buffers.iter().find(|b| b.name == name)
    }

    pub fn arena(&self, name: &str) -> Option<&ArenaPlan> {
        self.arenas.iter().find(|a| a.name == name)
    }

    pub fn level(&self, name: &str) -> Option<&LevelPlan> {
        self.levels.iter().find(|l| l.name == name)
    }

    /// Writes `plan.json` and the constant payloads.
    pub fn save(&self, dir: &Path) -> Result<(), BackendError> {
        let mut blob = Vec::new();
        let mut p = self.clone();
        for b in &mut p.buffers {
            if let Some(data) = &b.payload {
                blob.resize(blob.len().next_multiple_of(4), 0);
                b.payload_at = Some(blob.len());
                blob.extend_from_slice(data);
            }
        }
        let json = serde_json::to_string_pretty(&p).map_err(|e| BackendError::Io(e.to_string()))?;
        fs::write(dir.join(PLAN_FILE), json + "\n").map_err(|e| BackendError::Io(e.to_string()))?;
        fs::write(dir.join(PLAN_WEIGHTS), blob).map_err(|e| BackendError::Io(e.to_string()))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Program, BackendError> {
        let text = fs::read_to_string(dir.join(PLAN_FILE)).map_err(|e| BackendError::Io(format!("{PLAN_FILE}: {e}")))?;
        let mut p: Program =
            serde_json::from_str(&text).map_err(|e| BackendError::Malformed(format!("{PLAN_FILE}: {e}")))?;
        let blob = fs::read(dir.join(PLAN_WEIGHTS)).map_err(|e| BackendError::Io(format!("{PLAN_WEIGHTS}: {e}")))?;
        for b in &mut p.buffers {
            if let Some(at) = b.payload_at {
                let data = blob
                    .get(at..at + b.bytes)
                    .ok_or_else(|| BackendError::Malformed(format!("payload of `{}` runs past the weights file", b.name)))?;
                b.payload = Some(data.into());
            } else if b.kind == BufferKind::Constant {
                return Err(BackendError::Malformed(format!("constant `{}` has no payload", b.name)));
            }
        }
        Ok(p)
    }
}

/// Assembles the program from the outputs of every stage.
#[allow(clippy::too_many_arguments)]
pub fn build_program(
    name: &str,
    scenario: &str,
    double_buffer: bool,
    g: &Graph,
    b: &Binding,
    t: &TargetDescription,
    sched: &Schedule,
    ts: &TilingSolution,
    mm: &MemoryMap,
    xfers: &TransferSchedule,
) -> Result<Program, BackendError> {
    let places = placement(g, b, t).map_err(|e| BackendError::Internal(e.to_string()))?;
    let levels = t
        .levels
        .iter()
        .map(|l| {
            let m = mm.levels.get(&l.name);
            LevelPlan {
                name: l.name.clone(),
                capacity: l.capacity,
                peak: m.map(|m| m.peak).unwrap_or(0),
                exact: m.map(|m| m.exact).unwrap_or(true),
            }
        })
        .collect();
    let mut buffers = Vec::new();
    for buf in g.buffers() {
        let (level, e) = mm
            .entry(&buf.name)
            .ok_or_else(|| BackendError::Internal(format!("buffer `{}` has no address", buf.name)))?;
        buffers.push(BufferPlan {
            name: buf.name.clone(),
            kind: buf.kind,
            scope: buf.scope,
            dtype: buf.dtype.unwrap_or(DataType::U8),
            shape: buf.shape.clone(),
            level: level.to_string(),
            offset: e.offset,
            reserved: e.reserved,
            bytes: if buf.kind == BufferKind::Transient {
                e.reserved
            } else {
                buf.size_bytes().unwrap_or(0)
            },
            start: e.start,
            end: e.end,
            payload_at: None,
            payload: buf.payload.clone(),
        });
    }
    let mut arenas = Vec::new();
    let mut steps = Vec::new();
    for (s, loops) in xfers.steps.iter().enumerate() {
        let i = sched.order[s];
        let n = &g.nodes[i];
        let p = &places[i];
        let mut operands = Vec::new();
        for (k, o) in p.operands.iter().enumerate() {
            let arena = if o.staged {
                let an = arena_name(&o.buffer, &n.name, k);
                let (level, e) = mm
                    .entry(&an)
                    .ok_or_else(|| BackendError::Internal(format!("arena `{an}` has no address")))?;
                arenas.push(ArenaPlan {
                    name: an.clone(),
                    level: level.to_string(),
                    offset: e.offset,
                    reserved: e.reserved,
                    start: e.start,
                    end: e.end,
                });
                Some(an)
            } else {
                None
            };
            operands.push(OperandPlan {
                buffer: o.buffer.clone(),
                arena,
                slot_bytes: loops.slot_bytes[k],
            });
        }
        steps.push(StepPlan {
            node: n.clone(),
            kernel: b.nodes[i].kernel.clone(),
            engine: b.nodes[i].engine.clone(),
            offload: !t.is_host(&b.nodes[i].engine),
            operands,
            loops: loops.clone(),
        });
    }
    Ok(Program {
        name: name.to_string(),
        scenario: scenario.to_string(),
        double_buffer,
        target: t.clone(),
        levels,
        buffers,
        arenas,
        inputs: g.inputs.clone(),
        outputs: g.outputs.clone(),
        steps,
        solver: SolverInfo {
            objective: ts.objective,
            optimal: ts.optimal,
            explored: ts.explored,
        },
    })
}
