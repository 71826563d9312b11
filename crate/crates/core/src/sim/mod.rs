//! Bit-exact interpreter of the scheduled program: byte memories per
//! level, capacity and liveness enforcement, poisoned uninitialized reads,
//! and a cycle model for kernels, DMA and offload setup.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backend::{Program, StepPlan};
use crate::ir::BufferKind;
use crate::kernels::{eval_tile, KernelError, Registry, Tensor};
use crate::memalloc::{Dir, Event};
use crate::target::TargetDescription;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("step {step}: level `{level}` needs {bytes} bytes, capacity {capacity}")]
    Capacity {
        step: usize,
        level: String,
        bytes: usize,
        capacity: usize,
    },
    #[error("step {step}: `{a}` and `{b}` share bytes of `{level}` while both live")]
    Overlap { step: usize, level: String, a: String, b: String },
    #[error("step {step}: read of uninitialized bytes of `{buffer}`")]
    Uninitialized { step: usize, buffer: String },
    #[error("step {step}: `{buffer}` accessed outside its lifetime")]
    Lifetime { step: usize, buffer: String },
    #[error("step {step}: access to `{buffer}` falls outside its reservation")]
    Bounds { step: usize, buffer: String },
    #[error("input `{name}`: {message}")]
    Input { name: String, message: String },
    #[error("step {step} (`{node}`): {source}")]
    Kernel {
        step: usize,
        node: String,
        source: KernelError,
    },
    #[error("program refers to unknown {0}")]
    Missing(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferEvent {
    pub step: usize,
    pub tensor: String,
    pub constant: bool,
    pub bytes: usize,
    pub src: String,
    pub dst: String,
    pub cycles: u64,
}

/// Live bytes per step and level, plus every DMA transfer.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemTrace {
    pub levels: Vec<String>,
    /// `live[step][level]`: bytes reserved by live buffers.
    pub live: Vec<Vec<usize>>,
    /// `high_water[step][level]`: highest reserved byte of live buffers.
    pub high_water: Vec<Vec<usize>>,
    pub transfers: Vec<TransferEvent>,
}

impl MemTrace {
    pub fn peak(&self, level: &str) -> usize {
        let Some(l) = self.levels.iter().position(|x| x == level) else {
            return 0;
        };
        self.high_water.iter().map(|s| s[l]).max().unwrap_or(0)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeCycles {
    pub node: String,
    pub op: String,
    pub engine: String,
    pub tiles: usize,
    pub kernel: u64,
    pub dma: u64,
    pub overlapped: u64,
    pub setup: u64,
    pub latency: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub nodes: Vec<NodeCycles>,
    pub total: u64,
    pub kernel: u64,
    pub dma: u64,
    pub setup: u64,
    /// Share of cycles spent outside kernels.
    pub marshaling: f64,
}

impl CycleReport {
    /// Text table: per operator kernel and marshaling cycles.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<32} {:<12} {:<8} {:>6} {:>10} {:>10} {:>10} {:>8} {:>10}\n",
            "node", "op", "engine", "tiles", "kernel", "dma", "overlap", "setup", "latency"
        );
        for n in &self.nodes {
            let _ = writeln!(
                s,
                "{:<32} {:<12} {:<8} {:>6} {:>10} {:>10} {:>10} {:>8} {:>10}",
                n.node, n.op, n.engine, n.tiles, n.kernel, n.dma, n.overlapped, n.setup, n.latency
            );
        }
        let _ = writeln!(
            s,
            "total {} cycles: kernel {}, dma {}, setup {}, marshaling {:.4}",
            self.total, self.kernel, self.dma, self.setup, self.marshaling
        );
        s
    }
}

/// DMA cycles of one transfer between two levels, charged to the channel
/// of the child level.
fn dma_cycles(t: &TargetDescription, src: &str, dst: &str, descs: &[crate::memalloc::Dma2d]) -> u64 {
    let child = [dst, src]
        .into_iter()
        .filter_map(|l| t.level(l))
        .find(|l| l.dma.is_some() && (l.parent.as_deref() == Some(src) || l.parent.as_deref() == Some(dst)));
    match child.and_then(|l| l.dma) {
        Some(ch) => descs.iter().map(|d| ch.cycles(d.bytes())).sum(),
        None => 0,
    }
}

fn step_cycles(step: &StepPlan, t: &TargetDescription, double: bool, reg: &Registry) -> NodeCycles {
    let engine = t.engine(&step.engine);
    let tmpl = reg.get(&step.kernel);
    let out = step.operands.len() - 1;
    let mut kernel = 0;
    for r in &step.loops.regions {
        let ins: Vec<Vec<usize>> = r[..out].iter().map(|b| b.extent.clone()).collect();
        let work = tmpl.map(|k| k.work(&step.node, &ins, &r[out].extent)).unwrap_or(0);
        kernel += engine.map(|e| e.kernel_cycles(step.node.op, work)).unwrap_or(work);
    }
    let dma: u64 = step
        .loops
        .transfers
        .iter()
        .map(|x| dma_cycles(t, &x.src_level, &x.dst_level, &x.descriptors))
        .sum();
    let tiles = step.loops.tiles.len();
    let setup = engine.map(|e| e.offload_setup).unwrap_or(0) * tiles as u64;
    let (latency, overlapped) = if double && step.loops.double_buffered {
        (kernel.max(dma) + setup, kernel.min(dma))
    } else {
        (kernel + dma + setup, 0)
    };
    NodeCycles {
        node: step.node.name.clone(),
        op: step.node.op.name().to_string(),
        engine: step.engine.clone(),
        tiles,
        kernel,
        dma,
        overlapped,
        setup,
        latency,
    }
}

/// Modeled cycles of a program on `t`. A double-buffered node costs
/// `max(kernel, dma) + setup`, otherwise `kernel + dma + setup`.
pub fn cycle_model(p: &Program, t: &TargetDescription) -> CycleReport {
    let reg = Registry::builtin();
    let nodes: Vec<NodeCycles> = p.steps.iter().map(|s| step_cycles(s, t, p.double_buffer, &reg)).collect();
    let total: u64 = nodes.iter().map(|n| n.latency).sum();
    let kernel: u64 = nodes.iter().map(|n| n.kernel).sum();
    CycleReport {
        total,
        kernel,
        dma: nodes.iter().map(|n| n.dma).sum(),
        setup: nodes.iter().map(|n| n.setup).sum(),
        marshaling: if total == 0 {
            0.0
        } else {
            (total - kernel.min(total)) as f64 / total as f64
        },
        nodes,
    }
}

/// Placed region of memory: a graph buffer or a tile arena.
#[derive(Clone, Debug)]
struct Region {
    name: String,
    level: usize,
    offset: usize,
    reserved: usize,
    start: usize,
    end: usize,
}

struct Machine {
    levels: Vec<String>,
    mem: Vec<Vec<u8>>,
    init: Vec<Vec<bool>>,
    regions: BTreeMap<String, Region>,
}

impl Machine {
    fn region(&self, name: &str) -> Result<&Region, SimError> {
        self.regions.get(name).ok_or_else(|| SimError::Missing(format!("buffer `{name}`")))
    }

    fn touch(&self, name: &str, step: usize) -> Result<&Region, SimError> {
        let r = self.region(name)?;
        if step < r.start || step > r.end {
            return Err(SimError::Lifetime {
                step,
                buffer: name.to_string(),
            });
        }
        Ok(r)
    }

    fn read(&self, name: &str, off: usize, len: usize, step: usize) -> Result<&[u8], SimError> {
        let r = self.touch(name, step)?;
        if off + len > r.reserved {
            return Err(SimError::Bounds {
                step,
                buffer: name.to_string(),
            });
        }
        let a = r.offset + off;
        if self.init[r.level][a..a + len].iter().any(|x| !x) {
            return Err(SimError::Uninitialized {
                step,
                buffer: name.to_string(),
            });
        }
        Ok(&self.mem[r.level][a..a + len])
    }

    fn write(&mut self, name: &str, off: usize, data: &[u8], step: usize) -> Result<(), SimError> {
        let r = self.touch(name, step)?.clone();
        if off + data.len() > r.reserved {
            return Err(SimError::Bounds {
                step,
                buffer: name.to_string(),
            });
        }
        let a = r.offset + off;
        self.mem[r.level][a..a + data.len()].copy_from_slice(data);
        self.init[r.level][a..a + data.len()].iter_mut().for_each(|x| *x = true);
        Ok(())
    }
}

/// Outputs and traces of one simulated inference.
#[derive(Clone, Debug)]
pub struct SimResult {
    pub outputs: BTreeMap<String, Vec<u8>>,
    pub trace: MemTrace,
    pub cycles: CycleReport,
}

fn live_check(m: &Machine, t: &TargetDescription, step: usize, trace: &mut MemTrace) -> Result<(), SimError> {
    let mut live = vec![0usize; m.levels.len()];
    let mut high = vec![0usize; m.levels.len()];
    let mut per_level: Vec<Vec<&Region>> = vec![Vec::new(); m.levels.len()];
    for r in m.regions.values().filter(|r| r.start <= step && step <= r.end && r.reserved > 0) {
        live[r.level] += r.reserved;
        high[r.level] = high[r.level].max(r.offset + r.reserved);
        per_level[r.level].push(r);
    }
    for (l, name) in m.levels.iter().enumerate() {
        let cap = t.level(name).map(|x| x.capacity).unwrap_or(0);
        if high[l] > cap {
            return Err(SimError::Capacity {
                step,
                level: name.clone(),
                bytes: high[l],
                capacity: cap,
            });
        }
        let mut rs = per_level[l].clone();
        rs.sort_by_key(|r| (r.offset, r.name.clone()));
        for w in rs.windows(2) {
            if w[0].offset + w[0].reserved > w[1].offset {
                return Err(SimError::Overlap {
                    step,
                    level: name.clone(),
                    a: w[0].name.clone(),
                    b: w[1].name.clone(),
                });
            }
        }
    }
    trace.live.push(live);
    trace.high_water.push(high);
    Ok(())
}

/// Executes the program on `inputs` (raw little-endian bytes per graph
/// input). Memory placement comes from the program; capacities and the
/// cycle model come from `t`.
pub fn run(p: &Program, inputs: &BTreeMap<String, Vec<u8>>, t: &TargetDescription) -> Result<SimResult, SimError> {
    let levels: Vec<String> = p.levels.iter().map(|l| l.name.clone()).collect();
    let li = |name: &str| levels.iter().position(|l| l == name).ok_or_else(|| SimError::Missing(format!("level `{name}`")));
    let mut regions = BTreeMap::new();
    for b in &p.buffers {
        regions.insert(
            b.name.clone(),
            Region {
                name: b.name.clone(),
                level: li(&b.level)?,
                offset: b.offset,
                reserved: b.reserved,
                start: b.start,
                end: b.end,
            },
        );
    }
    for a in &p.arenas {
        regions.insert(
            a.name.clone(),
            Region {
                name: a.name.clone(),
                level: li(&a.level)?,
                offset: a.offset,
                reserved: a.reserved,
                start: a.start,
                end: a.end,
            },
        );
    }
    let mut size = vec![0usize; levels.len()];
    for r in regions.values() {
        size[r.level] = size[r.level].max(r.offset + r.reserved);
    }
    let mut m = Machine {
        mem: size.iter().map(|&n| vec![0u8; n]).collect(),
        init: size.iter().map(|&n| vec![false; n]).collect(),
        levels: levels.clone(),
        regions,
    };
    let first = 0;
    for b in &p.buffers {
        if b.kind == BufferKind::Constant {
            let data = b.payload.as_deref().ok_or_else(|| SimError::Missing(format!("payload of `{}`", b.name)))?;
            m.write(&b.name, 0, data, first.max(b.start))?;
        }
    }
    for name in &p.inputs {
        let b = p.buffer(name).ok_or_else(|| SimError::Missing(format!("input `{name}`")))?;
        let data = inputs.get(name).ok_or_else(|| SimError::Input {
            name: name.clone(),
            message: "not provided".into(),
        })?;
        if data.len() != b.bytes {
            return Err(SimError::Input {
                name: name.clone(),
                message: format!("{} bytes given, shape {:?} of {} needs {}", data.len(), b.shape, b.dtype, b.bytes),
            });
        }
        m.write(name, 0, data, b.start)?;
    }
    let mut trace = MemTrace {
        levels: levels.clone(),
        ..Default::default()
    };
    for (s, step) in p.steps.iter().enumerate() {
        live_check(&m, t, s, &mut trace)?;
        exec_step(&mut m, p, t, s, step, &mut trace)?;
    }
    if p.steps.is_empty() {
        live_check(&m, t, 0, &mut trace)?;
    }
    let last = p.steps.len().saturating_sub(1);
    let mut outputs = BTreeMap::new();
    for name in &p.outputs {
        let b = p.buffer(name).ok_or_else(|| SimError::Missing(format!("output `{name}`")))?;
        outputs.insert(name.clone(), m.read(name, 0, b.bytes, last.max(b.start))?.to_vec());
    }
    Ok(SimResult {
        outputs,
        trace,
        cycles: cycle_model(p, t),
    })
}

fn exec_step(
    m: &mut Machine,
    p: &Program,
    t: &TargetDescription,
    s: usize,
    step: &StepPlan,
    trace: &mut MemTrace,
) -> Result<(), SimError> {
    let n = &step.node;
    let out = step.operands.len() - 1;
    let kerr = |e: KernelError| SimError::Kernel {
        step: s,
        node: n.name.clone(),
        source: e,
    };
    for sc in &n.scratch {
        m.touch(sc, s)?;
    }
    for ev in &step.loops.events {
        match *ev {
            Event::Transfer(id) => {
                let x = &step.loops.transfers[id];
                let op = &step.operands[x.operand];
                let arena = op.arena.as_deref().ok_or_else(|| SimError::Missing(format!("arena of `{}`", x.tensor)))?;
                let (src, dst) = match x.dir {
                    Dir::In => (x.tensor.as_str(), arena),
                    Dir::Out => (arena, x.tensor.as_str()),
                };
                for d in &x.descriptors {
                    for r in 0..d.rows {
                        let bytes = m.read(src, d.src + r * d.src_stride, d.row_bytes, s)?.to_vec();
                        m.write(dst, d.dst + r * d.dst_stride, &bytes, s)?;
                    }
                }
                trace.transfers.push(TransferEvent {
                    step: s,
                    tensor: x.tensor.clone(),
                    constant: p.buffer(&x.tensor).is_some_and(|b| b.kind == BufferKind::Constant),
                    bytes: x.bytes(),
                    src: x.src_level.clone(),
                    dst: x.dst_level.clone(),
                    cycles: dma_cycles(t, &x.src_level, &x.dst_level, &x.descriptors),
                });
            }
            Event::Compute(k) => {
                let slot = if p.double_buffer { k % 2 } else { 0 };
                let regions = &step.loops.regions[k];
                let mut tensors = Vec::with_capacity(out);
                for (j, op) in step.operands[..out].iter().enumerate() {
                    let b = p.buffer(&op.buffer).ok_or_else(|| SimError::Missing(format!("buffer `{}`", op.buffer)))?;
                    let ext = &regions[j].extent;
                    let len = ext.iter().product::<usize>() * b.dtype.bytes();
                    let bytes = match &op.arena {
                        Some(a) => m.read(a, slot * op.slot_bytes, len, s)?,
                        None => m.read(&op.buffer, in_place_offset(&b.shape, &regions[j].origin) * b.dtype.bytes(), len, s)?,
                    };
                    let tensor = Tensor::from_bytes(b.dtype, ext.clone(), bytes)
                        .ok_or_else(|| SimError::Missing(format!("tile of `{}`", op.buffer)))?;
                    tensors.push(tensor);
                }
                let refs: Vec<&Tensor> = tensors.iter().collect();
                let y = eval_tile(n, &refs, &regions[out].origin).map_err(kerr)?;
                let o = &step.operands[out];
                let ob = p.buffer(&o.buffer).ok_or_else(|| SimError::Missing(format!("buffer `{}`", o.buffer)))?;
                if y.shape != regions[out].extent {
                    return Err(kerr(KernelError::Shape(format!(
                        "tile result {:?}, expected {:?}",
                        y.shape, regions[out].extent
                    ))));
                }
                let bytes = y.to_bytes();
                match &o.arena {
                    Some(a) => m.write(a, slot * o.slot_bytes, &bytes, s)?,
                    None => {
                        let off = in_place_offset(&ob.shape, &regions[out].origin) * ob.dtype.bytes();
                        m.write(&o.buffer, off, &bytes, s)?
                    }
                }
            }
        }
    }
    Ok(())
}

/// Element offset of a tile used in place; only its leading dimension is
/// ever tiled, so the tile is one contiguous run.
fn in_place_offset(shape: &[usize], origin: &[usize]) -> usize {
    let st = crate::kernels::strides(shape);
    origin.iter().zip(&st).map(|(o, s)| o * s).sum()
}

/// Modeled total cycles of the same graph compiled with and without double
/// buffering: `(double, single)`.
pub fn compare_buffering(
    g: &crate::ir::Graph,
    t: &TargetDescription,
    opts: crate::pipeline::CompileOptions,
) -> Result<(u64, u64), crate::pipeline::CompileError> {
    let mut o = opts;
    o.double_buffer = true;
    let d = crate::pipeline::compile(g, t, o)?;
    o.double_buffer = false;
    let s = crate::pipeline::compile(g, t, o)?;
    Ok((cycle_model(&d.program, t).total, cycle_model(&s.program, t).total))
}
