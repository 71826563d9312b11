use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::FrontendError;
use crate::ir::{topo_schedule, Buffer, BufferKind, DataType, Graph};
use crate::kernels::Registry;
use crate::target::{EngineKind, TargetDescription};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeBinding {
    /// Registry template id.
    pub kernel: String,
    /// Target engine name.
    pub engine: String,
}

/// Kernel and engine per node (by node index) and the resolved type of
/// every buffer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Binding {
    pub nodes: Vec<NodeBinding>,
    pub types: BTreeMap<String, DataType>,
}

/// Forward type propagation and kernel selection in one sweep over the
/// schedule. Templates are tried in engine preference order; for each, the
/// first target engine of that kind supporting the op is used.
pub fn infer_types_select_kernels(
    g: &Graph,
    reg: &Registry,
    t: &TargetDescription,
    input_types: &BTreeMap<String, DataType>,
    engine_prefs: &[EngineKind],
) -> Result<(Graph, Binding), FrontendError> {
    let mut g = g.clone();
    let mut types: BTreeMap<String, DataType> = BTreeMap::new();
    let assign = |types: &mut BTreeMap<String, DataType>, name: &str, d: DataType| -> Result<(), FrontendError> {
        match types.insert(name.to_string(), d) {
            Some(prev) if prev != d => Err(FrontendError::TypeConflict {
                buffer: name.to_string(),
                first: prev,
                second: d,
            }),
            _ => Ok(()),
        }
    };
    for name in &g.inputs {
        let b = g.buffer(name).ok_or_else(|| FrontendError::Missing(name.clone()))?;
        let d = input_types
            .get(name)
            .copied()
            .or(b.dtype)
            .ok_or_else(|| FrontendError::Missing(format!("type of graph input `{name}`")))?;
        assign(&mut types, name, d)?;
    }
    for b in g.buffers() {
        if b.kind == BufferKind::Constant {
            assign(&mut types, &b.name, b.dtype.expect("constants are typed"))?;
        }
    }
    let ordered = reg.ordered_for(engine_prefs);
    let sched = topo_schedule(&g).map_err(|e| FrontendError::Missing(e.to_string()))?;
    let mut nodes = vec![None; g.nodes.len()];
    for &i in &sched.order {
        let n = &g.nodes[i];
        let ins: Vec<DataType> = n
            .inputs
            .iter()
            .map(|x| types.get(x).copied().ok_or_else(|| FrontendError::Missing(format!("type of `{x}`"))))
            .collect::<Result<_, _>>()?;
        let choice = ordered.iter().find_map(|k| {
            if !k.signature.accepts(n, &g, &ins) {
                return None;
            }
            t.engines
                .iter()
                .find(|e| e.kind == k.signature.engine && e.supports(n.op))
                .map(|e| (*k, e))
        });
        let Some((k, e)) = choice else {
            return Err(FrontendError::NoKernel {
                node: n.name.clone(),
                op: n.op.name().to_string(),
                types: ins.iter().map(|d| d.to_string()).collect(),
            });
        };
        let out_t = k.signature.output_type(&ins);
        let out = n.outputs[0].clone();
        if let Some(hint) = g.buffer(&out).and_then(|b| b.dtype) {
            if hint != out_t {
                return Err(FrontendError::TypeConflict {
                    buffer: out,
                    first: hint,
                    second: out_t,
                });
            }
        }
        assign(&mut types, &out, out_t)?;
        nodes[i] = Some(NodeBinding {
            kernel: k.id.clone(),
            engine: e.name.clone(),
        });
    }
    for b in g.buffers_mut() {
        if let Some(d) = types.get(&b.name) {
            b.dtype = Some(*d);
        }
    }
    let nodes: Vec<NodeBinding> = nodes.into_iter().map(|n| n.expect("every node is scheduled")).collect();
    let binding = Binding { nodes, types };
    attach_transients(&mut g, &binding, reg);
    let mut binding = binding;
    for b in g.buffers() {
        if b.kind == BufferKind::Transient {
            binding.types.insert(b.name.clone(), b.dtype.unwrap_or(DataType::U8));
        }
    }
    if let Some(b) = g.buffers().find(|b| b.dtype.is_none()) {
        return Err(FrontendError::Missing(format!("type of `{}`", b.name)));
    }
    Ok((g, binding))
}

/// Adds the scratch buffers kernels ask for, sized for whole tensors.
fn attach_transients(g: &mut Graph, b: &Binding, reg: &Registry) {
    for i in 0..g.nodes.len() {
        let n = g.nodes[i].clone();
        if !n.scratch.is_empty() {
            continue;
        }
        let k = reg.get(&b.nodes[i].kernel).expect("bound kernel exists");
        let shapes: Vec<Vec<usize>> = n
            .inputs
            .iter()
            .chain(&n.outputs)
            .map(|x| g.buffer(x).map(|b| b.shape.clone()).unwrap_or_default())
            .collect();
        let ranks: Vec<usize> = shapes.iter().map(Vec::len).collect();
        if let Some(expr) = k.transient_size(&n, &ranks) {
            let bytes = expr.eval(&n.attrs, &|op, d| shapes[op][d]);
            let name = g.fresh_name(&format!("{}.scratch", n.name));
            g.add_buffer(Buffer::transient(name.clone(), bytes.max(1) as usize, expr));
            g.nodes[i].scratch = vec![name];
        }
    }
}
