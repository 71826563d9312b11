use std::collections::BTreeMap;

use super::reference::*;
use super::{KernelError, Tensor};
use crate::ir::{topo_schedule, BufferKind, Graph, Node, OpKind};

fn attr(node: &Node, key: &str) -> Result<i64, KernelError> {
    node.int(key)
        .ok_or_else(|| KernelError::Param(format!("node `{}` lacks attribute `{key}`", node.name)))
}

fn attr32(node: &Node, key: &str) -> Result<i32, KernelError> {
    let v = attr(node, key)?;
    i32::try_from(v).map_err(|_| KernelError::Param(format!("attribute `{key}` = {v} overflows 32 bits")))
}

fn requant_of(node: &Node) -> Result<Requant, KernelError> {
    Requant::new(attr32(node, "mul")?, attr32(node, "shift")?, attr32(node, "zp")?)
}

pub fn softmax_params(node: &Node) -> Result<SoftmaxParams, KernelError> {
    Ok(SoftmaxParams {
        q_ln2: attr(node, "q_ln2")?,
        q_b: attr(node, "q_b")?,
        q_c: attr(node, "q_c")?,
        in_shift: attr(node, "in_shift")? as u32,
        out_bits: attr(node, "out_bits")? as u32,
        causal: node.int_or("causal", 0) != 0,
        causal_offset: node.int_or("causal_offset", 0),
    })
}

/// Evaluates `node` on one tile. `origin` is the position of the output
/// tile inside the full output; whole-tensor evaluation passes zeros.
pub fn eval_tile(node: &Node, inputs: &[&Tensor], origin: &[usize]) -> Result<Tensor, KernelError> {
    let org = |d: usize| origin.get(d).copied().unwrap_or(0);
    let y = match node.op {
        OpKind::Gemm => ref_gemm(inputs[0], inputs[1], inputs.get(2).copied(), node.int_or("trans_b", 0) == 1)?,
        OpKind::GemmQ8 => ref_requant(
            &ref_gemm(inputs[0], inputs[1], inputs.get(2).copied(), node.int_or("trans_b", 0) == 1)?,
            requant_of(node)?,
        )?,
        OpKind::ConvPw => ref_conv_pw(inputs[0], inputs[1], inputs.get(2).copied(), requant_of(node)?)?,
        OpKind::Requant => ref_requant(inputs[0], requant_of(node)?)?,
        OpKind::RmsNorm => ref_rmsnorm_i32(inputs[0], inputs[1], attr(node, "eps")?, requant_of(node)?)?,
        OpKind::Rope => ref_rope_q(
            inputs[0],
            inputs[1],
            inputs[2],
            attr(node, "head_dim")? as usize,
            attr(node, "pos_offset")? as usize,
            org(0),
            requant_of(node)?,
        )?,
        OpKind::Softmax => {
            let r = inputs[0].shape.len() as i64;
            let axis = node.int_or("axis", -1);
            if axis < -r || axis >= r {
                return Err(KernelError::Param(format!("softmax axis {axis} out of range for rank {r}")));
            }
            if axis.rem_euclid(r) != r - 1 {
                // Move the axis last, normalize, and move it back.
                let a = axis.rem_euclid(r) as usize;
                let mut perm: Vec<usize> = (0..r as usize).filter(|&d| d != a).collect();
                perm.push(a);
                let mut inv = vec![0; perm.len()];
                for (k, &p) in perm.iter().enumerate() {
                    inv[p] = k;
                }
                let p = softmax_params(node)?;
                if p.causal {
                    return Err(KernelError::Param("causal softmax needs the last axis".into()));
                }
                let t = ref_transpose(inputs[0], &perm)?;
                ref_transpose(&ref_softmax_ibert(&t, &p, 0)?, &inv)?
            } else {
                let row0 = if r >= 2 { org(r as usize - 2) } else { 0 };
                ref_softmax_ibert(inputs[0], &softmax_params(node)?, row0)?
            }
        }
        OpKind::Add => ref_add(
            inputs[0],
            inputs[1],
            attr32(node, "mul_a")?,
            attr32(node, "mul_b")?,
            attr32(node, "shift")?,
            attr32(node, "zp")?,
        )?,
        OpKind::Mul => ref_mul(inputs[0], inputs[1], requant_of(node)?)?,
        OpKind::Hardswish => ref_hardswish(inputs[0], attr32(node, "three")?, attr32(node, "six")?, requant_of(node)?)?,
        OpKind::GatherRows => ref_gather_rows(inputs[0], inputs[1])?,
        OpKind::ConcatSeq => ref_concat_seq(inputs[0], inputs[1])?,
        OpKind::Transpose => {
            let perm: Vec<usize> = node
                .ints("perm")
                .ok_or_else(|| KernelError::Param("transpose lacks `perm`".into()))?
                .iter()
                .map(|&p| p as usize)
                .collect();
            ref_transpose(inputs[0], &perm)?
        }
        OpKind::SplitHeads => ref_split_heads(inputs[0], attr(node, "heads")? as usize)?,
        OpKind::MergeHeads => ref_merge_heads(inputs[0])?,
    };
    Ok(y)
}

pub fn eval_node(node: &Node, inputs: &[&Tensor]) -> Result<Tensor, KernelError> {
    eval_tile(node, inputs, &[])
}

/// Reference interpreter: evaluates `g` node by node on whole tensors and
/// returns every buffer value.
pub fn interpret_all(g: &Graph, inputs: &BTreeMap<String, Tensor>) -> Result<BTreeMap<String, Tensor>, KernelError> {
    let mut env: BTreeMap<String, Tensor> = BTreeMap::new();
    for name in &g.inputs {
        let b = g.buffer(name).ok_or_else(|| KernelError::Missing(name.clone()))?;
        let t = inputs.get(name).ok_or_else(|| KernelError::Missing(name.clone()))?;
        if t.shape != b.shape || b.dtype.is_some_and(|d| d != t.dtype) {
            return Err(KernelError::Shape(format!(
                "input `{name}` is {} {:?}, graph declares {:?} {:?}",
                t.dtype, t.shape, b.dtype, b.shape
            )));
        }
        env.insert(name.clone(), t.clone());
    }
    for b in g.buffers() {
        if b.kind == BufferKind::Constant {
            let dt = b.dtype.expect("validated constants carry a dtype");
            let payload = b.payload.as_deref().expect("validated constants carry a payload");
            let t = Tensor::from_bytes(dt, b.shape.clone(), payload)
                .ok_or_else(|| KernelError::Shape(format!("constant `{}` payload size", b.name)))?;
            env.insert(b.name.clone(), t);
        }
    }
    let sched = topo_schedule(g).map_err(|e| KernelError::Param(e.to_string()))?;
    for &i in &sched.order {
        let n = &g.nodes[i];
        let ins: Vec<&Tensor> = n
            .inputs
            .iter()
            .map(|x| env.get(x).ok_or_else(|| KernelError::Missing(x.clone())))
            .collect::<Result<_, _>>()?;
        let y = eval_node(n, &ins).map_err(|e| KernelError::Node {
            node: n.name.clone(),
            source: Box::new(e),
        })?;
        env.insert(n.outputs[0].clone(), y);
    }
    Ok(env)
}

/// Reference interpreter returning only the graph outputs.
pub fn interpret(g: &Graph, inputs: &BTreeMap<String, Tensor>) -> Result<BTreeMap<String, Tensor>, KernelError> {
    let mut all = interpret_all(g, inputs)?;
    g.outputs
        .iter()
        .map(|o| all.remove(o).or_else(|| inputs.get(o).cloned()).map(|t| (o.clone(), t)).ok_or_else(|| KernelError::Missing(o.clone())))
        .collect()
}
