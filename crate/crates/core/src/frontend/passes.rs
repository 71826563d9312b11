//! Pattern-rewrite pass system and the shipped lowering passes.

use log::debug;

use super::FrontendError;
use crate::ir::{topo_schedule, validate, Attr, Buffer, DataType, Graph, Node, OpKind, Scope};

/// One element of a node chain pattern.
#[derive(Clone, Copy)]
pub struct PatNode {
    pub ops: &'static [OpKind],
    pub pred: Option<fn(&Node, &Graph) -> bool>,
}

/// A chain `n0 -> n1 -> ...` where each node reads the previous node's
/// output and that output has no other reader. Other inputs are wildcards.
#[derive(Clone)]
pub struct Pattern {
    pub chain: Vec<PatNode>,
}

/// Rewrite over a matched chain (node indices, head first). Returns `None`
/// to decline the match.
pub type Replace = fn(&Graph, &[usize]) -> Option<Graph>;

#[derive(Clone)]
pub struct Pass {
    pub name: &'static str,
    pub pattern: Pattern,
    pub replace: Replace,
}

impl Pattern {
    fn node_matches(p: &PatNode, n: &Node, g: &Graph) -> bool {
        p.ops.contains(&n.op) && p.pred.is_none_or(|f| f(n, g))
    }

    /// Matches starting at every node, visited in schedule order.
    pub fn matches(&self, g: &Graph, order: &[usize]) -> Vec<Vec<usize>> {
        let consumers = g.consumers();
        let mut out = Vec::new();
        'head: for &h in order {
            if !Self::node_matches(&self.chain[0], &g.nodes[h], g) {
                continue;
            }
            let mut m = vec![h];
            for p in &self.chain[1..] {
                let prev = &g.nodes[*m.last().unwrap()];
                let y = &prev.outputs[0];
                let readers = consumers.get(y.as_str()).map(Vec::as_slice).unwrap_or(&[]);
                if readers.len() != 1 || g.is_graph_io(y) {
                    continue 'head;
                }
                let next = readers[0];
                if !Self::node_matches(p, &g.nodes[next], g) {
                    continue 'head;
                }
                m.push(next);
            }
            out.push(m);
        }
        out
    }
}

/// Applies each pass to a fixed point, in list order.
pub fn apply_passes(g: &Graph, passes: &[Pass]) -> Result<Graph, FrontendError> {
    let mut g = g.clone();
    for pass in passes {
        let limit = 10 * g.nodes.len().max(1);
        let mut rewrites = 0;
        loop {
            let order = topo_schedule(&g).map_err(|e| FrontendError::Pass {
                pass: pass.name,
                message: e.to_string(),
            })?;
            let next = pass
                .pattern
                .matches(&g, &order.order)
                .iter()
                .find_map(|m| (pass.replace)(&g, m));
            let Some(ng) = next else { break };
            g = ng;
            rewrites += 1;
            if rewrites > limit {
                return Err(FrontendError::Pass {
                    pass: pass.name,
                    message: format!("no fixed point after {limit} rewrites"),
                });
            }
        }
        let diags = validate(&g);
        if !diags.is_empty() {
            return Err(FrontendError::Pass {
                pass: pass.name,
                message: diags.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; "),
            });
        }
        debug!("pass {}: {rewrites} rewrites", pass.name);
    }
    Ok(g)
}

/// Replaces `matched` nodes by `new` at the position of the first one.
fn splice(g: &Graph, matched: &[usize], new: Vec<Node>) -> Graph {
    let mut out = g.clone();
    let at = *matched.iter().min().unwrap();
    let mut nodes = Vec::with_capacity(g.nodes.len() + new.len());
    for (i, n) in g.nodes.iter().enumerate() {
        if i == at {
            nodes.extend(new.iter().cloned());
        }
        if !matched.contains(&i) {
            nodes.push(n.clone());
        }
    }
    out.nodes = nodes;
    out.prune_unused_buffers();
    out
}

fn is_gemm_row_major_b(n: &Node, _: &Graph) -> bool {
    n.int_or("trans_b", 0) == 0
}

fn swap_last_two(rank: usize) -> Vec<i64> {
    let mut p: Vec<i64> = (0..rank as i64).collect();
    p.swap(rank - 2, rank - 1);
    p
}

/// Transposes a constant's payload by `perm`.
fn transpose_constant(b: &Buffer, perm: &[usize], name: String) -> Buffer {
    let dt = b.dtype.expect("constants are typed");
    let t = crate::kernels::Tensor::from_bytes(dt, b.shape.clone(), b.payload.as_deref().unwrap()).expect("validated payload");
    let tt = crate::kernels::reference::ref_transpose(&t, perm).expect("valid permutation");
    Buffer::constant(name, tt.shape.clone(), dt, tt.to_bytes())
}

fn insert_transpose(g: &Graph, m: &[usize]) -> Option<Graph> {
    let n = &g.nodes[m[0]];
    let bname = &n.inputs[1];
    let b = g.buffer(bname)?;
    let rank = b.shape.len();
    let perm = swap_last_two(rank);
    let mut gemm = n.clone();
    gemm.attrs.insert("trans_b".into(), Attr::Int(1));
    let mut out = g.clone();
    if b.is_constant() {
        // Constant operands are transposed at compile time.
        let name = out.fresh_name(&format!("{bname}.T"));
        let p: Vec<usize> = perm.iter().map(|&v| v as usize).collect();
        out.add_buffer(transpose_constant(b, &p, name.clone()));
        gemm.inputs[1] = name;
        return Some(splice(&out, m, vec![gemm]));
    }
    let name = out.fresh_name(&format!("{bname}.T"));
    let mut shape = b.shape.clone();
    shape.swap(rank - 2, rank - 1);
    out.add_buffer(Buffer::variable(name.clone(), Scope::Local, shape, b.dtype));
    let tname = out.fresh_name(&format!("{}.transpose_b", n.name));
    let t = Node::new(tname, OpKind::Transpose, vec![bname.clone()], vec![name.clone()]).with_ints("perm", perm);
    gemm.inputs[1] = name;
    Some(splice(&out, m, vec![t, gemm]))
}

/// Rewrites GEMMs with row-major `B` to the transposed-`B` kernel form.
pub fn transpose_insertion() -> Pass {
    Pass {
        name: "transpose_insertion",
        pattern: Pattern {
            chain: vec![PatNode {
                ops: &[OpKind::Gemm, OpKind::GemmQ8],
                pred: Some(is_gemm_row_major_b),
            }],
        },
        replace: insert_transpose,
    }
}

fn fold_pair(g: &Graph, m: &[usize]) -> Option<Graph> {
    let (a, b) = (&g.nodes[m[0]], &g.nodes[m[1]]);
    let pa = a.ints("perm")?;
    let pb = b.ints("perm")?;
    // y[k] = mid[pb[k]] = x[pa[pb[k]]]
    let perm: Vec<i64> = pb.iter().map(|&k| pa[k as usize]).collect();
    let x = &a.inputs[0];
    let y = &b.outputs[0];
    let identity = perm.iter().enumerate().all(|(i, &p)| i as i64 == p);
    if identity && !g.outputs.contains(y) {
        let mut out = splice(g, m, vec![]);
        for n in &mut out.nodes {
            for i in &mut n.inputs {
                if i == y {
                    *i = x.clone();
                }
            }
        }
        out.prune_unused_buffers();
        return Some(out);
    }
    let t = Node::new(a.name.clone(), OpKind::Transpose, vec![x.clone()], vec![y.clone()]).with_ints("perm", perm);
    Some(splice(g, m, vec![t]))
}

/// Merges back-to-back transposes; cancelling pairs disappear.
pub fn transpose_folding() -> Pass {
    Pass {
        name: "transpose_folding",
        pattern: Pattern {
            chain: vec![
                PatNode {
                    ops: &[OpKind::Transpose],
                    pred: None,
                },
                PatNode {
                    ops: &[OpKind::Transpose],
                    pred: None,
                },
            ],
        },
        replace: fold_pair,
    }
}

fn fuse(g: &Graph, m: &[usize]) -> Option<Graph> {
    let (mm, rq) = (&g.nodes[m[0]], &g.nodes[m[1]]);
    let mut n = Node::new(mm.name.clone(), OpKind::GemmQ8, mm.inputs.clone(), rq.outputs.clone());
    n.attrs = mm.attrs.clone();
    for k in ["mul", "shift", "zp"] {
        n.attrs.insert(k.into(), rq.attrs.get(k)?.clone());
    }
    Some(splice(g, m, vec![n]))
}

/// `gemm -> requant` becomes one `gemm_q8`.
pub fn gemm_requant_fusion() -> Pass {
    Pass {
        name: "gemm_requant_fusion",
        pattern: Pattern {
            chain: vec![
                PatNode {
                    ops: &[OpKind::Gemm],
                    pred: None,
                },
                PatNode {
                    ops: &[OpKind::Requant],
                    pred: None,
                },
            ],
        },
        replace: fuse,
    }
}

/// Bias payload reduced to one `[O]` row, if every row is identical.
fn reducible_bias(b: &Buffer, o: usize) -> Option<Vec<u8>> {
    let p = b.payload.as_deref()?;
    let row = o * b.dtype?.bytes();
    if row == 0 || p.len() % row != 0 {
        return None;
    }
    let first = &p[..row];
    p.chunks(row).all(|r| r == first).then(|| first.to_vec())
}

fn pointwise_candidate(n: &Node, g: &Graph) -> bool {
    let Some(b) = n.inputs.get(1).and_then(|x| g.buffer(x)) else {
        return false;
    };
    if !b.is_constant() || b.shape.len() != 2 {
        return false;
    }
    let o = if n.int_or("trans_b", 0) == 1 { b.shape[0] } else { b.shape[1] };
    match n.inputs.get(2).and_then(|x| g.buffer(x)) {
        None => n.inputs.len() == 2,
        Some(c) => c.is_constant() && reducible_bias(c, o).is_some(),
    }
}

fn to_pointwise(g: &Graph, m: &[usize]) -> Option<Graph> {
    let n = &g.nodes[m[0]];
    let a = g.buffer(&n.inputs[0])?;
    let b = g.buffer(&n.inputs[1])?;
    let (mrows, k) = (a.shape[0], a.shape[1]);
    let tb = n.int_or("trans_b", 0) == 1;
    let o = if tb { b.shape[0] } else { b.shape[1] };
    let mut out = g.clone();
    let wname = out.fresh_name(&format!("{}.w", n.name));
    let mut w = if tb {
        let mut w = b.clone();
        w.name = wname.clone();
        w
    } else {
        transpose_constant(b, &[1, 0], wname.clone())
    };
    w.shape = vec![o, 1, 1, k];
    w.level = None;
    out.add_buffer(w);
    let mut inputs = vec![n.inputs[0].clone(), wname];
    if let Some(c) = n.inputs.get(2).and_then(|x| g.buffer(x)) {
        let row = reducible_bias(c, o)?;
        let cname = out.fresh_name(&format!("{}.bias", n.name));
        out.add_buffer(Buffer::constant(cname.clone(), vec![o], c.dtype.unwrap_or(DataType::I32), row));
        inputs.push(cname);
    }
    let mut conv = Node::new(n.name.clone(), OpKind::ConvPw, inputs, n.outputs.clone())
        .with_attr("h", 1)
        .with_attr("w", mrows as i64)
        .with_attr("c_in", k as i64)
        .with_attr("c_out", o as i64);
    for key in ["mul", "shift", "zp"] {
        conv.attrs.insert(key.into(), n.attrs.get(key)?.clone());
    }
    Some(splice(&out, m, vec![conv]))
}

/// Linear layers with constant weights and a row-broadcast bias become
/// pointwise convolutions: `H = 1, W = M, C_in = N, C_out = O`.
pub fn gemm_to_pointwise_pass() -> Pass {
    Pass {
        name: "gemm_to_pointwise",
        pattern: Pattern {
            chain: vec![PatNode {
                ops: &[OpKind::GemmQ8],
                pred: Some(pointwise_candidate),
            }],
        },
        replace: to_pointwise,
    }
}

pub fn gemm_to_pointwise(g: &Graph) -> Result<Graph, FrontendError> {
    apply_passes(g, &[gemm_to_pointwise_pass()])
}

/// Passes every scenario runs, in order.
pub fn default_passes() -> Vec<Pass> {
    vec![transpose_insertion(), transpose_folding(), gemm_requant_fusion()]
}
