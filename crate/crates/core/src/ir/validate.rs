use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use super::{BufferKind, Graph};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DiagKind {
    Cycle,
    PayloadSize,
    DanglingRef,
    Duplicate,
    MultipleWriters,
    Undefined,
    Schema,
    Shape,
}

impl DiagKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DiagKind::Cycle => "cycle",
            DiagKind::PayloadSize => "payload size",
            DiagKind::DanglingRef => "dangling reference",
            DiagKind::Duplicate => "duplicate name",
            DiagKind::MultipleWriters => "multiple writers",
            DiagKind::Undefined => "undefined value",
            DiagKind::Schema => "schema",
            DiagKind::Shape => "shape",
        }
    }
}

/// One violated graph invariant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Diagnostic {
    pub kind: DiagKind,
    /// Node or buffer names involved.
    pub subjects: Vec<String>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} [{}]: {}", self.kind.as_str(), self.subjects.join(", "), self.message)
    }
}

fn diag(kind: DiagKind, subjects: &[&str], message: impl Into<String>) -> Diagnostic {
    Diagnostic {
        kind,
        subjects: subjects.iter().map(|s| s.to_string()).collect(),
        message: message.into(),
    }
}

/// Checks every structural invariant of `g`; an empty list means valid.
pub fn validate(g: &Graph) -> Vec<Diagnostic> {
    let mut out = Vec::new();

    for b in g.buffers() {
        if b.shape.is_empty() || b.shape.contains(&0) {
            out.push(diag(DiagKind::Shape, &[&b.name], format!("non-positive shape {:?}", b.shape)));
        }
        match b.kind {
            BufferKind::Constant => match (&b.payload, b.dtype) {
                (Some(p), Some(dt)) => {
                    let want = b.numel() * dt.bytes();
                    if p.len() != want {
                        out.push(diag(
                            DiagKind::PayloadSize,
                            &[&b.name],
                            format!("payload is {} bytes, shape {:?} of {} needs {}", p.len(), b.shape, dt, want),
                        ));
                    }
                }
                (None, _) => out.push(diag(DiagKind::PayloadSize, &[&b.name], "constant without payload")),
                (Some(_), None) => out.push(diag(DiagKind::Schema, &[&b.name], "constant without data type")),
            },
            _ => {
                if b.payload.is_some() {
                    out.push(diag(DiagKind::PayloadSize, &[&b.name], "only constants carry a payload"));
                }
            }
        }
    }

    let mut names = BTreeSet::new();
    for n in &g.nodes {
        if !names.insert(n.name.as_str()) {
            out.push(diag(DiagKind::Duplicate, &[&n.name], "node name declared twice"));
        }
    }

    let inputs: BTreeSet<&str> = g.inputs.iter().map(String::as_str).collect();
    let mut writers: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for n in &g.nodes {
        for r in n.inputs.iter().chain(&n.outputs).chain(&n.scratch) {
            if g.buffer(r).is_none() {
                out.push(diag(DiagKind::DanglingRef, &[&n.name, r], "references an undeclared buffer"));
            }
        }
        for o in &n.outputs {
            writers.entry(o).or_default().push(&n.name);
            if let Some(b) = g.buffer(o) {
                if b.kind != BufferKind::Variable {
                    out.push(diag(DiagKind::Schema, &[&n.name, o], "node output must be a variable buffer"));
                }
            }
            if inputs.contains(o.as_str()) {
                out.push(diag(DiagKind::MultipleWriters, &[&n.name, o], "node writes a graph input"));
            }
        }
        for s in &n.scratch {
            if let Some(b) = g.buffer(s) {
                if b.kind != BufferKind::Transient {
                    out.push(diag(DiagKind::Schema, &[&n.name, s], "scratch buffer must be transient"));
                }
            }
        }
        out.extend(check_schema(g, n));
    }
    for (buf, ws) in &writers {
        if ws.len() > 1 {
            let mut subjects = vec![*buf];
            subjects.extend(ws.iter().copied());
            out.push(diag(DiagKind::MultipleWriters, &subjects, format!("written by {} nodes", ws.len())));
        }
    }
    let defined = |name: &str| {
        inputs.contains(name)
            || writers.contains_key(name)
            || g.buffer(name).is_some_and(|b| b.kind == BufferKind::Constant)
    };
    for n in &g.nodes {
        for i in &n.inputs {
            if g.buffer(i).is_some() && !defined(i) {
                out.push(diag(DiagKind::Undefined, &[&n.name, i], "input is never produced"));
            }
        }
    }
    for name in g.inputs.iter().chain(&g.outputs) {
        if g.buffer(name).is_none() {
            out.push(diag(DiagKind::DanglingRef, &[name], "graph I/O references an undeclared buffer"));
        }
    }
    for o in &g.outputs {
        if g.buffer(o).is_some() && !defined(o) {
            out.push(diag(DiagKind::Undefined, &[o], "graph output is not reachable from inputs or constants"));
        }
    }

    for scc in cyclic_components(g) {
        let names: Vec<&str> = scc.iter().map(|&i| g.nodes[i].name.as_str()).collect();
        out.push(diag(DiagKind::Cycle, &names, "nodes form a dependency cycle"));
    }
    out
}

fn check_schema(g: &Graph, n: &super::Node) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let schema = n.op.schema();
    for req in schema.required {
        if !n.attrs.contains_key(*req) {
            out.push(diag(DiagKind::Schema, &[&n.name], format!("missing attribute `{req}` for {}", n.op)));
        }
    }
    for key in n.attrs.keys() {
        if !schema.required.contains(&key.as_str()) && !schema.optional.contains(&key.as_str()) {
            out.push(diag(DiagKind::Schema, &[&n.name], format!("unknown attribute `{key}` for {}", n.op)));
        }
    }
    if n.outputs.len() != 1 {
        out.push(diag(DiagKind::Schema, &[&n.name], format!("{} has exactly one output", n.op)));
        return out;
    }
    if !out.is_empty() {
        return out;
    }
    let shapes: Option<Vec<&[usize]>> = n.inputs.iter().map(|i| g.buffer(i).map(|b| b.shape.as_slice())).collect();
    let (Some(shapes), Some(ob)) = (shapes, g.buffer(&n.outputs[0])) else {
        return out;
    };
    match super::infer_output_shapes(n, &shapes) {
        Ok(inferred) => {
            if inferred[0] != ob.shape {
                out.push(diag(
                    DiagKind::Shape,
                    &[&n.name, &ob.name],
                    format!("declared shape {:?}, inferred {:?}", ob.shape, inferred[0]),
                ));
            }
        }
        Err(e) => out.push(diag(DiagKind::Shape, &[&n.name], e)),
    }
    out
}

/// Strongly connected components that contain a cycle (Tarjan).
fn cyclic_components(g: &Graph) -> Vec<Vec<usize>> {
    let n = g.nodes.len();
    let mut adj = vec![Vec::new(); n];
    let mut self_loop = vec![false; n];
    for (c, node) in g.nodes.iter().enumerate() {
        for i in &node.inputs {
            // Every writer of a buffer counts, so cycles through duplicated
            // writers are still reported.
            for (p, pn) in g.nodes.iter().enumerate() {
                if pn.outputs.contains(i) {
                    if p == c {
                        self_loop[c] = true;
                    }
                    adj[p].push(c);
                }
            }
        }
    }

    struct State {
        index: Vec<Option<usize>>,
        low: Vec<usize>,
        on_stack: Vec<bool>,
        stack: Vec<usize>,
        next: usize,
        out: Vec<Vec<usize>>,
    }
    let mut st = State {
        index: vec![None; n],
        low: vec![0; n],
        on_stack: vec![false; n],
        stack: Vec::new(),
        next: 0,
        out: Vec::new(),
    };
    // Iterative Tarjan to stay clear of recursion limits on deep graphs.
    for root in 0..n {
        if st.index[root].is_some() {
            continue;
        }
        let mut work: Vec<(usize, usize)> = vec![(root, 0)];
        while let Some(&mut (v, ref mut ei)) = work.last_mut() {
            if *ei == 0 && st.index[v].is_none() {
                st.index[v] = Some(st.next);
                st.low[v] = st.next;
                st.next += 1;
                st.stack.push(v);
                st.on_stack[v] = true;
            }
            if *ei < adj[v].len() {
                let w = adj[v][*ei];
                *ei += 1;
                match st.index[w] {
                    None => work.push((w, 0)),
                    Some(iw) if st.on_stack[w] => st.low[v] = st.low[v].min(iw),
                    _ => {}
                }
            } else {
                work.pop();
                if let Some(&(parent, _)) = work.last() {
                    st.low[parent] = st.low[parent].min(st.low[v]);
                }
                if Some(st.low[v]) == st.index[v] {
                    let mut comp = Vec::new();
                    loop {
                        let w = st.stack.pop().expect("tarjan stack");
                        st.on_stack[w] = false;
                        comp.push(w);
                        if w == v {
                            break;
                        }
                    }
                    if comp.len() > 1 || self_loop[v] {
                        comp.sort_unstable();
                        st.out.push(comp);
                    }
                }
            }
        }
    }
    st.out.sort();
    st.out
}
