//! Graph, buffer and schedule representation shared by every pipeline stage.
//!
//! A [`Graph`] is an SSA-like operator graph. Every tensor is a named
//! [`Buffer`] of one of three kinds: `Variable` (inputs, outputs and
//! activations), `Constant` (weights, tables, requantization data) and
//! `Transient` (kernel scratch, sized from the kernel's tile shape). Graphs
//! are immutable values; passes build new graphs.

mod format;
mod ops;
mod schedule;
mod validate;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

pub use format::{parse_graph, serialize_graph, GRAPH_FORMAT_VERSION};
pub use ops::{infer_output_shapes, OpKind};
pub use schedule::{topo_schedule, Schedule};
pub use validate::{validate, DiagKind, Diagnostic};

/// Integer element type of a buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct DataType {
    pub bits: u8,
    pub signed: bool,
}

impl DataType {
    pub const I8: DataType = DataType { bits: 8, signed: true };
    pub const U8: DataType = DataType { bits: 8, signed: false };
    pub const I16: DataType = DataType { bits: 16, signed: true };
    pub const I32: DataType = DataType { bits: 32, signed: true };

    pub fn name(&self) -> &'static str {
        match (self.bits, self.signed) {
            (8, true) => "int8",
            (8, false) => "uint8",
            (16, true) => "int16",
            (16, false) => "uint16",
            (32, true) => "int32",
            _ => "uint32",
        }
    }

    pub fn bytes(&self) -> usize {
        self.bits as usize / 8
    }

    pub fn c_type(&self) -> String {
        format!("{}_t", self.name())
    }

    pub fn from_name(name: &str) -> Option<DataType> {
        let (bits, signed) = match name {
            "int8" => (8, true),
            "uint8" => (8, false),
            "int16" => (16, true),
            "uint16" => (16, false),
            "int32" => (32, true),
            "uint32" => (32, false),
            _ => return None,
        };
        Some(DataType { bits, signed })
    }
}

impl fmt::Display for DataType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl TryFrom<String> for DataType {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        DataType::from_name(&s).ok_or_else(|| format!("unknown data type `{s}`"))
    }
}

impl From<DataType> for String {
    fn from(d: DataType) -> String {
        d.name().to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferKind {
    Variable,
    Constant,
    Transient,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Global,
    Local,
}

/// Affine-plus-product size expression for transient buffers, evaluated
/// once the tile shapes of the owning node are known.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeExpr {
    Const(i64),
    Attr(String),
    TileDim { operand: usize, dim: usize },
    Sum(Vec<SizeExpr>),
    Product(Vec<SizeExpr>),
}

impl SizeExpr {
    pub fn eval(&self, attrs: &Attrs, tile_dim: &dyn Fn(usize, usize) -> usize) -> i64 {
        match self {
            SizeExpr::Const(c) => *c,
            SizeExpr::Attr(a) => attrs.get(a).and_then(Attr::as_int).unwrap_or(0),
            SizeExpr::TileDim { operand, dim } => tile_dim(*operand, *dim) as i64,
            SizeExpr::Sum(terms) => terms.iter().map(|t| t.eval(attrs, tile_dim)).sum(),
            SizeExpr::Product(terms) => terms.iter().map(|t| t.eval(attrs, tile_dim)).product(),
        }
    }
}

impl fmt::Display for SizeExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SizeExpr::Const(c) => write!(f, "{c}"),
            SizeExpr::Attr(a) => write!(f, "{a}"),
            SizeExpr::TileDim { operand, dim } => write!(f, "tile[{operand}][{dim}]"),
            SizeExpr::Sum(t) | SizeExpr::Product(t) => {
                let sep = if matches!(self, SizeExpr::Sum(_)) { " + " } else { " * " };
                f.write_str("(")?;
                for (i, term) in t.iter().enumerate() {
                    if i > 0 {
                        f.write_str(sep)?;
                    }
                    write!(f, "{term}")?;
                }
                f.write_str(")")
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Buffer {
    pub name: String,
    pub kind: BufferKind,
    pub scope: Scope,
    /// Element shape. Transient buffers carry a single entry: their untiled
    /// byte size.
    pub shape: Vec<usize>,
    pub dtype: Option<DataType>,
    pub level: Option<String>,
    pub payload: Option<Arc<[u8]>>,
    pub size_expr: Option<SizeExpr>,
}

impl Buffer {
    pub fn variable(name: impl Into<String>, scope: Scope, shape: Vec<usize>, dtype: Option<DataType>) -> Self {
        Buffer {
            name: name.into(),
            kind: BufferKind::Variable,
            scope,
            shape,
            dtype,
            level: None,
            payload: None,
            size_expr: None,
        }
    }

    pub fn constant(name: impl Into<String>, shape: Vec<usize>, dtype: DataType, payload: Vec<u8>) -> Self {
        Buffer {
            name: name.into(),
            kind: BufferKind::Constant,
            scope: Scope::Global,
            shape,
            dtype: Some(dtype),
            level: None,
            payload: Some(payload.into()),
            size_expr: None,
        }
    }

    pub fn transient(name: impl Into<String>, bytes: usize, expr: SizeExpr) -> Self {
        Buffer {
            name: name.into(),
            kind: BufferKind::Transient,
            scope: Scope::Local,
            shape: vec![bytes],
            dtype: Some(DataType::U8),
            level: None,
            payload: None,
            size_expr: Some(expr),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Size in bytes, or `None` while the element type is unknown.
    pub fn size_bytes(&self) -> Option<usize> {
        self.dtype.map(|d| self.numel() * d.bytes())
    }

    pub fn is_constant(&self) -> bool {
        self.kind == BufferKind::Constant
    }
}

/// Node attribute value.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Attr {
    Int(i64),
    Ints(Vec<i64>),
}

impl Attr {
    pub fn as_int(&self) -> Option<i64> {
        match self {
            Attr::Int(v) => Some(*v),
            Attr::Ints(_) => None,
        }
    }

    pub fn as_ints(&self) -> Option<&[i64]> {
        match self {
            Attr::Ints(v) => Some(v),
            Attr::Int(_) => None,
        }
    }
}

pub type Attrs = BTreeMap<String, Attr>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub op: OpKind,
    pub attrs: Attrs,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    /// Transient buffers used by the node's kernel.
    pub scratch: Vec<String>,
}

impl Node {
    pub fn new(name: impl Into<String>, op: OpKind, inputs: Vec<String>, outputs: Vec<String>) -> Self {
        Node {
            name: name.into(),
            op,
            attrs: Attrs::new(),
            inputs,
            outputs,
            scratch: Vec::new(),
        }
    }

    pub fn with_attr(mut self, key: &str, value: i64) -> Self {
        self.attrs.insert(key.to_string(), Attr::Int(value));
        self
    }

    pub fn with_ints(mut self, key: &str, value: Vec<i64>) -> Self {
        self.attrs.insert(key.to_string(), Attr::Ints(value));
        self
    }

    pub fn int(&self, key: &str) -> Option<i64> {
        self.attrs.get(key).and_then(Attr::as_int)
    }

    pub fn int_or(&self, key: &str, default: i64) -> i64 {
        self.int(key).unwrap_or(default)
    }

    pub fn ints(&self, key: &str) -> Option<&[i64]> {
        self.attrs.get(key).and_then(Attr::as_ints)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum IrError {
    #[error("malformed graph document: {0}")]
    Malformed(String),
    #[error("unsupported graph format version {0}")]
    Version(u32),
    #[error("unknown op kind `{op}` in node `{node}`")]
    UnknownOp { node: String, op: String },
    #[error("buffer `{buffer}`: {message}")]
    Buffer { buffer: String, message: String },
    #[error("node `{node}`: {message}")]
    Node { node: String, message: String },
    #[error("invalid graph: {}", .0.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Diagnostic>),
    #[error("cycle detected through nodes {0:?}")]
    Cycle(Vec<String>),
}

/// Operator graph. Buffers keep declaration order; lookups are by name.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Graph {
    pub name: String,
    buffers: IndexMap<String, Buffer>,
    pub nodes: Vec<Node>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

impl Graph {
    pub fn new(name: impl Into<String>) -> Self {
        Graph {
            name: name.into(),
            ..Default::default()
        }
    }

    /// Adds (or replaces) a buffer, keeping its declaration position on
    /// replacement.
    pub fn add_buffer(&mut self, buffer: Buffer) {
        self.buffers.insert(buffer.name.clone(), buffer);
    }

    pub fn remove_buffer(&mut self, name: &str) -> Option<Buffer> {
        self.buffers.shift_remove(name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Buffer> {
        self.buffers.get(name)
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Buffer> {
        self.buffers.get_mut(name)
    }

    pub fn buffers(&self) -> impl Iterator<Item = &Buffer> {
        self.buffers.values()
    }

    pub fn buffers_mut(&mut self) -> impl Iterator<Item = &mut Buffer> {
        self.buffers.values_mut()
    }

    pub fn buffer_count(&self) -> usize {
        self.buffers.len()
    }

    pub fn add_node(&mut self, node: Node) {
        self.nodes.push(node);
    }

    pub fn node(&self, name: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.name == name)
    }

    /// Map buffer name -> index of the node writing it.
    pub fn producers(&self) -> BTreeMap<&str, usize> {
        let mut map = BTreeMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            for o in &n.outputs {
                map.entry(o.as_str()).or_insert(i);
            }
        }
        map
    }

    /// Map buffer name -> indices of nodes reading it, ascending.
    pub fn consumers(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            for inp in &n.inputs {
                let e = map.entry(inp.as_str()).or_default();
                if e.last() != Some(&i) {
                    e.push(i);
                }
            }
        }
        map
    }

    /// Producer -> consumer edges between node indices, deduplicated.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let producers = self.producers();
        let mut edges = Vec::new();
        for (c, n) in self.nodes.iter().enumerate() {
            for inp in &n.inputs {
                if let Some(&p) = producers.get(inp.as_str()) {
                    edges.push((p, c));
                }
            }
        }
        edges.sort_unstable();
        edges.dedup();
        edges
    }

    pub fn is_graph_io(&self, name: &str) -> bool {
        self.inputs.iter().any(|i| i == name) || self.outputs.iter().any(|o| o == name)
    }

    /// Replaces the buffer table wholesale, e.g. after dropping dead buffers.
    pub fn retain_buffers(&mut self, mut keep: impl FnMut(&Buffer) -> bool) {
        self.buffers.retain(|_, b| keep(b));
    }

    /// Drops buffers no node, scratch list or graph I/O references.
    pub fn prune_unused_buffers(&mut self) {
        let mut used = std::collections::BTreeSet::new();
        for n in &self.nodes {
            used.extend(n.inputs.iter().cloned());
            used.extend(n.outputs.iter().cloned());
            used.extend(n.scratch.iter().cloned());
        }
        used.extend(self.inputs.iter().cloned());
        used.extend(self.outputs.iter().cloned());
        self.buffers.retain(|name, _| used.contains(name));
    }

    /// Returns a buffer name not yet used, derived from `base`.
    pub fn fresh_name(&self, base: &str) -> String {
        if self.buffer(base).is_none() && self.node(base).is_none() {
            return base.to_string();
        }
        (1..)
            .map(|i| format!("{base}.{i}"))
            .find(|n| self.buffer(n).is_none() && self.node(n).is_none())
            .expect("unbounded")
    }
}
