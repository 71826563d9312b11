//! Text graph format: a JSON document with `tensors`, `nodes` and `io`
//! sections plus a sidecar little-endian weight blob. The layout is
//! documented in `docs/graph-format.md`.

use serde::{Deserialize, Serialize};

use super::{validate, Attrs, Buffer, BufferKind, DataType, Graph, IrError, Node, OpKind, Scope, SizeExpr};

pub const GRAPH_FORMAT_VERSION: u32 = 1;

/// Constant payloads start at multiples of this many bytes in the blob.
const BLOB_ALIGN: usize = 4;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphDoc {
    version: u32,
    name: String,
    tensors: Vec<TensorDoc>,
    nodes: Vec<NodeDoc>,
    io: IoDoc,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorDoc {
    name: String,
    kind: BufferKind,
    scope: Scope,
    shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dtype: Option<DataType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    level: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    offset: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    length: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    size_expr: Option<SizeExpr>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeDoc {
    name: String,
    op: String,
    #[serde(default, skip_serializing_if = "Attrs::is_empty")]
    attrs: Attrs,
    inputs: Vec<String>,
    outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    scratch: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IoDoc {
    inputs: Vec<String>,
    outputs: Vec<String>,
}

/// Serializes `g` into its text document and weight blob.
pub fn serialize_graph(g: &Graph) -> (String, Vec<u8>) {
    let mut blob = Vec::new();
    let tensors = g
        .buffers()
        .map(|b| {
            let (offset, length) = match &b.payload {
                Some(p) => {
                    blob.resize(blob.len().next_multiple_of(BLOB_ALIGN), 0);
                    let off = blob.len();
                    blob.extend_from_slice(p);
                    (Some(off), Some(p.len()))
                }
                None => (None, None),
            };
            TensorDoc {
                name: b.name.clone(),
                kind: b.kind,
                scope: b.scope,
                shape: b.shape.clone(),
                dtype: b.dtype,
                level: b.level.clone(),
                offset,
                length,
                size_expr: b.size_expr.clone(),
            }
        })
        .collect();
    let nodes = g
        .nodes
        .iter()
        .map(|n| NodeDoc {
            name: n.name.clone(),
            op: n.op.name().to_string(),
            attrs: n.attrs.clone(),
            inputs: n.inputs.clone(),
            outputs: n.outputs.clone(),
            scratch: n.scratch.clone(),
        })
        .collect();
    let doc = GraphDoc {
        version: GRAPH_FORMAT_VERSION,
        name: g.name.clone(),
        tensors,
        nodes,
        io: IoDoc {
            inputs: g.inputs.clone(),
            outputs: g.outputs.clone(),
        },
    };
    let mut text = serde_json::to_string_pretty(&doc).expect("graph documents always serialize");
    text.push('\n');
    (text, blob)
}

/// Parses and validates a graph document, materializing constant payloads
/// from `weights`.
pub fn parse_graph(text: &str, weights: &[u8]) -> Result<Graph, IrError> {
    let doc: GraphDoc = serde_json::from_str(text).map_err(|e| IrError::Malformed(e.to_string()))?;
    if doc.version != GRAPH_FORMAT_VERSION {
        return Err(IrError::Version(doc.version));
    }
    let mut g = Graph::new(doc.name);
    for t in doc.tensors {
        if g.buffer(&t.name).is_some() {
            return Err(IrError::Buffer {
                buffer: t.name,
                message: "declared twice".into(),
            });
        }
        let payload = match (t.kind, t.offset, t.length) {
            (BufferKind::Constant, Some(off), Some(len)) => {
                let end = off.checked_add(len).filter(|&e| e <= weights.len()).ok_or_else(|| IrError::Buffer {
                    buffer: t.name.clone(),
                    message: format!("payload [{off}, +{len}) outside the {}-byte weight blob", weights.len()),
                })?;
                let dtype = t.dtype.ok_or_else(|| IrError::Buffer {
                    buffer: t.name.clone(),
                    message: "constant needs a dtype".into(),
                })?;
                let want = t.shape.iter().product::<usize>() * dtype.bytes();
                if want != len {
                    return Err(IrError::Buffer {
                        buffer: t.name,
                        message: format!("shape {:?} of {dtype} needs {want} bytes, payload has {len}", t.shape),
                    });
                }
                Some(weights[off..end].into())
            }
            (BufferKind::Constant, _, _) => {
                return Err(IrError::Buffer {
                    buffer: t.name,
                    message: "constant without payload offset/length".into(),
                })
            }
            (_, None, None) => None,
            _ => {
                return Err(IrError::Buffer {
                    buffer: t.name,
                    message: "only constants may reference the weight blob".into(),
                })
            }
        };
        g.add_buffer(Buffer {
            name: t.name,
            kind: t.kind,
            scope: t.scope,
            shape: t.shape,
            dtype: t.dtype,
            level: t.level,
            payload,
            size_expr: t.size_expr,
        });
    }
    for n in doc.nodes {
        let op: OpKind = n.op.parse().map_err(|op| IrError::UnknownOp {
            node: n.name.clone(),
            op,
        })?;
        g.add_node(Node {
            name: n.name,
            op,
            attrs: n.attrs,
            inputs: n.inputs,
            outputs: n.outputs,
            scratch: n.scratch,
        });
    }
    g.inputs = doc.io.inputs;
    g.outputs = doc.io.outputs;
    let diags = validate(&g);
    if diags.is_empty() {
        Ok(g)
    } else {
        Err(IrError::Invalid(diags))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_gemm() -> Graph {
        let mut g = Graph::new("gemm");
        g.add_buffer(Buffer::variable("a", Scope::Global, vec![4, 8], Some(DataType::I8)));
        g.add_buffer(Buffer::constant("b", vec![8, 2], DataType::I8, (0..16).map(|i| i as u8).collect()));
        g.add_buffer(Buffer::variable("y", Scope::Global, vec![4, 2], None));
        g.add_node(Node::new("mm", OpKind::Gemm, vec!["a".into(), "b".into()], vec!["y".into()]));
        g.inputs = vec!["a".into()];
        g.outputs = vec!["y".into()];
        g
    }

    #[test]
    fn identity_graph() {
        let text = r#"{"version":1,"name":"id","tensors":[{"name":"x","kind":"variable","scope":"global","shape":[3],"dtype":"int8"}],"nodes":[],"io":{"inputs":["x"],"outputs":["x"]}}"#;
        let g = parse_graph(text, &[]).unwrap();
        assert!(g.nodes.is_empty());
        assert_eq!(g.outputs, vec!["x".to_string()]);
    }

    #[test]
    fn gemm_constant_roundtrip() {
        let g = single_gemm();
        let (text, blob) = serialize_graph(&g);
        let back = parse_graph(&text, &blob).unwrap();
        assert_eq!(back.nodes.len(), 1);
        assert_eq!(back.buffer("b").unwrap().kind, BufferKind::Constant);
        assert_eq!(back, g);
        assert_eq!(serialize_graph(&back), (text, blob));
    }

    #[test]
    fn errors_name_their_subject() {
        let g = single_gemm();
        let (text, blob) = serialize_graph(&g);
        let bad_op = text.replace("\"gemm\"", "\"frobnicate\"");
        match parse_graph(&bad_op, &blob) {
            Err(IrError::UnknownOp { node, op }) => assert_eq!((node.as_str(), op.as_str()), ("mm", "frobnicate")),
            other => panic!("{other:?}"),
        }
        match parse_graph(&text, &blob[..10]) {
            Err(IrError::Buffer { buffer, .. }) => assert_eq!(buffer, "b"),
            other => panic!("{other:?}"),
        }
        let dangling = text.replace("\"outputs\": [\n        \"y\"", "\"outputs\": [\n        \"zz\"");
        assert!(matches!(parse_graph(&dangling, &blob), Err(IrError::Invalid(_))));
        assert!(matches!(parse_graph("{", &blob), Err(IrError::Malformed(_))));
    }
}
