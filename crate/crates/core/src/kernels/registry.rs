use std::fmt;

use crate::ir::{DataType, Graph, Node, OpKind, SizeExpr};
use crate::target::EngineKind;

use super::KernelError;

/// Accepted element type of one operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TypePat {
    Exact(DataType),
    /// Any type; the output may mirror it.
    Any,
}

impl TypePat {
    fn matches(&self, d: DataType) -> bool {
        match self {
            TypePat::Exact(e) => *e == d,
            TypePat::Any => true,
        }
    }
}

impl fmt::Display for TypePat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TypePat::Exact(d) => write!(f, "{d}"),
            TypePat::Any => f.write_str("T"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutType {
    Exact(DataType),
    SameAsInput(usize),
}

/// Extra applicability test on the node itself (layout flags, constant
/// operands).
pub type Predicate = fn(&Node, &Graph) -> bool;

#[derive(Clone, Debug)]
pub struct KernelSignature {
    pub op: OpKind,
    pub engine: EngineKind,
    /// Patterns for the leading inputs; inputs past `required` are optional.
    pub inputs: Vec<TypePat>,
    pub required: usize,
    pub output: OutType,
    pub predicate: Option<(&'static str, Predicate)>,
}

impl KernelSignature {
    pub fn accepts(&self, node: &Node, g: &Graph, types: &[DataType]) -> bool {
        node.op == self.op
            && types.len() >= self.required
            && types.len() <= self.inputs.len()
            && types.iter().zip(&self.inputs).all(|(t, p)| p.matches(*t))
            && self.predicate.is_none_or(|(_, p)| p(node, g))
    }

    pub fn output_type(&self, types: &[DataType]) -> DataType {
        match self.output {
            OutType::Exact(d) => d,
            OutType::SameAsInput(i) => types[i],
        }
    }
}

impl fmt::Display for KernelSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ins: Vec<String> = self
            .inputs
            .iter()
            .enumerate()
            .map(|(i, p)| if i < self.required { p.to_string() } else { format!("{p}?") })
            .collect();
        let out = match self.output {
            OutType::Exact(d) => d.to_string(),
            OutType::SameAsInput(_) => "T".into(),
        };
        write!(f, "{}@{}({}) -> {}", self.op, self.engine.name(), ins.join(", "), out)?;
        if let Some((name, _)) = self.predicate {
            write!(f, " where {name}")?;
        }
        Ok(())
    }
}

/// Operand index in tile rules: inputs first, then the output.
pub type OperandDim = (usize, usize);

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TileRule {
    /// Two operand dimensions share tile extent and origin.
    Equal(OperandDim, OperandDim),
    /// Dimension is never tiled.
    Untileable(OperandDim),
    /// Tile extent is a multiple of `k`, or the full extent.
    MultipleOrFull(OperandDim, usize),
}

/// Tiling rules of a kernel, geometric ones (implementation independent)
/// kept apart from platform-specific ones.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TileConstraintSpec {
    pub geometric: Vec<TileRule>,
    pub platform: Vec<TileRule>,
}

impl TileConstraintSpec {
    pub fn rules(&self) -> impl Iterator<Item = &TileRule> {
        self.geometric.iter().chain(&self.platform)
    }

    /// Output dimension that input dimension `(operand, dim)` follows, if
    /// any; otherwise the dimension is read whole.
    pub fn follows(&self, operand: OperandDim, out: usize) -> Option<usize> {
        self.geometric.iter().find_map(|r| match r {
            TileRule::Equal(a, b) if *a == operand && b.0 == out => Some(b.1),
            TileRule::Equal(b, a) if *a == operand && b.0 == out => Some(b.1),
            _ => None,
        })
    }

    /// Box of input `operand` (of shape `shape`) read for the output tile
    /// `[origin, origin + extent)`; `out` is the output's operand index.
    pub fn input_region(
        &self,
        operand: usize,
        shape: &[usize],
        out: usize,
        origin: &[usize],
        extent: &[usize],
    ) -> (Vec<usize>, Vec<usize>) {
        (0..shape.len())
            .map(|d| match self.follows((operand, d), out) {
                Some(k) => (origin[k], extent[k]),
                None => (0, shape[d]),
            })
            .unzip()
    }

    /// Whether output dim `d` must stay whole, directly or through an
    /// untileable input dimension tied to it.
    pub fn output_dim_untileable(&self, out: usize, d: usize) -> bool {
        self.rules().any(|r| match r {
            TileRule::Untileable(x) => *x == (out, d) || self.follows(*x, out) == Some(d),
            _ => false,
        })
    }
}

/// Code generation passes every template runs through, in order.
pub const CODEGEN_PASSES: [&str; 4] = ["instantiate", "bind_pointers", "tile_loop", "closure"];

#[derive(Clone, Debug)]
pub struct KernelTemplate {
    pub id: String,
    pub signature: KernelSignature,
    /// C call with `{hole}` placeholders.
    pub template: &'static str,
    pub passes: &'static [&'static str],
}

impl KernelTemplate {
    /// Names of the template's holes in order of appearance.
    pub fn holes(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        let mut rest = self.template;
        while let Some(s) = rest.find('{') {
            let e = rest[s..].find('}').expect("template holes are closed") + s;
            out.push(&rest[s + 1..e]);
            rest = &rest[e + 1..];
        }
        out
    }

    /// Fills every hole; a hole without a binding is an error.
    pub fn instantiate(&self, bind: &dyn Fn(&str) -> Option<String>) -> Result<String, KernelError> {
        let mut out = String::new();
        let mut rest = self.template;
        while let Some(s) = rest.find('{') {
            let e = rest[s..].find('}').expect("template holes are closed") + s;
            out.push_str(&rest[..s]);
            let hole = &rest[s + 1..e];
            out.push_str(&bind(hole).ok_or_else(|| KernelError::UnboundHole {
                kernel: self.id.clone(),
                hole: hole.to_string(),
            })?);
            rest = &rest[e + 1..];
        }
        out.push_str(rest);
        Ok(out)
    }

    pub fn tile_constraints(&self, node: &Node, ranks: &[usize]) -> TileConstraintSpec {
        tile_constraints_for(node.op, self.signature.engine, node, ranks)
    }

    /// Scratch the kernel needs per call, as an expression over tile dims.
    pub fn transient_size(&self, node: &Node, ranks: &[usize]) -> Option<SizeExpr> {
        transient_size(node.op, ranks)
    }

    /// Work per call: multiply-accumulates for matmul kinds, output
    /// elements otherwise.
    pub fn work(&self, node: &Node, in_tiles: &[Vec<usize>], out_tile: &[usize]) -> u64 {
        work(node, in_tiles, out_tile)
    }
}

fn trans_b(n: &Node, _: &Graph) -> bool {
    n.int_or("trans_b", 0) == 1
}

fn constant_weight(n: &Node, g: &Graph) -> bool {
    n.inputs.get(1).and_then(|w| g.buffer(w)).is_some_and(|b| b.is_constant())
}

/// Ordered kernel registry. Lookups return the first matching template.
#[derive(Clone, Debug)]
pub struct Registry {
    templates: Vec<KernelTemplate>,
}

impl Default for Registry {
    fn default() -> Self {
        Registry::builtin()
    }
}

impl Registry {
    pub fn builtin() -> Registry {
        use DataType as D;
        use TypePat::{Any, Exact};
        let i8_ = Exact(D::I8);
        let i32_ = Exact(D::I32);
        let i16_ = Exact(D::I16);
        let mut templates = Vec::new();
        let mut add = |op: OpKind,
                       engine: EngineKind,
                       inputs: Vec<TypePat>,
                       required: usize,
                       output: OutType,
                       predicate: Option<(&'static str, Predicate)>,
                       template: &'static str| {
            templates.push(KernelTemplate {
                id: format!("{}@{}", op.name(), engine.name()),
                signature: KernelSignature {
                    op,
                    engine,
                    inputs,
                    required,
                    output,
                    predicate,
                },
                template,
                passes: &CODEGEN_PASSES,
            });
        };
        add(
            OpKind::ConvPw,
            EngineKind::ConvNpu,
            vec![i8_, i8_, i32_],
            2,
            OutType::Exact(D::I8),
            Some(("constant weights", constant_weight)),
            "td_conv_pw({in0}, {in1}, {in2}, {out}, {w}, {cin}, {cout}, {mul}, {shift}, {zp});",
        );
        for engine in [EngineKind::MultiCoreCluster, EngineKind::ScalarCore] {
            add(
                OpKind::GemmQ8,
                engine,
                vec![i8_, i8_, i32_],
                2,
                OutType::Exact(D::I8),
                Some(("trans_b", trans_b)),
                "td_gemm_q8({in0}, {in1}, {in2}, {out}, {batch}, {m}, {n}, {o}, {bias_mode}, {mul}, {shift}, {zp});",
            );
            add(
                OpKind::Gemm,
                engine,
                vec![i8_, i8_, i32_],
                2,
                OutType::Exact(D::I32),
                Some(("trans_b", trans_b)),
                "td_gemm({in0}, {in1}, {in2}, {out}, {batch}, {m}, {n}, {o}, {bias_mode});",
            );
            add(
                OpKind::ConvPw,
                engine,
                vec![i8_, i8_, i32_],
                2,
                OutType::Exact(D::I8),
                None,
                "td_conv_pw({in0}, {in1}, {in2}, {out}, {w}, {cin}, {cout}, {mul}, {shift}, {zp});",
            );
            add(
                OpKind::Requant,
                engine,
                vec![i32_],
                1,
                OutType::Exact(D::I8),
                None,
                "td_requant({in0}, {out}, {numel}, {mul}, {shift}, {zp});",
            );
            add(
                OpKind::RmsNorm,
                engine,
                vec![i8_, i8_],
                2,
                OutType::Exact(D::I8),
                None,
                "td_rms_norm({in0}, {in1}, {out}, {rows}, {d}, {eps}, {mul}, {shift}, {zp});",
            );
            add(
                OpKind::Rope,
                engine,
                vec![i8_, i16_, i16_],
                3,
                OutType::Exact(D::I8),
                None,
                "td_rope({in0}, {in1}, {in2}, {out}, {rows}, {d}, {head_dim}, {pos}, {mul}, {shift}, {zp});",
            );
            add(
                OpKind::Softmax,
                engine,
                vec![i8_],
                1,
                OutType::Exact(D::I8),
                None,
                "td_softmax({in0}, {out}, {scratch0}, {rows}, {rows_per_mat}, {d}, {row0}, {q_ln2}, {q_b}, {q_c}, {in_shift}, {out_bits}, {causal}, {causal_offset});",
            );
            add(
                OpKind::Add,
                engine,
                vec![i8_, i8_],
                2,
                OutType::Exact(D::I8),
                None,
                "td_add({in0}, {in1}, {out}, {numel}, {mul_a}, {mul_b}, {shift}, {zp});",
            );
            add(
                OpKind::Mul,
                engine,
                vec![i8_, i8_],
                2,
                OutType::Exact(D::I8),
                None,
                "td_mul({in0}, {in1}, {out}, {numel}, {mul}, {shift}, {zp});",
            );
            add(
                OpKind::Hardswish,
                engine,
                vec![i8_],
                1,
                OutType::Exact(D::I8),
                None,
                "td_hardswish({in0}, {out}, {numel}, {three}, {six}, {mul}, {shift}, {zp});",
            );
            add(
                OpKind::GatherRows,
                engine,
                vec![i8_, i32_],
                2,
                OutType::Exact(D::I8),
                None,
                "td_gather_rows({in0}, {in1}, {out}, {rows}, {d}, {vocab});",
            );
            add(
                OpKind::ConcatSeq,
                engine,
                vec![Any, Any],
                2,
                OutType::SameAsInput(0),
                None,
                "td_concat_seq({in0}, {in1}, {out}, {rows0}, {rows1}, {row_bytes}, {stride0}, {stride1});",
            );
            add(
                OpKind::Transpose,
                engine,
                vec![Any],
                1,
                OutType::SameAsInput(0),
                None,
                "td_transpose({in0}, {out}, {elem}, {rank}, {in_dims}, {perm});",
            );
            add(
                OpKind::SplitHeads,
                engine,
                vec![Any],
                1,
                OutType::SameAsInput(0),
                None,
                "td_split_heads({in0}, {out}, {elem}, {heads}, {rows}, {dh});",
            );
            add(
                OpKind::MergeHeads,
                engine,
                vec![Any],
                1,
                OutType::SameAsInput(0),
                None,
                "td_merge_heads({in0}, {out}, {elem}, {heads}, {rows}, {dh});",
            );
        }
        Registry { templates }
    }

    pub fn templates(&self) -> &[KernelTemplate] {
        &self.templates
    }

    pub fn get(&self, id: &str) -> Option<&KernelTemplate> {
        self.templates.iter().find(|t| t.id == id)
    }

    /// Templates reordered by engine preference; ties keep registration
    /// order.
    pub fn ordered_for(&self, prefs: &[EngineKind]) -> Vec<&KernelTemplate> {
        let mut v: Vec<(usize, &KernelTemplate)> = self
            .templates
            .iter()
            .filter_map(|t| prefs.iter().position(|&k| k == t.signature.engine).map(|p| (p, t)))
            .collect();
        v.sort_by_key(|(p, _)| *p);
        v.into_iter().map(|(_, t)| t).collect()
    }

    /// Tile rules of the kernel `id` for `node`.
    pub fn tile_constraints_for(&self, id: &str, node: &Node, ranks: &[usize]) -> Result<TileConstraintSpec, KernelError> {
        let t = self.get(id).ok_or_else(|| KernelError::Unknown(id.to_string()))?;
        Ok(t.tile_constraints(node, ranks))
    }
}

/// Builds the rule set for `op`; `ranks` lists operand ranks, inputs then
/// output.
pub fn tile_constraints_for(op: OpKind, engine: EngineKind, node: &Node, ranks: &[usize]) -> TileConstraintSpec {
    let out = ranks.len() - 1;
    let n_in = out;
    let r = ranks[out];
    let mut g = Vec::new();
    let eq = |g: &mut Vec<TileRule>, a: OperandDim, b: OperandDim| g.push(TileRule::Equal(a, b));
    let full = |g: &mut Vec<TileRule>, a: OperandDim| g.push(TileRule::Untileable(a));
    match op {
        OpKind::Requant | OpKind::Hardswish | OpKind::Add | OpKind::Mul => {
            for i in 0..n_in {
                for d in 0..r {
                    eq(&mut g, (i, d), (out, d));
                }
            }
        }
        OpKind::Softmax => {
            let axis = node.int_or("axis", -1).rem_euclid(r as i64) as usize;
            for d in 0..r {
                eq(&mut g, (0, d), (out, d));
            }
            full(&mut g, (0, axis));
            full(&mut g, (out, axis));
        }
        OpKind::RmsNorm => {
            for d in 0..r {
                eq(&mut g, (0, d), (out, d));
            }
            full(&mut g, (0, r - 1));
            full(&mut g, (out, r - 1));
            full(&mut g, (1, 0));
        }
        OpKind::Rope => {
            eq(&mut g, (0, 0), (out, 0));
            eq(&mut g, (0, 1), (out, 1));
            full(&mut g, (out, 1));
            for t in [1, 2] {
                full(&mut g, (t, 0));
                full(&mut g, (t, 1));
            }
        }
        OpKind::Gemm | OpKind::GemmQ8 => {
            let tb = node.int_or("trans_b", 0) == 1;
            if r == 3 {
                eq(&mut g, (0, 0), (out, 0));
                eq(&mut g, (1, 0), (out, 0));
            }
            eq(&mut g, (0, r - 2), (out, r - 2));
            full(&mut g, (0, r - 1));
            let (bo, bn) = if tb { (r - 2, r - 1) } else { (r - 1, r - 2) };
            eq(&mut g, (1, bo), (out, r - 1));
            full(&mut g, (1, bn));
            if n_in == 3 {
                if ranks[2] == 1 {
                    eq(&mut g, (2, 0), (out, r - 1));
                } else {
                    eq(&mut g, (2, 0), (out, 0));
                    eq(&mut g, (2, 1), (out, 1));
                }
            }
        }
        OpKind::ConvPw => {
            eq(&mut g, (0, 0), (out, 0));
            full(&mut g, (0, 1));
            eq(&mut g, (1, 0), (out, 1));
            for d in 1..4 {
                full(&mut g, (1, d));
            }
            if n_in == 3 {
                eq(&mut g, (2, 0), (out, 1));
            }
        }
        OpKind::GatherRows => {
            eq(&mut g, (1, 0), (out, 0));
            full(&mut g, (0, 0));
            full(&mut g, (0, 1));
            full(&mut g, (out, 1));
        }
        OpKind::ConcatSeq => {
            for i in 0..2 {
                full(&mut g, (i, 0));
                eq(&mut g, (i, 1), (out, 1));
            }
            full(&mut g, (out, 0));
        }
        OpKind::Transpose => {
            let perm = node.ints("perm").unwrap_or(&[]);
            for (k, &p) in perm.iter().enumerate() {
                eq(&mut g, (0, p as usize), (out, k));
            }
        }
        OpKind::SplitHeads => {
            eq(&mut g, (0, 0), (out, 1));
            full(&mut g, (0, 1));
            full(&mut g, (out, 0));
            full(&mut g, (out, 2));
        }
        OpKind::MergeHeads => {
            eq(&mut g, (0, 1), (out, 0));
            full(&mut g, (0, 0));
            full(&mut g, (0, 2));
            full(&mut g, (out, 1));
        }
    }
    let mut platform = Vec::new();
    if engine == EngineKind::ConvNpu && op == OpKind::ConvPw {
        platform.push(TileRule::MultipleOrFull((out, 1), 32));
    }
    TileConstraintSpec { geometric: g, platform }
}

fn transient_size(op: OpKind, ranks: &[usize]) -> Option<SizeExpr> {
    match op {
        // One row of 32-bit exponents.
        OpKind::Softmax => Some(SizeExpr::Product(vec![
            SizeExpr::Const(4),
            SizeExpr::TileDim {
                operand: 0,
                dim: ranks[0] - 1,
            },
        ])),
        _ => None,
    }
}

fn work(node: &Node, in_tiles: &[Vec<usize>], out_tile: &[usize]) -> u64 {
    let numel = |s: &[usize]| s.iter().product::<usize>() as u64;
    match node.op {
        OpKind::Gemm | OpKind::GemmQ8 | OpKind::ConvPw => {
            let a = &in_tiles[0];
            numel(out_tile) * *a.last().unwrap_or(&1) as u64
        }
        _ => numel(out_tile),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn holes_and_instantiation() {
        let reg = Registry::builtin();
        let t = reg.get("requant@scalar-core").unwrap();
        assert_eq!(t.holes(), vec!["in0", "out", "numel", "mul", "shift", "zp"]);
        let s = t
            .instantiate(&|h| Some(h.to_uppercase()))
            .unwrap();
        assert_eq!(s, "td_requant(IN0, OUT, NUMEL, MUL, SHIFT, ZP);");
        let err = t.instantiate(&|h| (h != "zp").then(|| "x".to_string())).unwrap_err();
        assert!(matches!(err, KernelError::UnboundHole { hole, .. } if hole == "zp"));
    }

    #[test]
    fn preference_order() {
        let reg = Registry::builtin();
        let v = reg.ordered_for(&[EngineKind::ConvNpu, EngineKind::MultiCoreCluster]);
        assert_eq!(v[0].id, "conv_pw@conv-npu");
        assert!(v.iter().all(|t| t.signature.engine != EngineKind::ScalarCore));
        assert!(reg.tile_constraints_for("nope", &Node::new("n", OpKind::Add, vec![], vec![]), &[1]).is_err());
    }

    #[test]
    fn softmax_rules() {
        let n = Node::new("s", OpKind::Softmax, vec![], vec![]);
        let spec = tile_constraints_for(OpKind::Softmax, EngineKind::MultiCoreCluster, &n, &[2, 2]);
        for d in 0..2 {
            assert!(spec.geometric.contains(&TileRule::Equal((0, d), (1, d))));
        }
        assert!(spec.geometric.contains(&TileRule::Untileable((0, 1))));
        assert!(spec.platform.is_empty());
    }

    #[test]
    fn npu_divisibility_is_platform_rule() {
        let n = Node::new("c", OpKind::ConvPw, vec![], vec![]);
        let spec = tile_constraints_for(OpKind::ConvPw, EngineKind::ConvNpu, &n, &[2, 4, 2]);
        assert_eq!(spec.platform, vec![TileRule::MultipleOrFull((2, 1), 32)]);
        let cl = tile_constraints_for(OpKind::ConvPw, EngineKind::MultiCoreCluster, &n, &[2, 4, 2]);
        assert_eq!(cl.geometric, spec.geometric);
        assert!(cl.platform.is_empty());
    }
}
