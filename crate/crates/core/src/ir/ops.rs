use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Attrs, Node};

/// Operator kinds understood by the compiler, pre- and post-lowering.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    /// Integer matrix multiply `A·B (+ C)` with a 32-bit result. Rank 2 or
    /// batched rank 3.
    Gemm,
    /// Rescale to int8: multiply, shift, zero-point, saturate.
    Requant,
    /// `Gemm` fused with its trailing `Requant`.
    GemmQ8,
    /// Pointwise convolution (`H = 1`) with requantized int8 output.
    ConvPw,
    RmsNorm,
    Rope,
    Softmax,
    Add,
    Mul,
    Hardswish,
    GatherRows,
    ConcatSeq,
    Transpose,
    SplitHeads,
    MergeHeads,
}

pub(crate) struct OpSchema {
    pub min_inputs: usize,
    pub max_inputs: usize,
    pub required: &'static [&'static str],
    pub optional: &'static [&'static str],
}

const REQUANT: &[&str] = &["mul", "shift", "zp"];

impl OpKind {
    pub const ALL: [OpKind; 15] = [
        OpKind::Gemm,
        OpKind::Requant,
        OpKind::GemmQ8,
        OpKind::ConvPw,
        OpKind::RmsNorm,
        OpKind::Rope,
        OpKind::Softmax,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Hardswish,
        OpKind::GatherRows,
        OpKind::ConcatSeq,
        OpKind::Transpose,
        OpKind::SplitHeads,
        OpKind::MergeHeads,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Gemm => "gemm",
            OpKind::Requant => "requant",
            OpKind::GemmQ8 => "gemm_q8",
            OpKind::ConvPw => "conv_pw",
            OpKind::RmsNorm => "rms_norm",
            OpKind::Rope => "rope",
            OpKind::Softmax => "softmax",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Hardswish => "hardswish",
            OpKind::GatherRows => "gather_rows",
            OpKind::ConcatSeq => "concat_seq",
            OpKind::Transpose => "transpose",
            OpKind::SplitHeads => "split_heads",
            OpKind::MergeHeads => "merge_heads",
        }
    }

    pub(crate) fn schema(&self) -> OpSchema {
        let s = |min, max, required, optional| OpSchema {
            min_inputs: min,
            max_inputs: max,
            required,
            optional,
        };
        match self {
            OpKind::Gemm => s(2, 3, &[], &["trans_b"]),
            OpKind::Requant => s(1, 1, REQUANT, &[]),
            OpKind::GemmQ8 => s(2, 3, REQUANT, &["trans_b"]),
            OpKind::ConvPw => s(2, 3, &["mul", "shift", "zp", "h", "w", "c_in", "c_out"], &[]),
            OpKind::RmsNorm => s(2, 2, &["eps", "mul", "shift", "zp"], &[]),
            OpKind::Rope => s(3, 3, &["head_dim", "pos_offset", "mul", "shift", "zp"], &[]),
            OpKind::Softmax => s(
                1,
                1,
                &["q_ln2", "q_b", "q_c", "in_shift", "out_bits"],
                &["axis", "causal", "causal_offset"],
            ),
            OpKind::Add => s(2, 2, &["mul_a", "mul_b", "shift", "zp"], &[]),
            OpKind::Mul => s(2, 2, REQUANT, &[]),
            OpKind::Hardswish => s(1, 1, &["three", "six", "mul", "shift", "zp"], &[]),
            OpKind::GatherRows => s(2, 2, &[], &[]),
            OpKind::ConcatSeq => s(2, 2, &[], &[]),
            OpKind::Transpose => s(1, 1, &["perm"], &[]),
            OpKind::SplitHeads => s(1, 1, &["heads"], &[]),
            OpKind::MergeHeads => s(1, 1, &[], &[]),
        }
    }

    /// Ops whose int8 output is computed through a 32-bit accumulator that a
    /// `Requant` can be fused into.
    pub fn is_matmul(&self) -> bool {
        matches!(self, OpKind::Gemm | OpKind::GemmQ8 | OpKind::ConvPw)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OpKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| s.to_string())
    }
}

fn attr(attrs: &Attrs, key: &str) -> Result<i64, String> {
    attrs
        .get(key)
        .and_then(|a| a.as_int())
        .ok_or_else(|| format!("missing integer attribute `{key}`"))
}

/// Output shapes of `node` given its input shapes.
pub fn infer_output_shapes(node: &Node, inputs: &[&[usize]]) -> Result<Vec<Vec<usize>>, String> {
    let schema = node.op.schema();
    if inputs.len() < schema.min_inputs || inputs.len() > schema.max_inputs {
        return Err(format!(
            "{} expects {}..={} inputs, got {}",
            node.op,
            schema.min_inputs,
            schema.max_inputs,
            inputs.len()
        ));
    }
    let a = &node.attrs;
    let same = |x: &[usize], y: &[usize], what: &str| {
        if x == y {
            Ok(())
        } else {
            Err(format!("{what}: shape {x:?} vs {y:?}"))
        }
    };
    let out = match node.op {
        OpKind::Gemm | OpKind::GemmQ8 => {
            let trans_b = node.int_or("trans_b", 0) != 0;
            let (sa, sb) = (inputs[0], inputs[1]);
            if sa.len() != sb.len() || !(sa.len() == 2 || sa.len() == 3) {
                return Err(format!("gemm operands must both be rank 2 or 3, got {sa:?} and {sb:?}"));
            }
            let r = sa.len();
            if r == 3 && sa[0] != sb[0] {
                return Err(format!("gemm batch mismatch {} vs {}", sa[0], sb[0]));
            }
            let (m, n) = (sa[r - 2], sa[r - 1]);
            let (bn, o) = if trans_b { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
            if n != bn {
                return Err(format!("gemm reduction mismatch {n} vs {bn}"));
            }
            if let Some(c) = inputs.get(2) {
                let ok = r == 2 && (c == &[o] || c == &[m, o]);
                if !ok {
                    return Err(format!("gemm bias shape {c:?} incompatible with output [{m}, {o}]"));
                }
            }
            let mut y = sa[..r - 2].to_vec();
            y.extend([m, o]);
            y
        }
        OpKind::ConvPw => {
            let (sa, sw) = (inputs[0], inputs[1]);
            let (h, w, cin, cout) = (attr(a, "h")?, attr(a, "w")?, attr(a, "c_in")?, attr(a, "c_out")?);
            if h != 1 {
                return Err("conv_pw supports H = 1 only".into());
            }
            if sa != [w as usize, cin as usize] {
                return Err(format!("conv_pw input {sa:?} does not match W={w}, C_in={cin}"));
            }
            if sw != [cout as usize, 1, 1, cin as usize] {
                return Err(format!("conv_pw weight {sw:?} is not [C_out, 1, 1, C_in]"));
            }
            if let Some(c) = inputs.get(2) {
                if c != &[cout as usize] {
                    return Err(format!("conv_pw bias {c:?} is not [C_out]"));
                }
            }
            vec![w as usize, cout as usize]
        }
        OpKind::Requant | OpKind::Hardswish => inputs[0].to_vec(),
        OpKind::RmsNorm => {
            let x = inputs[0];
            let d = *x.last().ok_or("rms_norm input must have rank >= 1")?;
            same(inputs[1], &[d], "rms_norm weight")?;
            x.to_vec()
        }
        OpKind::Rope => {
            let x = inputs[0];
            if x.len() != 2 {
                return Err("rope input must be [S, D]".into());
            }
            let hd = attr(a, "head_dim")? as usize;
            if hd == 0 || !hd.is_multiple_of(2) || !x[1].is_multiple_of(hd) {
                return Err(format!("rope head_dim {hd} must be even and divide {}", x[1]));
            }
            let pos = attr(a, "pos_offset")?;
            let (cos, sin) = (inputs[1], inputs[2]);
            same(cos, sin, "rope tables")?;
            if cos.len() != 2 || cos[1] != hd / 2 || (cos[0] as i64) < pos + x[0] as i64 {
                return Err(format!("rope table {cos:?} too small for {} positions from {pos}", x[0]));
            }
            x.to_vec()
        }
        OpKind::Softmax => {
            let x = inputs[0];
            let axis = node.int_or("axis", -1);
            let r = x.len() as i64;
            if axis < -r || axis >= r {
                return Err(format!("softmax axis {axis} out of range for rank {r}"));
            }
            x.to_vec()
        }
        OpKind::Add | OpKind::Mul => {
            same(inputs[0], inputs[1], "elementwise operands")?;
            inputs[0].to_vec()
        }
        OpKind::GatherRows => {
            let (t, idx) = (inputs[0], inputs[1]);
            if t.len() != 2 || idx.len() != 1 {
                return Err("gather_rows expects table [V, D] and indices [S]".into());
            }
            vec![idx[0], t[1]]
        }
        OpKind::ConcatSeq => {
            let (c, n) = (inputs[0], inputs[1]);
            if c.len() != 2 || n.len() != 2 {
                return Err("concat_seq expects [S, D] operands".into());
            }
            if c[1] != n[1] {
                return Err(format!("concat_seq shapes {c:?} and {n:?} differ outside the sequence axis"));
            }
            vec![c[0] + n[0], c[1]]
        }
        OpKind::Transpose => {
            let x = inputs[0];
            let perm = node.ints("perm").ok_or("missing list attribute `perm`")?;
            if !is_permutation(perm, x.len()) {
                return Err(format!("invalid permutation {perm:?} for rank {}", x.len()));
            }
            perm.iter().map(|&p| x[p as usize]).collect()
        }
        OpKind::SplitHeads => {
            let x = inputs[0];
            let h = attr(a, "heads")? as usize;
            if x.len() != 2 || h == 0 || !x[1].is_multiple_of(h) {
                return Err(format!("split_heads: {x:?} not divisible into {h} heads"));
            }
            vec![h, x[0], x[1] / h]
        }
        OpKind::MergeHeads => {
            let x = inputs[0];
            if x.len() != 3 {
                return Err("merge_heads input must be [h, S, d_h]".into());
            }
            vec![x[1], x[0] * x[2]]
        }
    };
    Ok(vec![out])
}

pub(crate) fn is_permutation(perm: &[i64], rank: usize) -> bool {
    let mut seen = vec![false; rank];
    perm.len() == rank
        && perm.iter().all(|&p| {
            (0..rank as i64).contains(&p) && !std::mem::replace(&mut seen[p as usize], true)
        })
}
