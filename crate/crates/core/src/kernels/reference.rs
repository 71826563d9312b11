//! Reference integer semantics of every kernel. All arithmetic is exact in
//! 64-bit; results saturate to their output type.

use super::{KernelError, Tensor};
use crate::ir::DataType;

/// Requantization parameters: `sat8(zp + round(acc * mul / 2^shift))`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Requant {
    pub mul: i32,
    pub shift: i32,
    pub zp: i32,
}

impl Requant {
    pub const IDENTITY: Requant = Requant { mul: 1, shift: 0, zp: 0 };

    pub fn new(mul: i32, shift: i32, zp: i32) -> Result<Requant, KernelError> {
        if !(0..=31).contains(&shift) {
            return Err(KernelError::Param(format!("shift {shift} outside [0, 31]")));
        }
        if !(-128..=127).contains(&zp) {
            return Err(KernelError::Param(format!("zero point {zp} outside int8")));
        }
        Ok(Requant { mul, shift, zp })
    }

    pub fn apply(&self, acc: i64) -> i32 {
        requant(acc, self.mul, self.shift, self.zp)
    }
}

pub fn sat8(v: i64) -> i32 {
    v.clamp(-128, 127) as i32
}

/// `v / 2^shift` rounded half away from zero.
pub fn round_shift(v: i64, shift: i32) -> i64 {
    if shift == 0 {
        return v;
    }
    let half = 1i64 << (shift - 1);
    if v >= 0 {
        (v + half) >> shift
    } else {
        -((-v + half) >> shift)
    }
}

pub fn requant(acc: i64, mul: i32, shift: i32, zp: i32) -> i32 {
    sat8(zp as i64 + round_shift(acc * mul as i64, shift))
}

fn expect(t: &Tensor, dtype: DataType, what: &str) -> Result<(), KernelError> {
    if t.dtype != dtype {
        return Err(KernelError::Type(format!("{what} is {}, expected {dtype}", t.dtype)));
    }
    Ok(())
}

fn shape_err(msg: String) -> KernelError {
    KernelError::Shape(msg)
}

/// Integer GEMM with 32-bit result. `b` is `[N×O]`, or `[O×N]` when
/// `trans_b`; rank 3 operands carry a leading batch dimension. `bias` is
/// `[O]` or `[M×O]`.
pub fn ref_gemm(a: &Tensor, b: &Tensor, bias: Option<&Tensor>, trans_b: bool) -> Result<Tensor, KernelError> {
    expect(a, DataType::I8, "gemm A")?;
    expect(b, DataType::I8, "gemm B")?;
    let r = a.shape.len();
    if !(r == 2 || r == 3) || b.shape.len() != r {
        return Err(shape_err(format!("gemm operands {:?} and {:?}", a.shape, b.shape)));
    }
    let batch = if r == 3 { a.shape[0] } else { 1 };
    if r == 3 && b.shape[0] != batch {
        return Err(shape_err("gemm batch mismatch".into()));
    }
    let (m, n) = (a.shape[r - 2], a.shape[r - 1]);
    let (bn, o) = if trans_b { (b.shape[r - 1], b.shape[r - 2]) } else { (b.shape[r - 2], b.shape[r - 1]) };
    if n != bn {
        return Err(shape_err(format!("gemm reduction {n} vs {bn}")));
    }
    let bias_at: Box<dyn Fn(usize, usize) -> i64> = match bias {
        None => Box::new(|_, _| 0),
        Some(c) => {
            expect(c, DataType::I32, "gemm bias")?;
            if c.shape == [o] {
                Box::new(move |_, j| c.data[j] as i64)
            } else if c.shape == [m, o] {
                Box::new(move |i, j| c.data[i * o + j] as i64)
            } else {
                return Err(shape_err(format!("gemm bias {:?} for output [{m}, {o}]", c.shape)));
            }
        }
    };
    let mut y = Vec::with_capacity(batch * m * o);
    for bt in 0..batch {
        let ab = &a.data[bt * m * n..(bt + 1) * m * n];
        let bb = &b.data[bt * n * o..(bt + 1) * n * o];
        for i in 0..m {
            for j in 0..o {
                let mut acc = bias_at(i, j);
                for k in 0..n {
                    let bv = if trans_b { bb[j * n + k] } else { bb[k * o + j] };
                    acc += ab[i * n + k] as i64 * bv as i64;
                }
                y.push(acc as i32);
            }
        }
    }
    let mut shape = a.shape[..r - 2].to_vec();
    shape.extend([m, o]);
    Ok(Tensor::new(DataType::I32, shape, y))
}

pub fn ref_requant(x: &Tensor, q: Requant) -> Result<Tensor, KernelError> {
    expect(x, DataType::I32, "requant input")?;
    Ok(Tensor::new(DataType::I8, x.shape.clone(), x.data.iter().map(|&v| q.apply(v as i64)).collect()))
}

/// `sat8(zp + round((A·B + C) · mul / 2^shift))` with `B` laid out `[N×O]`.
pub fn ref_gemm_q8(a: &Tensor, b: &Tensor, bias: Option<&Tensor>, q: Requant) -> Result<Tensor, KernelError> {
    ref_requant(&ref_gemm(a, b, bias, false)?, q)
}

/// Pointwise convolution with `H = 1`: `a` is `[W×C_in]`, `w` is
/// `[C_out, 1, 1, C_in]`.
pub fn ref_conv_pw(a: &Tensor, w: &Tensor, bias: Option<&Tensor>, q: Requant) -> Result<Tensor, KernelError> {
    if w.shape.len() != 4 || w.shape[1] != 1 || w.shape[2] != 1 {
        return Err(shape_err(format!("conv_pw weight {:?}", w.shape)));
    }
    let w2 = Tensor::new(w.dtype, vec![w.shape[0], w.shape[3]], w.data.clone());
    ref_requant(&ref_gemm(a, &w2, bias, true)?, q)
}

/// Integer softmax parameters (second-order polynomial exponent with
/// `ln 2` range reduction).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SoftmaxParams {
    pub q_ln2: i64,
    pub q_b: i64,
    pub q_c: i64,
    pub in_shift: u32,
    pub out_bits: u32,
    pub causal: bool,
    pub causal_offset: i64,
}

/// Polynomial `a·(x + b)² + c` approximating `exp` on `[-ln 2, 0]`.
pub const EXP_POLY: (f64, f64, f64) = (0.3585, 1.353, 0.344);

impl SoftmaxParams {
    /// Integer constants for an input scale `scale` (real value of one
    /// input step), before the `in_shift` left shift.
    pub fn for_scale(scale: f64, in_shift: u32) -> SoftmaxParams {
        let s = scale / (1u64 << in_shift) as f64;
        let (a, b, c) = EXP_POLY;
        SoftmaxParams {
            q_ln2: (std::f64::consts::LN_2 / s).floor() as i64,
            q_b: (b / s).floor() as i64,
            q_c: (c / (a * s * s)).floor() as i64,
            in_shift,
            out_bits: 7,
            causal: false,
            causal_offset: 0,
        }
    }
}

/// Masked entries hold this code.
pub const MASKED: i32 = -128;

/// Integer exponent of `q <= 0` (in input steps after the shift).
pub fn i_exp(q: i64, p: &SoftmaxParams) -> i64 {
    let z = (-q) / p.q_ln2;
    if z >= 32 {
        return 0;
    }
    let qp = q + z * p.q_ln2;
    let t = qp + p.q_b;
    (t * t + p.q_c) >> z
}

/// Softmax along the last axis of `x`. `row_origin` is the global index
/// of the first row (second-to-last axis) for causal masking of tiles.
pub fn ref_softmax_ibert(x: &Tensor, p: &SoftmaxParams, row_origin: usize) -> Result<Tensor, KernelError> {
    expect(x, DataType::I8, "softmax input")?;
    if p.q_ln2 <= 0 || p.out_bits == 0 || p.out_bits > 8 {
        return Err(KernelError::Param(format!("softmax q_ln2 {} / out_bits {}", p.q_ln2, p.out_bits)));
    }
    let r = x.shape.len();
    let d = *x.shape.last().ok_or_else(|| shape_err("softmax of a scalar".into()))?;
    let rows_per_mat = if r >= 2 { x.shape[r - 2] } else { 1 };
    let top = (1i64 << p.out_bits) - 1;
    let mut y = vec![0i32; x.numel()];
    let mut e = vec![0i64; d];
    for (row, chunk) in x.data.chunks(d).enumerate() {
        let i = (row % rows_per_mat + row_origin) as i64;
        let live = |j: usize| chunk[j] != MASKED && !(p.causal && j as i64 > i + p.causal_offset);
        let Some(m) = (0..d).filter(|&j| live(j)).map(|j| chunk[j]).max() else {
            continue;
        };
        let mut sum = 0i64;
        for j in 0..d {
            e[j] = if live(j) { i_exp(((chunk[j] - m) as i64) << p.in_shift, p) } else { 0 };
            sum += e[j];
        }
        if sum == 0 {
            continue;
        }
        for j in 0..d {
            y[row * d + j] = (e[j] * top / sum) as i32;
        }
    }
    Ok(Tensor::new(DataType::I8, x.shape.clone(), y))
}

/// Integer square root: Newton iteration from a bit-length guess, four
/// steps, then a one-step correction.
pub fn isqrt(n: u64) -> u64 {
    if n == 0 {
        return 0;
    }
    let bits = 64 - n.leading_zeros();
    let mut x = 1u64 << bits.div_ceil(2);
    for _ in 0..4 {
        x = (x + n / x) / 2;
    }
    if x * x > n {
        x -= 1;
    } else if (x + 1) * (x + 1) <= n {
        x += 1;
    }
    x
}

/// Fixed-point exponent of the normalized numerator.
pub const RMS_K: u32 = 16;
pub const RMS_MAX_D: usize = 1 << 15;

/// RMS normalization over the last axis with an int8 gain vector.
pub fn ref_rmsnorm_i32(x: &Tensor, w: &Tensor, eps: i64, q: Requant) -> Result<Tensor, KernelError> {
    expect(x, DataType::I8, "rms_norm input")?;
    expect(w, DataType::I8, "rms_norm weight")?;
    let d = *x.shape.last().ok_or_else(|| shape_err("rms_norm of a scalar".into()))?;
    if d > RMS_MAX_D {
        return Err(shape_err(format!("rms_norm dimension {d} exceeds {RMS_MAX_D}")));
    }
    if w.shape != [d] {
        return Err(shape_err(format!("rms_norm weight {:?} for D={d}", w.shape)));
    }
    let mut y = Vec::with_capacity(x.numel());
    for chunk in x.data.chunks(d) {
        let ss: i64 = chunk.iter().map(|&v| v as i64 * v as i64).sum();
        let r = isqrt((ss / d as i64 + eps) as u64) as i64;
        if r == 0 {
            return Err(KernelError::Param("rms_norm of a zero vector with eps = 0".into()));
        }
        for (j, &v) in chunk.iter().enumerate() {
            let num = ((v as i64 * w.data[j] as i64) << RMS_K) / r;
            y.push(q.apply(num));
        }
    }
    Ok(Tensor::new(DataType::I8, x.shape.clone(), y))
}

/// Q15 fixed point one.
pub const Q15_ONE: i32 = 32767;

/// Rotary embedding on `x = [S×D]`, rotating pairs inside each head of
/// `head_dim` columns. Row `s` uses table row `pos_offset + row_origin + s`.
pub fn ref_rope_q(
    x: &Tensor,
    cos: &Tensor,
    sin: &Tensor,
    head_dim: usize,
    pos_offset: usize,
    row_origin: usize,
    q: Requant,
) -> Result<Tensor, KernelError> {
    expect(x, DataType::I8, "rope input")?;
    expect(cos, DataType::I16, "rope cos table")?;
    expect(sin, DataType::I16, "rope sin table")?;
    if head_dim == 0 || !head_dim.is_multiple_of(2) {
        return Err(shape_err(format!("rope head_dim {head_dim} must be even")));
    }
    if x.shape.len() != 2 || !x.shape[1].is_multiple_of(head_dim) {
        return Err(shape_err(format!("rope input {:?} with head_dim {head_dim}", x.shape)));
    }
    let half = head_dim / 2;
    if cos.shape.len() != 2 || cos.shape[1] != half || sin.shape != cos.shape {
        return Err(shape_err(format!("rope tables {:?} / {:?}", cos.shape, sin.shape)));
    }
    let (s, d) = (x.shape[0], x.shape[1]);
    if pos_offset + row_origin + s > cos.shape[0] {
        return Err(shape_err(format!(
            "rope table of {} positions underruns position {}",
            cos.shape[0],
            pos_offset + row_origin + s - 1
        )));
    }
    let mut y = vec![0; s * d];
    for r in 0..s {
        let p = pos_offset + row_origin + r;
        for h in 0..d / head_dim {
            for i in 0..half {
                let c0 = r * d + h * head_dim + 2 * i;
                let (a, b) = (x.data[c0] as i64, x.data[c0 + 1] as i64);
                let (c, sn) = (cos.data[p * half + i] as i64, sin.data[p * half + i] as i64);
                y[c0] = q.apply(a * c - b * sn);
                y[c0 + 1] = q.apply(a * sn + b * c);
            }
        }
    }
    Ok(Tensor::new(DataType::I8, x.shape.clone(), y))
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<(), KernelError> {
    if a.shape != b.shape {
        return Err(shape_err(format!("operand shapes {:?} and {:?}", a.shape, b.shape)));
    }
    Ok(())
}

/// `requant(a·mul_a + b·mul_b)` with unit multiplier.
pub fn ref_add(a: &Tensor, b: &Tensor, mul_a: i32, mul_b: i32, shift: i32, zp: i32) -> Result<Tensor, KernelError> {
    expect(a, DataType::I8, "add lhs")?;
    expect(b, DataType::I8, "add rhs")?;
    same_shape(a, b)?;
    let q = Requant::new(1, shift, zp)?;
    let y = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &z)| q.apply(x as i64 * mul_a as i64 + z as i64 * mul_b as i64))
        .collect();
    Ok(Tensor::new(DataType::I8, a.shape.clone(), y))
}

pub fn ref_mul(a: &Tensor, b: &Tensor, q: Requant) -> Result<Tensor, KernelError> {
    expect(a, DataType::I8, "mul lhs")?;
    expect(b, DataType::I8, "mul rhs")?;
    same_shape(a, b)?;
    let y = a.data.iter().zip(&b.data).map(|(&x, &z)| q.apply(x as i64 * z as i64)).collect();
    Ok(Tensor::new(DataType::I8, a.shape.clone(), y))
}

/// `requant(x · clamp(x + three, 0, six))`; `mul / 2^shift` carries the
/// `1/6` and the scale change.
pub fn ref_hardswish(x: &Tensor, three: i32, six: i32, q: Requant) -> Result<Tensor, KernelError> {
    expect(x, DataType::I8, "hardswish input")?;
    let y = x
        .data
        .iter()
        .map(|&v| {
            let t = (v as i64 + three as i64).clamp(0, six as i64);
            q.apply(v as i64 * t)
        })
        .collect();
    Ok(Tensor::new(DataType::I8, x.shape.clone(), y))
}

pub fn ref_gather_rows(table: &Tensor, idx: &Tensor) -> Result<Tensor, KernelError> {
    expect(idx, DataType::I32, "gather_rows indices")?;
    if table.shape.len() != 2 || idx.shape.len() != 1 {
        return Err(shape_err("gather_rows expects [V×D] and [S]".into()));
    }
    let (v, d) = (table.shape[0], table.shape[1]);
    let mut y = Vec::with_capacity(idx.numel() * d);
    for &i in &idx.data {
        if i < 0 || i as usize >= v {
            return Err(KernelError::Param(format!("gather index {i} outside table of {v} rows")));
        }
        y.extend_from_slice(&table.data[i as usize * d..(i as usize + 1) * d]);
    }
    Ok(Tensor::new(table.dtype, vec![idx.numel(), d], y))
}

/// Rows of `cache` followed by rows of `new`.
pub fn ref_concat_seq(cache: &Tensor, new: &Tensor) -> Result<Tensor, KernelError> {
    if cache.shape.len() != 2 || new.shape.len() != 2 || cache.shape[1] != new.shape[1] || cache.dtype != new.dtype {
        return Err(shape_err(format!("concat_seq of {:?} and {:?}", cache.shape, new.shape)));
    }
    let mut data = cache.data.clone();
    data.extend_from_slice(&new.data);
    Ok(Tensor::new(cache.dtype, vec![cache.shape[0] + new.shape[0], cache.shape[1]], data))
}

/// Output dim `k` is input dim `perm[k]`.
pub fn ref_transpose(x: &Tensor, perm: &[usize]) -> Result<Tensor, KernelError> {
    let r = x.shape.len();
    let mut seen = vec![false; r];
    if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
        return Err(KernelError::Param(format!("invalid permutation {perm:?} for rank {r}")));
    }
    let shape: Vec<usize> = perm.iter().map(|&p| x.shape[p]).collect();
    let xs = x.strides();
    let mut data = Vec::with_capacity(x.numel());
    super::tensor::for_each_index(&shape, |idx| {
        let off: usize = idx.iter().zip(perm).map(|(&i, &p)| i * xs[p]).sum();
        data.push(x.data[off]);
    });
    Ok(Tensor::new(x.dtype, shape, data))
}

/// `[S×D] -> [h×S×D/h]`.
pub fn ref_split_heads(x: &Tensor, heads: usize) -> Result<Tensor, KernelError> {
    if x.shape.len() != 2 || heads == 0 || !x.shape[1].is_multiple_of(heads) {
        return Err(shape_err(format!("split_heads of {:?} into {heads}", x.shape)));
    }
    let (s, d) = (x.shape[0], x.shape[1]);
    let dh = d / heads;
    let r = Tensor::new(x.dtype, vec![s, heads, dh], x.data.clone());
    let mut t = ref_transpose(&r, &[1, 0, 2])?;
    t.shape = vec![heads, s, dh];
    Ok(t)
}

/// `[h×S×d_h] -> [S×h·d_h]`.
pub fn ref_merge_heads(x: &Tensor) -> Result<Tensor, KernelError> {
    if x.shape.len() != 3 {
        return Err(shape_err(format!("merge_heads of {:?}", x.shape)));
    }
    let (h, s, dh) = (x.shape[0], x.shape[1], x.shape[2]);
    let mut t = ref_transpose(x, &[1, 0, 2])?;
    t.shape = vec![s, h * dh];
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_i8(rng: &mut ChaCha8Rng, n: usize) -> Vec<i8> {
        (0..n).map(|_| rng.gen()).collect()
    }

    #[test]
    fn rounding() {
        assert_eq!(round_shift(5, 1), 3);
        assert_eq!(round_shift(-5, 1), -3);
        assert_eq!(round_shift(4, 1), 2);
        assert_eq!(round_shift(-7, 2), -2);
        assert_eq!(requant(1000, 1, 0, 0), 127);
        assert_eq!(requant(-1000, 1, 0, 0), -128);
    }

    #[test]
    fn gemm_q8_scalar() {
        let y = ref_gemm_q8(
            &Tensor::i8(vec![1, 1], &[2]),
            &Tensor::i8(vec![1, 1], &[3]),
            Some(&Tensor::i32(vec![1], &[4])),
            Requant::IDENTITY,
        )
        .unwrap();
        assert_eq!(y.data, vec![10]);
    }

    #[test]
    fn gemm_q8_zero_input_is_requantized_bias() {
        let q = Requant::new(3, 2, -5).unwrap();
        let bias = Tensor::i32(vec![2], &[7, -9]);
        let y = ref_gemm_q8(&Tensor::i8(vec![3, 4], &[0; 12]), &Tensor::i8(vec![4, 2], &[9; 8]), Some(&bias), q).unwrap();
        for m in 0..3 {
            assert_eq!(y.data[m * 2], sat8(-5 + round_shift(21, 2)));
            assert_eq!(y.data[m * 2 + 1], sat8(-5 + round_shift(-27, 2)));
        }
    }

    #[test]
    fn gemm_q8_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (m, n, o) = (4, 8, 2);
        let a = rand_i8(&mut rng, m * n);
        let b = rand_i8(&mut rng, n * o);
        let c: Vec<i32> = (0..o).map(|_| rng.gen_range(-1000..1000)).collect();
        let (mul, shift, zp) = (77, 9, 3);
        let y = ref_gemm_q8(
            &Tensor::i8(vec![m, n], &a),
            &Tensor::i8(vec![n, o], &b),
            Some(&Tensor::i32(vec![o], &c)),
            Requant::new(mul, shift, zp).unwrap(),
        )
        .unwrap();
        for i in 0..m {
            for j in 0..o {
                let mut acc = c[j] as i128;
                for k in 0..n {
                    acc += a[i * n + k] as i128 * b[k * o + j] as i128;
                }
                let scaled = acc * mul as i128;
                let div = 1i128 << shift;
                let q = if scaled >= 0 { (2 * scaled + div) / (2 * div) } else { -((-2 * scaled + div) / (2 * div)) };
                let want = (zp as i128 + q).clamp(-128, 127) as i32;
                assert_eq!(y.data[i * o + j], want, "({i},{j})");
            }
        }
    }

    #[test]
    fn conv_pw_equals_transposed_gemm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::i8(vec![5, 6], &rand_i8(&mut rng, 30));
        let w = Tensor::i8(vec![4, 1, 1, 6], &rand_i8(&mut rng, 24));
        let q = Requant::new(5, 7, 0).unwrap();
        let y = ref_conv_pw(&a, &w, None, q).unwrap();
        let bt = ref_transpose(&Tensor::i8(vec![4, 6], &w.data.iter().map(|&v| v as i8).collect::<Vec<_>>()), &[1, 0]).unwrap();
        assert_eq!(y, ref_gemm_q8(&a, &bt, None, q).unwrap());
    }

    #[test]
    fn isqrt_exact() {
        let check = |n: u64| {
            let r = isqrt(n);
            assert!(r * r <= n && (r + 1) * (r + 1) > n, "isqrt({n}) = {r}");
        };
        (0..100_000).for_each(check);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100_000 {
            check(rng.gen_range(0..(1u64 << 31)));
        }
        for k in 1..31 {
            check((1 << k) - 1);
            check(1 << k);
        }
    }

    #[test]
    fn concat_keeps_cache_rows_first() {
        let cache = Tensor::i8(vec![3, 64], &(0..192).map(|i| (i % 100) as i8).collect::<Vec<_>>());
        let new = Tensor::i8(vec![1, 64], &[-1; 64]);
        let y = ref_concat_seq(&cache, &new).unwrap();
        assert_eq!(y.shape, vec![4, 64]);
        assert_eq!(&y.data[..192], &cache.data[..]);
        assert!(y.data[192..].iter().all(|&v| v == -1));
    }

    #[test]
    fn transpose_identity_and_invalid() {
        let x = Tensor::i8(vec![2, 3], &[1, 2, 3, 4, 5, 6]);
        assert_eq!(ref_transpose(&x, &[0, 1]).unwrap(), x);
        assert_eq!(ref_transpose(&x, &[1, 0]).unwrap().data, vec![1, 4, 2, 5, 3, 6]);
        assert!(ref_transpose(&x, &[0, 0]).is_err());
    }

    #[test]
    fn add_inverse_is_zero_point() {
        let x: Vec<i8> = (-127..=127).collect();
        let neg: Vec<i8> = x.iter().map(|v| -v).collect();
        let y = ref_add(&Tensor::i8(vec![255], &x), &Tensor::i8(vec![255], &neg), 37, 37, 6, -3).unwrap();
        assert!(y.data.iter().all(|&v| v == -3));
    }

    #[test]
    fn heads_roundtrip() {
        let x = Tensor::i8(vec![3, 8], &(0..24).map(|i| i as i8).collect::<Vec<_>>());
        let s = ref_split_heads(&x, 4).unwrap();
        assert_eq!(s.shape, vec![4, 3, 2]);
        assert_eq!(s.data[..4], [0, 1, 8, 9]);
        assert_eq!(ref_merge_heads(&s).unwrap(), x);
    }

    #[test]
    fn saturating_outputs() {
        let x = Tensor::i8(vec![4], &[127, -128, 100, -100]);
        let y = ref_hardswish(&x, 20, 40, Requant::new(1, 0, 0).unwrap()).unwrap();
        assert!(y.data.iter().all(|v| (-128..=127).contains(v)));
        assert_eq!(y.data[1], 0);
        assert_eq!(y.data[0], 127);
    }
}
