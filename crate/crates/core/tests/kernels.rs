use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tinydeploy::ir::{DataType, Node, OpKind};
use tinydeploy::kernels::reference::*;
use tinydeploy::kernels::{eval_node, eval_tile, tile_constraints_for, Tensor};
use tinydeploy::target::EngineKind;

fn params(scale: f64, in_shift: u32) -> SoftmaxParams {
    SoftmaxParams::for_scale(scale, in_shift)
}

#[test]
fn softmax_uniform_row() {
    let p = params(0.05, 4);
    let y = ref_softmax_ibert(&Tensor::i8(vec![1, 4], &[9, 9, 9, 9]), &p, 0).unwrap();
    let lo = *y.data.iter().min().unwrap();
    let hi = *y.data.iter().max().unwrap();
    assert!(hi - lo <= 1);
    assert_eq!(hi, 127 / 4);
}

#[test]
fn softmax_one_hot() {
    let p = params(0.1, 0);
    let mut row = vec![-127i8; 8];
    row[5] = 127;
    let y = ref_softmax_ibert(&Tensor::i8(vec![1, 8], &row), &p, 0).unwrap();
    assert!(y.data[5] as f64 >= 0.95 * 127.0, "{:?}", y.data);
    let mut row = vec![-128i8; 8];
    row[2] = 127;
    let y = ref_softmax_ibert(&Tensor::i8(vec![1, 8], &row), &p, 0).unwrap();
    assert_eq!(y.data[2], 127);
}

/// Integer softmax written out directly from the published algorithm:
/// i-poly, i-exp with ln2 decomposition, integer normalization.
fn softmax_oracle(row: &[i8], scale: f64, in_shift: u32) -> Vec<i32> {
    let s = scale / 2f64.powi(in_shift as i32);
    let (a, b, c) = (0.3585, 1.353, 0.344);
    let q_ln2 = (std::f64::consts::LN_2 / s).floor() as i128;
    let q_b = (b / s).floor() as i128;
    let q_c = (c / (a * s * s)).floor() as i128;
    let i_poly = |q: i128| (q + q_b) * (q + q_b) + q_c;
    let i_exp = |q: i128| {
        let z = (-q).div_euclid(q_ln2);
        let p = q + z * q_ln2;
        if z >= 32 {
            0
        } else {
            i_poly(p) >> z
        }
    };
    let live: Vec<bool> = row.iter().map(|&v| v != -128).collect();
    let m = row.iter().zip(&live).filter(|(_, &l)| l).map(|(&v, _)| v as i128).max().unwrap();
    let e: Vec<i128> = row
        .iter()
        .zip(&live)
        .map(|(&v, &l)| if l { i_exp((v as i128 - m) * (1 << in_shift)) } else { 0 })
        .collect();
    let sum: i128 = e.iter().sum();
    e.iter().map(|&x| (x * 127 / sum) as i32).collect()
}

#[test]
fn softmax_matches_transcribed_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for trial in 0..200 {
        let row: Vec<i8> = (0..16).map(|_| rng.gen_range(-127..=127)).collect();
        let scale = [0.02, 0.05, 0.1, 0.3][trial % 4];
        let shift = (trial % 5) as u32;
        let y = ref_softmax_ibert(&Tensor::i8(vec![1, 16], &row), &params(scale, shift), 0).unwrap();
        assert_eq!(y.data, softmax_oracle(&row, scale, shift), "trial {trial}");
    }
}

#[test]
fn softmax_causal_mask_follows_row_origin() {
    let mut p = params(0.05, 2);
    p.causal = true;
    let x = Tensor::i8(vec![4, 4], &[3; 16]);
    let full = ref_softmax_ibert(&x, &p, 0).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            assert_eq!(full.data[i * 4 + j] == 0, j > i);
        }
    }
    let tail = ref_softmax_ibert(&x.region(&[2, 0], &[2, 4]), &p, 2).unwrap();
    assert_eq!(tail.data, full.data[8..]);
}

proptest! {
    #[test]
    fn softmax_rows_are_sub_distributions(row in prop::collection::vec(-127i8..=127, 1..64), shift in 0u32..6) {
        let d = row.len();
        let y = ref_softmax_ibert(&Tensor::i8(vec![1, d], &row), &params(0.04, shift), 0).unwrap();
        let s: i32 = y.data.iter().sum();
        prop_assert!(s <= 127);
        prop_assert!(s >= 127 - d as i32);
        prop_assert!(y.data.iter().all(|v| (0..=127).contains(v)));
    }
}

#[test]
fn rmsnorm_constant_and_zero_vectors() {
    let q = Requant::new(1, 16, 0).unwrap();
    let w = Tensor::i8(vec![8], &[50; 8]);
    let y = ref_rmsnorm_i32(&Tensor::i8(vec![1, 8], &[20; 8]), &w, 1, q).unwrap();
    let want = q.apply(((20i64 * 50) << 16) / isqrt(400 + 1) as i64);
    assert!(y.data.iter().all(|&v| v == want));
    assert_eq!(want, 50);
    let q = Requant::new(7, 3, -11).unwrap();
    let y = ref_rmsnorm_i32(&Tensor::i8(vec![2, 8], &[0; 16]), &w, 1, q).unwrap();
    assert!(y.data.iter().all(|&v| v == -11));
    assert!(ref_rmsnorm_i32(&Tensor::i8(vec![1, 8], &[0; 8]), &w, 0, q).is_err());
}

#[test]
fn rmsnorm_matches_wide_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    for _ in 0..100 {
        let x: Vec<i8> = (0..64).map(|_| rng.gen()).collect();
        let w: Vec<i8> = (0..64).map(|_| rng.gen()).collect();
        let eps: i64 = rng.gen_range(0..50);
        let (mul, shift, zp) = (rng.gen_range(1..200), rng.gen_range(8..24), rng.gen_range(-20..20));
        let y = ref_rmsnorm_i32(&Tensor::i8(vec![1, 64], &x), &Tensor::i8(vec![64], &w), eps, Requant::new(mul, shift, zp).unwrap());
        let ss: i128 = x.iter().map(|&v| v as i128 * v as i128).sum();
        let n = ss / 64 + eps as i128;
        if n == 0 {
            assert!(y.is_err());
            continue;
        }
        let y = y.unwrap();
        assert!(ss < i32::MAX as i128);
        let mut r: i128 = 0;
        while (r + 1) * (r + 1) <= n {
            r += 1;
        }
        for j in 0..64 {
            let num = x[j] as i128 * w[j] as i128 * 65536;
            assert!(num.abs() < i32::MAX as i128);
            let v = num / r;
            let t = v * mul as i128;
            let d = 1i128 << shift;
            let rq = if t >= 0 { (t + d / 2) / d } else { -((-t + d / 2) / d) };
            assert_eq!(y.data[j] as i128, (zp as i128 + rq).clamp(-128, 127));
        }
    }
}

fn tables(angles: &[Vec<f64>]) -> (Tensor, Tensor) {
    let p = angles.len();
    let h = angles[0].len();
    let c: Vec<i32> = angles.iter().flatten().map(|a| (a.cos() * 32767.0).round() as i32).collect();
    let s: Vec<i32> = angles.iter().flatten().map(|a| (a.sin() * 32767.0).round() as i32).collect();
    (Tensor::new(DataType::I16, vec![p, h], c), Tensor::new(DataType::I16, vec![p, h], s))
}

#[test]
fn rope_zero_and_quarter_turn() {
    let q = Requant::new(1, 15, 0).unwrap();
    let x: Vec<i8> = vec![100, -7, 3, 127, -128, 5, 0, 1];
    let x = Tensor::i8(vec![1, 8], &x);
    let (c, s) = tables(&[vec![0.0; 2]]);
    assert_eq!(ref_rope_q(&x, &c, &s, 4, 0, 0, q).unwrap(), x);
    let (c, s) = tables(&[vec![std::f64::consts::FRAC_PI_2; 2]]);
    let y = ref_rope_q(&x, &c, &s, 4, 0, 0, q).unwrap();
    for p in 0..4 {
        let (a, b) = (x.data[2 * p], x.data[2 * p + 1]);
        assert!((y.data[2 * p] - (-b).clamp(-128, 127)).abs() <= 1);
        assert!((y.data[2 * p + 1] - a).abs() <= 1);
    }
}

#[test]
fn rope_matches_float_rotation() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let angles: Vec<Vec<f64>> = (0..3).map(|_| (0..2).map(|_| rng.gen_range(-3.2..3.2)).collect()).collect();
    let (c, s) = tables(&angles);
    let x: Vec<i8> = (0..16).map(|_| rng.gen_range(-127..=127)).collect();
    let xt = Tensor::i8(vec![2, 8], &x);
    let y = ref_rope_q(&xt, &c, &s, 4, 1, 0, Requant::new(1, 15, 0).unwrap()).unwrap();
    for r in 0..2 {
        for h in 0..2 {
            #[allow(clippy::needless_range_loop)]
            for i in 0..2 {
                let th = angles[1 + r][i];
                let k = r * 8 + h * 4 + 2 * i;
                let (a, b) = (x[k] as f64, x[k + 1] as f64);
                let y0 = (a * th.cos() - b * th.sin()).round().clamp(-128.0, 127.0);
                let y1 = (a * th.sin() + b * th.cos()).round().clamp(-128.0, 127.0);
                assert!((y.data[k] as f64 - y0).abs() <= 1.0, "{} vs {y0}", y.data[k]);
                assert!((y.data[k + 1] as f64 - y1).abs() <= 1.0);
            }
        }
    }
    assert!(ref_rope_q(&xt, &c, &s, 4, 2, 0, Requant::IDENTITY).is_err());
    assert!(ref_rope_q(&xt, &c, &s, 3, 0, 0, Requant::IDENTITY).is_err());
}

fn rand_tensor(rng: &mut ChaCha8Rng, dtype: DataType, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| match dtype.bits {
            8 => rng.gen_range(-127..=127),
            16 => rng.gen_range(-32767..=32767),
            _ => rng.gen_range(-5000..5000),
        })
        .collect();
    Tensor::new(dtype, shape, data)
}

fn rq(n: Node) -> Node {
    n.with_attr("mul", 41).with_attr("shift", 9).with_attr("zp", 2)
}

/// A random instance of `op`: the node and its input tensors.
fn instance(rng: &mut ChaCha8Rng, op: OpKind) -> (Node, Vec<Tensor>) {
    let ins = |k: usize| (0..k).map(|i| format!("i{i}")).collect::<Vec<_>>();
    let node = |k: usize| Node::new("n", op, ins(k), vec!["y".into()]);
    let (s, d) = (rng.gen_range(1..7), rng.gen_range(1..5) * 4);
    let i8t = |rng: &mut ChaCha8Rng, shape: Vec<usize>| rand_tensor(rng, DataType::I8, shape);
    match op {
        OpKind::Gemm | OpKind::GemmQ8 => {
            let (m, n, o) = (rng.gen_range(1..9), rng.gen_range(1..9), rng.gen_range(1..9));
            let batched = rng.gen_bool(0.3);
            let tb = rng.gen_bool(0.5);
            let mut nd = node(2).with_attr("trans_b", tb as i64);
            if op == OpKind::GemmQ8 {
                nd = rq(nd);
            }
            let b_shape = if tb { vec![o, n] } else { vec![n, o] };
            if batched {
                let bt = rng.gen_range(1..4);
                let mut bs = vec![bt];
                bs.extend(b_shape);
                (nd, vec![i8t(rng, vec![bt, m, n]), i8t(rng, bs)])
            } else {
                let mut v = vec![i8t(rng, vec![m, n]), i8t(rng, b_shape)];
                let bias = if rng.gen_bool(0.5) { vec![o] } else { vec![m, o] };
                v.push(rand_tensor(rng, DataType::I32, bias));
                nd.inputs = ins(3);
                (nd, v)
            }
        }
        OpKind::ConvPw => {
            let (w, ci, co) = (rng.gen_range(1..9), rng.gen_range(1..9), rng.gen_range(1..70));
            let nd = rq(node(3))
                .with_attr("h", 1)
                .with_attr("w", w as i64)
                .with_attr("c_in", ci as i64)
                .with_attr("c_out", co as i64);
            (
                nd,
                vec![i8t(rng, vec![w, ci]), i8t(rng, vec![co, 1, 1, ci]), rand_tensor(rng, DataType::I32, vec![co])],
            )
        }
        OpKind::Requant => (rq(node(1)), vec![rand_tensor(rng, DataType::I32, vec![s, d])]),
        OpKind::RmsNorm => (rq(node(2)).with_attr("eps", 3), vec![i8t(rng, vec![s, d]), i8t(rng, vec![d])]),
        OpKind::Rope => {
            let pos = rng.gen_range(0..4);
            let nd = node(3).with_attr("head_dim", 4).with_attr("pos_offset", pos).with_attr("mul", 1).with_attr("shift", 15).with_attr("zp", 0);
            let p = pos as usize + s + rng.gen_range(0..3);
            (
                nd,
                vec![i8t(rng, vec![s, d]), rand_tensor(rng, DataType::I16, vec![p, 2]), rand_tensor(rng, DataType::I16, vec![p, 2])],
            )
        }
        OpKind::Softmax => {
            let p = SoftmaxParams::for_scale(0.05, 3);
            let causal = rng.gen_bool(0.5);
            let nd = node(1)
                .with_attr("q_ln2", p.q_ln2)
                .with_attr("q_b", p.q_b)
                .with_attr("q_c", p.q_c)
                .with_attr("in_shift", 3)
                .with_attr("out_bits", 7)
                .with_attr("causal", causal as i64)
                .with_attr("causal_offset", rng.gen_range(0..3));
            let b = rng.gen_range(1..4);
            (nd, vec![i8t(rng, vec![b, s, d])])
        }
        OpKind::Add => (
            node(2).with_attr("mul_a", 3).with_attr("mul_b", -5).with_attr("shift", 2).with_attr("zp", 1),
            vec![i8t(rng, vec![s, d]), i8t(rng, vec![s, d])],
        ),
        OpKind::Mul => (rq(node(2)), vec![i8t(rng, vec![s, d]), i8t(rng, vec![s, d])]),
        OpKind::Hardswish => (rq(node(1)).with_attr("three", 24).with_attr("six", 48), vec![i8t(rng, vec![s, d])]),
        OpKind::GatherRows => {
            let v = rng.gen_range(1..10);
            let idx = Tensor::i32(vec![s], &(0..s).map(|_| rng.gen_range(0..v as i32)).collect::<Vec<_>>());
            (node(2), vec![i8t(rng, vec![v, d]), idx])
        }
        OpKind::ConcatSeq => {
            let s2 = rng.gen_range(1..3);
            (node(2), vec![i8t(rng, vec![s, d]), i8t(rng, vec![s2, d])])
        }
        OpKind::Transpose => {
            let mut perm = vec![0i64, 1, 2];
            for i in (1..3).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            let e = rng.gen_range(1..4);
            (node(1).with_ints("perm", perm), vec![i8t(rng, vec![s, d, e])])
        }
        OpKind::SplitHeads => (node(1).with_attr("heads", 4), vec![i8t(rng, vec![s, d])]),
        OpKind::MergeHeads => {
            let (h, dh) = (rng.gen_range(1..5), rng.gen_range(1..4));
            (node(1), vec![i8t(rng, vec![h, s, dh])])
        }
    }
}

/// Executes `node` tile by tile on a random admissible tiling and stitches
/// the output tiles together.
fn stitched(rng: &mut ChaCha8Rng, node: &Node, inputs: &[Tensor], engine: EngineKind, out_shape: &[usize]) -> Tensor {
    let mut ranks: Vec<usize> = inputs.iter().map(|t| t.shape.len()).collect();
    ranks.push(out_shape.len());
    let spec = tile_constraints_for(node.op, engine, node, &ranks);
    let out = inputs.len();
    let tile: Vec<usize> = (0..out_shape.len())
        .map(|d| {
            let e = out_shape[d];
            if spec.output_dim_untileable(out, d) {
                return e;
            }
            let mult = spec.platform.iter().find_map(|r| match r {
                tinydeploy::kernels::TileRule::MultipleOrFull(x, k) if *x == (out, d) => Some(*k),
                _ => None,
            });
            match mult {
                Some(k) if e > k && rng.gen_bool(0.7) => k * rng.gen_range(1..=e / k),
                Some(_) => e,
                None => rng.gen_range(1..=e),
            }
        })
        .collect();
    let mut y: Option<Tensor> = None;
    let grid: Vec<usize> = out_shape.iter().zip(&tile).map(|(e, t)| e.div_ceil(*t)).collect();
    let mut idx = vec![0; grid.len()];
    loop {
        let origin: Vec<usize> = idx.iter().zip(&tile).map(|(i, t)| i * t).collect();
        let extent: Vec<usize> = (0..tile.len()).map(|d| tile[d].min(out_shape[d] - origin[d])).collect();
        let tiles: Vec<Tensor> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let (o, e) = spec.input_region(i, &t.shape, out, &origin, &extent);
                t.region(&o, &e)
            })
            .collect();
        let refs: Vec<&Tensor> = tiles.iter().collect();
        let part = eval_tile(node, &refs, &origin).unwrap();
        assert_eq!(part.shape, extent, "{} tile shape", node.op);
        let full = y.get_or_insert_with(|| Tensor::zeros(part.dtype, out_shape.to_vec()));
        full.write_region(&origin, &part);
        let mut d = grid.len();
        loop {
            if d == 0 {
                return y.unwrap();
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < grid[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

#[test]
fn tiled_execution_equals_untiled() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for op in OpKind::ALL {
        for _ in 0..60 {
            let (node, inputs) = instance(&mut rng, op);
            let refs: Vec<&Tensor> = inputs.iter().collect();
            let whole = eval_node(&node, &refs).unwrap_or_else(|e| panic!("{op}: {e}"));
            let engine = if op == OpKind::ConvPw && rng.gen_bool(0.5) { EngineKind::ConvNpu } else { EngineKind::MultiCoreCluster };
            let tiled = stitched(&mut rng, &node, &inputs, engine, &whole.shape);
            assert_eq!(tiled, whole, "{op}");
            assert!(whole.dtype != DataType::I8 || whole.data.iter().all(|v| (-128..=127).contains(v)));
        }
    }
}

#[test]
fn gemm_rules_fix_reduction() {
    let n = Node::new("g", OpKind::GemmQ8, vec![], vec![]).with_attr("trans_b", 0);
    let spec = tile_constraints_for(OpKind::GemmQ8, EngineKind::MultiCoreCluster, &n, &[2, 2, 2]);
    use tinydeploy::kernels::TileRule::*;
    assert!(spec.geometric.contains(&Untileable((0, 1))));
    assert!(spec.geometric.contains(&Untileable((1, 0))));
    assert!(spec.geometric.contains(&Equal((0, 0), (2, 0))));
    assert!(spec.geometric.contains(&Equal((1, 1), (2, 1))));
    assert!(!spec.output_dim_untileable(2, 0));
    assert!(!spec.output_dim_untileable(2, 1));
}
