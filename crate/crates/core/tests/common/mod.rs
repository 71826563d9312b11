#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tinydeploy::ir::{validate, Buffer, DataType, Graph, Node, OpKind, Scope};
use tinydeploy::kernels::{interpret, Tensor};
use tinydeploy::pipeline::{compile, CompileOptions, Compiled};
use tinydeploy::sim::{run, SimResult};
use tinydeploy::target::TargetDescription;

pub fn rand_bytes(rng: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
    (0..n).map(|_| rng.gen()).collect()
}

/// Chain of `x[m×k0] · W_i -> requant` layers with constant weights.
pub fn gemm_chain(m: usize, dims: &[usize], seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new("chain");
    g.add_buffer(Buffer::variable("x", Scope::Global, vec![m, dims[0]], Some(DataType::I8)));
    let mut prev = "x".to_string();
    for (i, w) in dims.windows(2).enumerate() {
        let (n, o) = (w[0], w[1]);
        let wn = format!("w{i}");
        g.add_buffer(Buffer::constant(&wn, vec![n, o], DataType::I8, rand_bytes(&mut rng, n * o)));
        let acc = format!("acc{i}");
        g.add_buffer(Buffer::variable(&acc, Scope::Local, vec![m, o], None));
        let last = i + 2 == dims.len();
        let y = if last { "y".to_string() } else { format!("h{i}") };
        let scope = if last { Scope::Global } else { Scope::Local };
        g.add_buffer(Buffer::variable(&y, scope, vec![m, o], None));
        g.add_node(Node::new(format!("mm{i}"), OpKind::Gemm, vec![prev.clone(), wn], vec![acc.clone()]));
        g.add_node(
            Node::new(format!("rq{i}"), OpKind::Requant, vec![acc], vec![y.clone()])
                .with_attr("mul", 3)
                .with_attr("shift", 9)
                .with_attr("zp", 0),
        );
        prev = y;
    }
    g.inputs = vec!["x".into()];
    g.outputs = vec!["y".into()];
    assert!(validate(&g).is_empty(), "{:?}", validate(&g));
    g
}

/// Identity graph: the input is also the output.
pub fn identity(shape: Vec<usize>) -> Graph {
    let mut g = Graph::new("identity");
    g.add_buffer(Buffer::variable("x", Scope::Global, shape, Some(DataType::I8)));
    g.inputs = vec!["x".into()];
    g.outputs = vec!["x".into()];
    g
}

pub fn random_inputs(g: &Graph, seed: u64) -> BTreeMap<String, Tensor> {
    tinydeploy::zoo::sample_inputs(g, seed)
}

pub fn blobs(inputs: &BTreeMap<String, Tensor>) -> BTreeMap<String, Vec<u8>> {
    inputs.iter().map(|(k, v)| (k.clone(), v.to_bytes())).collect()
}

/// Compiles, simulates on `seeds` random inputs and compares every output
/// with the reference interpreter on the original graph.
pub fn check_exact(g: &Graph, t: &TargetDescription, opts: CompileOptions, seeds: u64) -> (Compiled, SimResult) {
    let c = compile(g, t, opts).unwrap_or_else(|e| panic!("compile {} {opts:?}: {e}", g.name));
    let mut last = None;
    for seed in 0..seeds {
        let inputs = random_inputs(g, seed);
        let want = interpret(g, &inputs).unwrap();
        let got = run(&c.program, &blobs(&inputs), t).unwrap_or_else(|e| panic!("sim {} seed {seed}: {e}", g.name));
        for (name, w) in &want {
            assert_eq!(&w.to_bytes(), &got.outputs[name], "{} output {name} seed {seed}", g.name);
        }
        last = Some(got);
    }
    (c, last.unwrap())
}

/// Offsets and peak of placing `order` with the stacking rule, written
/// independently of the library: each buffer sits on the highest top
/// among earlier-placed buffers whose step range intersects its own.
pub fn oracle_tetris(order: &[usize], spans: &[(usize, usize)], sizes: &[usize]) -> (Vec<usize>, usize) {
    let mut off = vec![0; sizes.len()];
    let mut placed: Vec<usize> = Vec::new();
    for &b in order {
        let mut base = 0;
        for &p in &placed {
            let (s0, e0) = spans[p];
            let (s1, e1) = spans[b];
            if s0.max(s1) <= e0.min(e1) {
                base = base.max(off[p] + sizes[p]);
            }
        }
        off[b] = base;
        placed.push(b);
    }
    let peak = order.iter().map(|&b| off[b] + sizes[b]).max().unwrap_or(0);
    (off, peak)
}

/// Minimum peak over every placement order.
pub fn oracle_min_peak(spans: &[(usize, usize)], sizes: &[usize]) -> usize {
    use itertools::Itertools;
    let n = sizes.len();
    if n == 0 {
        return 0;
    }
    (0..n)
        .permutations(n)
        .map(|o| oracle_tetris(&o, spans, sizes).1)
        .min()
        .unwrap()
}
