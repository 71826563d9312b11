//! Deterministic graph builders: tiny Llama decoders (parallel prompt
//! processing or one autoregressive step with KV caches), a single encoder
//! layer, and small GEMM micro-benchmarks.
//!
//! Weights are pseudo-random int8 drawn from one ChaCha8 stream per tensor,
//! so both Llama modes built from one seed carry identical payloads.
//! Requantization parameters are calibrated on a fixed token sequence so
//! every requantized activation spans a sizeable part of the int8 range.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ir::{validate, Buffer, DataType, Graph, Node, OpKind, Scope};
use crate::kernels::{eval_node, KernelError, SoftmaxParams, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum ZooError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("calibration: {0}")]
    Kernel(#[from] KernelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Process `seq` tokens at positions `0..seq` with a causal mask.
    Parallel { seq: usize },
    /// Process one new token at position `past`, reading `past` cached
    /// keys and values per layer and returning the extended caches.
    Autoregressive { past: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LlamaConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub context: usize,
    pub seed: u64,
    pub mode: Mode,
}

impl LlamaConfig {
    /// 64 hidden, 16 heads, 8 layers, 256 feed-forward.
    pub fn tiny(mode: Mode) -> LlamaConfig {
        LlamaConfig {
            d_model: 64,
            heads: 16,
            layers: 8,
            d_ff: 256,
            vocab: 256,
            context: 256,
            seed: 0,
            mode,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    /// Number of tokens the graph processes.
    pub fn new_tokens(&self) -> usize {
        match self.mode {
            Mode::Parallel { seq } => seq,
            Mode::Autoregressive { .. } => 1,
        }
    }

    pub fn past(&self) -> usize {
        match self.mode {
            Mode::Parallel { .. } => 0,
            Mode::Autoregressive { past } => past,
        }
    }

    pub fn check(&self) -> Result<(), ZooError> {
        let err = |m: String| Err(ZooError::Config(m));
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return err(format!("d_model {} must be a positive multiple of heads {}", self.d_model, self.heads));
        }
        if !self.head_dim().is_multiple_of(2) {
            return err(format!("head dimension {} must be even for rotary embeddings", self.head_dim()));
        }
        if self.layers == 0 || self.d_ff == 0 || self.vocab == 0 {
            return err("layers, d_ff and vocab must be positive".into());
        }
        if self.new_tokens() == 0 {
            return err("sequence length must be positive".into());
        }
        if self.past() + self.new_tokens() > self.context {
            return err(format!(
                "{} positions exceed the context length {}",
                self.past() + self.new_tokens(),
                self.context
            ));
        }
        Ok(())
    }
}

/// Calibration sequence length.
const CALIBRATION_TOKENS: usize = 16;
/// Target magnitude of calibrated activations.
const TARGET_MAX: i64 = 112;
/// Real value of one attention-score step, and the softmax input shift.
const SCORE_SCALE: f64 = 1.0 / 16.0;
const SCORE_SHIFT: u32 = 4;
/// Hardswish breakpoints in gate codes: 3.0 and 6.0.
const HS_THREE: i64 = 32;

fn weight_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn i8_bytes(rng: &mut ChaCha8Rng, n: usize, lo: i8, hi: i8) -> Vec<u8> {
    (0..n).map(|_| rng.gen_range(lo..=hi) as u8).collect()
}

/// Rotary tables in Q15: `cos/sin(p · 10000^(-2i/head_dim))`.
fn rope_tables(context: usize, head_dim: usize) -> (Vec<u8>, Vec<u8>) {
    let half = head_dim / 2;
    let (mut c, mut s) = (Vec::new(), Vec::new());
    for p in 0..context {
        for i in 0..half {
            let theta = p as f64 * 10000f64.powf(-2.0 * i as f64 / head_dim as f64);
            let q = |v: f64| ((v * 32767.0).round() as i16).to_le_bytes();
            c.extend(q(theta.cos()));
            s.extend(q(theta.sin()));
        }
    }
    (c, s)
}

fn with_q(node: &Node, mul: i64, shift: i64) -> Node {
    let n = node.clone();
    let n = if node.op == OpKind::Add {
        n.with_attr("mul_a", mul).with_attr("mul_b", mul)
    } else {
        n.with_attr("mul", mul)
    };
    n.with_attr("shift", shift).with_attr("zp", 0)
}

fn max_abs(t: &Tensor) -> i64 {
    t.data.iter().map(|v| (*v as i64).abs()).max().unwrap_or(0)
}

/// Multiplier and shift that map the node's largest pre-requant magnitude
/// on `inputs` to about `TARGET_MAX`.
fn calibrate(node: &Node, inputs: &[&Tensor]) -> Result<(i64, i64), KernelError> {
    let peak = |shift: i64| -> Result<i64, KernelError> { Ok(max_abs(&eval_node(&with_q(node, 1, shift), inputs)?)) };
    // Smallest shift that leaves the unit-multiplier output unsaturated.
    let (mut lo, mut hi) = (0i64, 48i64);
    if peak(0)? < 127 {
        hi = 0;
    }
    while lo < hi {
        let mid = (lo + hi) / 2;
        if peak(mid)? < 127 {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let m = peak(hi)?;
    if m == 0 {
        return Ok((1, 0));
    }
    Ok(((TARGET_MAX * 128 / m).max(1), hi + 7))
}

struct Builder {
    g: Graph,
    seed: u64,
    /// Values of every buffer while calibrating.
    env: Option<BTreeMap<String, Tensor>>,
    calib: BTreeMap<String, (i64, i64)>,
}

impl Builder {
    fn new(name: &str, seed: u64, calibrating: bool, calib: BTreeMap<String, (i64, i64)>) -> Builder {
        Builder {
            g: Graph::new(name),
            seed,
            env: calibrating.then(BTreeMap::new),
            calib,
        }
    }

    fn constant(&mut self, name: &str, shape: Vec<usize>, dtype: DataType, payload: Vec<u8>) {
        if let Some(env) = &mut self.env {
            env.insert(name.to_string(), Tensor::from_bytes(dtype, shape.clone(), &payload).unwrap());
        }
        self.g.add_buffer(Buffer::constant(name, shape, dtype, payload));
    }

    /// Random int8 weight from its own stream.
    fn weight(&mut self, name: &str, shape: Vec<usize>, stream: u64, lo: i8, hi: i8) {
        let n = shape.iter().product();
        let payload = i8_bytes(&mut weight_rng(self.seed, stream), n, lo, hi);
        self.constant(name, shape, DataType::I8, payload);
    }

    fn input(&mut self, name: &str, shape: Vec<usize>, dtype: DataType, value: Option<Tensor>) {
        self.g.add_buffer(Buffer::variable(name, Scope::Global, shape, Some(dtype)));
        self.g.inputs.push(name.to_string());
        if let (Some(env), Some(v)) = (&mut self.env, value) {
            env.insert(name.to_string(), v);
        }
    }

    fn output(&mut self, name: &str) {
        self.g.buffer_mut(name).unwrap().scope = Scope::Global;
        self.g.outputs.push(name.to_string());
    }

    /// Adds `op(inputs) -> out`; requantizing ops are calibrated when
    /// building the calibration graph and looked up otherwise.
    fn op(&mut self, op: OpKind, name: &str, inputs: &[&str], out: &str, attrs: &[(&str, i64)]) -> Result<String, ZooError> {
        let mut n = Node::new(name, op, inputs.iter().map(|s| s.to_string()).collect(), vec![out.to_string()]);
        for (k, v) in attrs {
            n = n.with_attr(k, *v);
        }
        let requantizes = matches!(
            op,
            OpKind::Requant | OpKind::RmsNorm | OpKind::Add | OpKind::Mul | OpKind::Hardswish
        );
        if let Some(env) = &self.env {
            let args: Vec<&Tensor> = inputs.iter().map(|i| &env[*i]).collect();
            if requantizes {
                let q = calibrate(&n, &args)?;
                self.calib.insert(name.to_string(), q);
            }
        }
        if requantizes {
            let (mul, shift) = self.calib.get(name).copied().unwrap_or((1, 8));
            n = with_q(&n, mul, shift);
        }
        if let Some(env) = &mut self.env {
            let args: Vec<&Tensor> = inputs.iter().map(|i| &env[*i]).collect();
            let y = eval_node(&n, &args)?;
            env.insert(out.to_string(), y);
        }
        let mut b = Buffer::variable(out, Scope::Local, vec![], None);
        b.shape = self.shape_of(&n)?;
        self.g.add_buffer(b);
        self.g.add_node(n);
        Ok(out.to_string())
    }

    fn shape_of(&self, n: &Node) -> Result<Vec<usize>, ZooError> {
        let shapes: Vec<&[usize]> = n.inputs.iter().map(|i| self.g.buffer(i).unwrap().shape.as_slice()).collect();
        crate::ir::infer_output_shapes(n, &shapes)
            .map(|mut v| v.remove(0))
            .map_err(|e| ZooError::Config(format!("node `{}`: {e}", n.name)))
    }

    /// `requant(x · W)` with `W` laid out `[in × out]`.
    fn linear(&mut self, p: &str, x: &str, w: &str) -> Result<String, ZooError> {
        let acc = self.op(OpKind::Gemm, &format!("{p}.mm"), &[x, w], &format!("{p}.acc"), &[])?;
        self.op(OpKind::Requant, &format!("{p}.rq"), &[&acc], p, &[])
    }
}

/// Knobs of one transformer block.
#[derive(Clone, Copy)]
struct Block {
    d: usize,
    heads: usize,
    d_ff: usize,
    past: usize,
    causal: bool,
    rope: bool,
    cache: bool,
}

/// Weight streams per block.
const STREAMS_PER_LAYER: u64 = 16;

/// Pre-norm attention and gated feed-forward block with residuals.
fn block(b: &mut Builder, l: usize, x: &str, k: Block) -> Result<String, ZooError> {
    let p = |s: &str| format!("l{l}.{s}");
    let stream = |i: u64| STREAMS_PER_LAYER * (l as u64 + 1) + i;
    let (d, dh) = (k.d, k.d / k.heads);
    b.weight(&p("g1"), vec![d], stream(0), 32, 127);
    b.weight(&p("wq"), vec![d, d], stream(1), -128, 127);
    b.weight(&p("wk"), vec![d, d], stream(2), -128, 127);
    b.weight(&p("wv"), vec![d, d], stream(3), -128, 127);
    b.weight(&p("wo"), vec![d, d], stream(4), -128, 127);
    b.weight(&p("g2"), vec![d], stream(5), 32, 127);
    b.weight(&p("wg"), vec![d, k.d_ff], stream(6), -128, 127);
    b.weight(&p("wu"), vec![d, k.d_ff], stream(7), -128, 127);
    b.weight(&p("wd"), vec![k.d_ff, d], stream(8), -128, 127);

    let n1 = b.op(OpKind::RmsNorm, &p("norm1"), &[x, &p("g1")], &p("n1"), &[("eps", 1)])?;
    let mut q = b.linear(&p("q"), &n1, &p("wq"))?;
    let mut kk = b.linear(&p("k"), &n1, &p("wk"))?;
    let v = b.linear(&p("v"), &n1, &p("wv"))?;
    if k.rope {
        let r = [("head_dim", dh as i64), ("pos_offset", k.past as i64), ("mul", 1), ("shift", 15), ("zp", 0)];
        q = b.op(OpKind::Rope, &p("rope_q"), &[&q, "rope_cos", "rope_sin"], &p("qr"), &r)?;
        kk = b.op(OpKind::Rope, &p("rope_k"), &[&kk, "rope_cos", "rope_sin"], &p("kr"), &r)?;
    }
    let (mut kc, mut vc) = (kk, v);
    if k.cache {
        if k.past > 0 {
            let (kin, vin) = (p("k_cache"), p("v_cache"));
            b.input(&kin, vec![k.past, d], DataType::I8, None);
            b.input(&vin, vec![k.past, d], DataType::I8, None);
            kc = b.op(OpKind::ConcatSeq, &p("concat_k"), &[&kin, &kc], &p("k_next"), &[])?;
            vc = b.op(OpKind::ConcatSeq, &p("concat_v"), &[&vin, &vc], &p("v_next"), &[])?;
        }
        b.output(&kc);
        b.output(&vc);
    }
    let h = [("heads", k.heads as i64)];
    let qh = b.op(OpKind::SplitHeads, &p("split_q"), &[&q], &p("qh"), &h)?;
    let kh = b.op(OpKind::SplitHeads, &p("split_k"), &[&kc], &p("kh"), &h)?;
    let vh = b.op(OpKind::SplitHeads, &p("split_v"), &[&vc], &p("vh"), &h)?;
    let sc = b.op(OpKind::Gemm, &p("scores.mm"), &[&qh, &kh], &p("scores.acc"), &[("trans_b", 1)])?;
    let s8 = b.op(OpKind::Requant, &p("scores.rq"), &[&sc], &p("scores"), &[])?;
    let sp = SoftmaxParams::for_scale(SCORE_SCALE, SCORE_SHIFT);
    let pr = b.op(
        OpKind::Softmax,
        &p("softmax"),
        &[&s8],
        &p("probs"),
        &[
            ("q_ln2", sp.q_ln2),
            ("q_b", sp.q_b),
            ("q_c", sp.q_c),
            ("in_shift", sp.in_shift as i64),
            ("out_bits", sp.out_bits as i64),
            ("causal", k.causal as i64),
            ("causal_offset", k.past as i64),
        ],
    )?;
    let cx = b.op(OpKind::Gemm, &p("ctx.mm"), &[&pr, &vh], &p("ctx.acc"), &[])?;
    let c8 = b.op(OpKind::Requant, &p("ctx.rq"), &[&cx], &p("ctx"), &[])?;
    let m = b.op(OpKind::MergeHeads, &p("merge"), &[&c8], &p("attn"), &[])?;
    let o = b.linear(&p("o"), &m, &p("wo"))?;
    let x1 = b.op(OpKind::Add, &p("res1"), &[x, &o], &p("x1"), &[])?;
    let n2 = b.op(OpKind::RmsNorm, &p("norm2"), &[&x1, &p("g2")], &p("n2"), &[("eps", 1)])?;
    let gate = b.linear(&p("gate"), &n2, &p("wg"))?;
    let up = b.linear(&p("up"), &n2, &p("wu"))?;
    let hs = b.op(
        OpKind::Hardswish,
        &p("hswish"),
        &[&gate],
        &p("act"),
        &[("three", HS_THREE), ("six", 2 * HS_THREE)],
    )?;
    let f = b.op(OpKind::Mul, &p("gated"), &[&hs, &up], &p("ffn"), &[])?;
    let dn = b.linear(&p("down"), &f, &p("wd"))?;
    b.op(OpKind::Add, &p("res2"), &[&x1, &dn], &p("x2"), &[])
}

fn llama_graph(cfg: &LlamaConfig, calibrating: bool, calib: BTreeMap<String, (i64, i64)>) -> Result<Builder, ZooError> {
    let (seq, past) = if calibrating {
        (CALIBRATION_TOKENS.min(cfg.context), 0)
    } else {
        (cfg.new_tokens(), cfg.past())
    };
    let name = match (calibrating, cfg.mode) {
        (true, _) => "llama_calibration".to_string(),
        (false, Mode::Parallel { seq }) => format!("llama_l{}_par{seq}", cfg.layers),
        (false, Mode::Autoregressive { past }) => format!("llama_l{}_ar{past}", cfg.layers),
    };
    let mut b = Builder::new(&name, cfg.seed, calibrating, calib);
    let (d, dh) = (cfg.d_model, cfg.head_dim());
    b.weight("embed", vec![cfg.vocab, d], 0, -128, 127);
    let (cos, sin) = rope_tables(cfg.context, dh);
    b.constant("rope_cos", vec![cfg.context, dh / 2], DataType::I16, cos);
    b.constant("rope_sin", vec![cfg.context, dh / 2], DataType::I16, sin);
    let tokens = calibrating.then(|| {
        let mut r = weight_rng(cfg.seed, 1);
        let t: Vec<i32> = (0..seq).map(|_| r.gen_range(0..cfg.vocab as i32)).collect();
        Tensor::i32(vec![seq], &t)
    });
    b.input("tokens", vec![seq], DataType::I32, tokens);
    let mut x = b.op(OpKind::GatherRows, "embed_lookup", &["embed", "tokens"], "x0", &[])?;
    for l in 0..cfg.layers {
        let k = Block {
            d,
            heads: cfg.heads,
            d_ff: cfg.d_ff,
            past,
            causal: true,
            rope: true,
            cache: matches!(cfg.mode, Mode::Autoregressive { .. }) && !calibrating,
        };
        x = block(&mut b, l, &x, k)?;
    }
    b.weight("gf", vec![d], 2, 32, 127);
    b.weight("lm_head", vec![d, cfg.vocab], 3, -128, 127);
    let nf = b.op(OpKind::RmsNorm, "final_norm", &[&x, "gf"], "nf", &[("eps", 1)])?;
    let logits = b.op(OpKind::Gemm, "lm_head.mm", &[&nf, "lm_head"], "logits", &[])?;
    b.output(&logits);
    // Caches come after the logits in the output list.
    let o = &mut b.g.outputs;
    o.rotate_right(1);
    Ok(b)
}

fn finish(mut g: Graph) -> Result<Graph, ZooError> {
    g.prune_unused_buffers();
    let diags = validate(&g);
    if let Some(d) = diags.first() {
        return Err(ZooError::Config(format!("builder produced an invalid graph: {d}")));
    }
    Ok(g)
}

/// Requantization parameters of a Llama configuration, independent of the
/// mode.
fn llama_calibration(cfg: &LlamaConfig) -> Result<BTreeMap<String, (i64, i64)>, ZooError> {
    Ok(llama_graph(cfg, true, BTreeMap::new())?.calib)
}

/// Decoder graph. Inputs are `tokens` then, in autoregressive mode with a
/// non-empty past, `l{i}.k_cache` and `l{i}.v_cache` per layer. Outputs are
/// int32 `logits` then the extended caches per layer.
pub fn build_llama(cfg: &LlamaConfig) -> Result<Graph, ZooError> {
    cfg.check()?;
    let calib = llama_calibration(cfg)?;
    finish(llama_graph(cfg, false, calib)?.g)
}

/// Parallel-mode graph and one autoregressive graph per past length in
/// `pasts`, sharing one calibration.
pub fn build_llama_family(cfg: &LlamaConfig, pasts: &[usize]) -> Result<(Graph, Vec<Graph>), ZooError> {
    cfg.check()?;
    let calib = llama_calibration(cfg)?;
    let par = finish(llama_graph(cfg, false, calib.clone())?.g)?;
    let mut ar = Vec::new();
    for &past in pasts {
        let c = LlamaConfig {
            mode: Mode::Autoregressive { past },
            ..*cfg
        };
        c.check()?;
        ar.push(finish(llama_graph(&c, false, calib.clone())?.g)?);
    }
    Ok((par, ar))
}

fn encoder_graph(d: usize, h: usize, d_ff: usize, s: usize, seed: u64, calibrating: bool, calib: BTreeMap<String, (i64, i64)>) -> Result<Builder, ZooError> {
    let mut b = Builder::new(&format!("encoder_s{s}"), seed, calibrating, calib);
    let x = calibrating.then(|| {
        let mut r = weight_rng(seed, 1);
        let v: Vec<i8> = (0..s * d).map(|_| r.gen()).collect();
        Tensor::i8(vec![s, d], &v)
    });
    b.input("x", vec![s, d], DataType::I8, x);
    let k = Block {
        d,
        heads: h,
        d_ff,
        past: 0,
        causal: false,
        rope: false,
        cache: false,
    };
    let y = block(&mut b, 0, "x", k)?;
    b.output(&y);
    Ok(b)
}

/// One encoder layer: attention without mask and the gated feed-forward,
/// on an int8 input `x = [S × d_m]`.
pub fn build_encoder_layer(d_m: usize, h: usize, d_ff: usize, s: usize) -> Result<Graph, ZooError> {
    build_encoder_layer_seeded(d_m, h, d_ff, s, 0)
}

pub fn build_encoder_layer_seeded(d_m: usize, h: usize, d_ff: usize, s: usize, seed: u64) -> Result<Graph, ZooError> {
    if d_m == 0 || h == 0 || !d_m.is_multiple_of(h) || d_ff == 0 || s == 0 {
        return Err(ZooError::Config(format!("encoder dims d_m={d_m} h={h} d_ff={d_ff} S={s}")));
    }
    let calib = encoder_graph(d_m, h, d_ff, s, seed, true, BTreeMap::new())?.calib;
    finish(encoder_graph(d_m, h, d_ff, s, seed, false, calib)?.g)
}

/// `x[m × k0] · W_0 · W_1 …` with a requant after each GEMM.
pub fn build_gemm_chain(m: usize, dims: &[usize], seed: u64) -> Result<Graph, ZooError> {
    if m == 0 || dims.len() < 2 || dims.contains(&0) {
        return Err(ZooError::Config(format!("gemm chain {m} × {dims:?}")));
    }
    let mut b = Builder::new(&format!("gemm_chain_{m}x{}", dims.len() - 1), seed, false, BTreeMap::new());
    b.input("x", vec![m, dims[0]], DataType::I8, None);
    let mut x = "x".to_string();
    for (i, w) in dims.windows(2).enumerate() {
        let wn = format!("w{i}");
        b.weight(&wn, vec![w[0], w[1]], i as u64, -128, 127);
        let acc = b.op(OpKind::Gemm, &format!("mm{i}"), &[&x, &wn], &format!("acc{i}"), &[])?;
        // Keep sums of `k0` int8 products inside int8 after the shift.
        let shift = 2 * 7 + (usize::BITS - w[0].leading_zeros()) as i64 - 7;
        b.calib.insert(format!("rq{i}"), (1, shift));
        x = b.op(OpKind::Requant, &format!("rq{i}"), &[&acc], &format!("h{i}"), &[])?;
    }
    b.output(&x);
    finish(b.g)
}

/// A graph whose only input is also its only output.
pub fn build_identity(shape: Vec<usize>) -> Graph {
    let mut g = Graph::new("identity");
    g.add_buffer(Buffer::variable("x", Scope::Global, shape, Some(DataType::I8)));
    g.inputs = vec!["x".into()];
    g.outputs = vec!["x".into()];
    g
}

/// Random inputs for `g`: index inputs of row gathers are drawn inside the
/// table, everything else uniformly over its type.
pub fn sample_inputs(g: &Graph, seed: u64) -> BTreeMap<String, Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: BTreeMap<&str, usize> = BTreeMap::new();
    for n in g.nodes.iter().filter(|n| n.op == OpKind::GatherRows) {
        if let Some(t) = g.buffer(&n.inputs[0]) {
            rows.insert(n.inputs[1].as_str(), t.shape[0]);
        }
    }
    g.inputs
        .iter()
        .map(|name| {
            let b = g.buffer(name).unwrap();
            let dt = b.dtype.unwrap_or(DataType::I8);
            let t = match rows.get(name.as_str()) {
                Some(&v) => {
                    let data: Vec<i32> = (0..b.numel()).map(|_| rng.gen_range(0..v as i32)).collect();
                    Tensor::new(dt, b.shape.clone(), data)
                }
                None => {
                    let bytes: Vec<u8> = (0..b.numel() * dt.bytes()).map(|_| rng.gen()).collect();
                    Tensor::from_bytes(dt, b.shape.clone(), &bytes).unwrap()
                }
            };
            (name.clone(), t)
        })
        .collect()
}

/// Multiply-accumulates of every matrix product in `g`.
pub fn count_macs(g: &Graph) -> u64 {
    let shape = |n: &str| g.buffer(n).map(|b| b.shape.clone()).unwrap_or_default();
    g.nodes
        .iter()
        .filter(|n| n.op.is_matmul())
        .map(|n| {
            let a = shape(&n.inputs[0]);
            let y = shape(&n.outputs[0]);
            let reduction = if n.op == OpKind::ConvPw { n.int_or("c_in", 0) as u64 } else { *a.last().unwrap_or(&0) as u64 };
            y.iter().map(|&v| v as u64).product::<u64>() * reduction
        })
        .sum()
}

/// Index of the largest value in the last row; ties go to the lowest index.
pub fn argmax_last_row(logits: &Tensor) -> usize {
    let v = *logits.shape.last().unwrap_or(&0);
    let row = &logits.data[logits.data.len() - v..];
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Next-step cache inputs from the outputs of an autoregressive step: the
/// extended caches of layer `l` feed `l{l}.k_cache` and `l{l}.v_cache`.
pub fn next_caches(g: &Graph, outputs: &BTreeMap<String, Tensor>) -> BTreeMap<String, Tensor> {
    g.outputs[1..]
        .chunks(2)
        .enumerate()
        .flat_map(|(l, kv)| {
            [
                (format!("l{l}.k_cache"), outputs[&kv[0]].clone()),
                (format!("l{l}.v_cache"), outputs[&kv[1]].clone()),
            ]
        })
        .collect()
}
