use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::ir::{BufferKind, DataType, OpKind, Scope};
use crate::kernels::Registry;
use crate::memalloc::{Dir, Transfer};

use super::{BackendError, Program, StepPlan};

/// What a free variable of a segment stands for.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Bound {
    /// Pointer to a graph buffer or tile arena at its static address.
    Buffer(String),
    /// Memory level array or a constant table.
    Symbol(String),
    Scalar(i64),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreeVar {
    pub name: String,
    /// C type of the variable, e.g. `int8_t *`.
    pub ctype: String,
    pub bound: Option<Bound>,
}

impl FreeVar {
    pub fn new(name: impl Into<String>, ctype: impl Into<String>, bound: Bound) -> FreeVar {
        FreeVar {
            name: name.into(),
            ctype: ctype.into(),
            bound: Some(bound),
        }
    }

    fn decl(&self) -> String {
        if self.ctype.ends_with('*') {
            format!("{}const {}", self.ctype, self.name)
        } else {
            format!("const {} {}", self.ctype, self.name)
        }
    }
}

/// Engine a segment runs on when it is not the host.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Offload {
    pub engine: String,
    /// Macro naming the engine id.
    pub symbol: String,
}

/// A piece of C code plus the identifiers it uses but does not define.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeSegment {
    /// Suggested name of the hoisted function if the segment is wrapped.
    pub name: String,
    pub text: String,
    /// In order of first use in `text`.
    pub free: Vec<FreeVar>,
    /// Function definitions to place at file scope.
    pub hoisted: Vec<String>,
    pub offload: Option<Offload>,
}

fn is_ident(c: u8) -> bool {
    c.is_ascii_alphanumeric() || c == b'_'
}

/// Byte position of the first whole-word occurrence of `word` in `text`.
fn first_use(text: &str, word: &str) -> Option<usize> {
    let b = text.as_bytes();
    let mut from = 0;
    while let Some(i) = text[from..].find(word) {
        let s = from + i;
        let e = s + word.len();
        let before = s == 0 || !is_ident(b[s - 1]);
        let after = e == b.len() || !is_ident(b[e]);
        if before && after {
            return Some(s);
        }
        from = s + 1;
    }
    None
}

impl CodeSegment {
    /// Keeps the candidates `text` actually uses, ordered by first use.
    pub fn new(name: impl Into<String>, text: impl Into<String>, candidates: Vec<FreeVar>) -> CodeSegment {
        let text = text.into();
        let mut used: Vec<(usize, FreeVar)> = Vec::new();
        for v in candidates {
            if used.iter().any(|(_, u)| u.name == v.name) {
                continue;
            }
            if let Some(p) = first_use(&text, &v.name) {
                used.push((p, v));
            }
        }
        used.sort_by_key(|(p, _)| *p);
        CodeSegment {
            name: name.into(),
            text,
            free: used.into_iter().map(|(_, v)| v).collect(),
            hoisted: Vec::new(),
            offload: None,
        }
    }

    /// Every free variable has a binding and is visible in `context`.
    pub fn check(&self, context: &BTreeSet<String>) -> Result<(), BackendError> {
        for v in &self.free {
            if v.bound.is_none() || !context.contains(&v.name) {
                return Err(BackendError::Unbound(v.name.clone()));
            }
        }
        Ok(())
    }
}

/// A segment hoisted into a function taking an environment record.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Closure {
    pub name: String,
    pub env_type: String,
    /// Captured variables, in record field order.
    pub env: Vec<FreeVar>,
    /// Record type and function, for file scope.
    pub definition: String,
    /// Builds the record and calls or offloads the function.
    pub invocation: String,
    /// Definitions of nested closures, innermost first.
    pub hoisted: Vec<String>,
    pub offload: Option<Offload>,
}

impl Closure {
    /// The invocation as a segment of the enclosing scope; its free
    /// variables are the captured ones. Wrapping it again nests closures.
    pub fn into_segment(self, name: impl Into<String>) -> CodeSegment {
        let mut hoisted = self.hoisted;
        hoisted.push(self.definition);
        CodeSegment {
            name: name.into(),
            text: self.invocation,
            free: self.env,
            hoisted,
            offload: None,
        }
    }
}

fn indent(text: &str, by: usize) -> String {
    let pad = " ".repeat(by);
    text.lines()
        .map(|l| if l.is_empty() { String::new() } else { format!("{pad}{l}") })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Hoists `seg` into a function. The environment holds the free variables
/// not in `globals`, in first-use order; globals are referenced directly.
pub fn make_closure(seg: &CodeSegment, globals: &BTreeSet<String>) -> Result<Closure, BackendError> {
    if let Some(v) = seg.free.iter().find(|v| v.bound.is_none()) {
        return Err(BackendError::Unbound(v.name.clone()));
    }
    let env: Vec<FreeVar> = seg.free.iter().filter(|v| !globals.contains(&v.name)).cloned().collect();
    let name = seg.name.clone();
    let env_type = format!("{name}_env_t");
    let mut def = String::new();
    if env.is_empty() {
        let _ = writeln!(def, "static void {name}(void *arg)\n{{\n    (void)arg;");
    } else {
        let _ = writeln!(def, "typedef struct {{");
        for v in &env {
            if v.ctype.ends_with('*') {
                let _ = writeln!(def, "    {}{};", v.ctype, v.name);
            } else {
                let _ = writeln!(def, "    {} {};", v.ctype, v.name);
            }
        }
        let _ = writeln!(def, "}} {env_type};\n");
        let _ = writeln!(def, "static void {name}(void *arg)\n{{");
        let _ = writeln!(def, "    const {env_type} *env = (const {env_type} *)arg;");
        for v in &env {
            let _ = writeln!(def, "    {} = env->{};", v.decl(), v.name);
        }
    }
    let _ = writeln!(def, "{}\n}}", indent(&seg.text, 4));
    let record = || {
        let fields: Vec<&str> = env.iter().map(|v| v.name.as_str()).collect();
        format!("{env_type} env = {{ {} }};", fields.join(", "))
    };
    let invocation = match (&seg.offload, env.is_empty()) {
        (Some(o), true) => format!("offload({}, {name}, 0);\noffload_wait({});", o.symbol, o.symbol),
        (Some(o), false) => format!(
            "{{\n    {}\n    offload({}, {name}, &env);\n    offload_wait({});\n}}",
            record(),
            o.symbol,
            o.symbol
        ),
        (None, true) => format!("{name}(0);"),
        (None, false) => format!("{{\n    {}\n    {name}(&env);\n}}", record()),
    };
    Ok(Closure {
        name,
        env_type,
        env,
        definition: def,
        invocation,
        hoisted: seg.hoisted.clone(),
        offload: seg.offload.clone(),
    })
}

/// C identifiers of everything placed in memory.
#[derive(Clone, Debug)]
pub struct Symbols {
    pub prefix: String,
    /// Graph buffer and arena name to C symbol.
    pub names: BTreeMap<String, String>,
    /// Level name to the symbol of its memory array.
    pub levels: BTreeMap<String, String>,
    /// File-scope symbols: memory arrays, global buffers, tables.
    pub globals: BTreeSet<String>,
}

fn sanitize(name: &str) -> String {
    let mut s: String = name.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
    if s.is_empty() {
        s.push('_');
    }
    s
}

impl Symbols {
    pub fn new(p: &Program) -> Symbols {
        let prefix = sanitize(&p.target.emit.prefix);
        let mut taken = BTreeSet::new();
        let mut unique = |base: String| {
            let mut s = base.clone();
            let mut n = 1;
            while !taken.insert(s.clone()) {
                s = format!("{base}_{n}");
                n += 1;
            }
            s
        };
        let mut levels = BTreeMap::new();
        for l in &p.levels {
            levels.insert(l.name.clone(), unique(format!("{prefix}_mem_{}", sanitize(&l.name))));
        }
        let mut names = BTreeMap::new();
        let mut globals: BTreeSet<String> = levels.values().cloned().collect();
        for b in &p.buffers {
            let s = unique(format!("{prefix}_buf_{}", sanitize(&b.name)));
            if b.scope == Scope::Global || b.kind == BufferKind::Constant {
                globals.insert(s.clone());
            }
            names.insert(b.name.clone(), s);
        }
        for a in &p.arenas {
            names.insert(a.name.clone(), unique(format!("{prefix}_arena_{}", sanitize(&a.name))));
        }
        for (s, _) in p.steps.iter().enumerate() {
            for t in ["dma", "xfer", "tile"] {
                globals.insert(format!("{prefix}_s{s}_{t}"));
            }
        }
        Symbols {
            prefix,
            names,
            levels,
            globals,
        }
    }

    fn buffer(&self, name: &str) -> &str {
        &self.names[name]
    }

    pub fn engine_macro(&self, engine: &str) -> String {
        format!("{}_ENGINE_{}", self.prefix.to_uppercase(), sanitize(engine).to_uppercase())
    }
}

fn ptr_type(d: DataType) -> String {
    format!("{} *", d.c_type())
}

/// Scalar hole value of one tile.
#[derive(Clone, Debug, PartialEq, Eq)]
enum Hole {
    Int(i64),
    Ints(Vec<i64>),
}

fn prod(v: &[usize]) -> i64 {
    v.iter().product::<usize>() as i64
}

/// Values of the scalar holes of `step` at tile `k`, computed from the
/// tile's operand regions.
fn scalar_holes(p: &Program, step: &StepPlan, k: usize) -> Result<BTreeMap<&'static str, Hole>, BackendError> {
    let n = &step.node;
    let regions = &step.loops.regions[k];
    let out = step.operands.len() - 1;
    let oe = &regions[out].extent;
    let oo = &regions[out].origin;
    let ext = |j: usize| &regions[j].extent;
    let r = oe.len();
    let attr = |key: &str| {
        n.int(key)
            .ok_or_else(|| BackendError::Internal(format!("node `{}` lacks attribute `{key}`", n.name)))
    };
    let elem = |j: usize| p.buffer(&step.operands[j].buffer).map(|b| b.dtype.bytes() as i64).unwrap_or(1);
    let mut h: BTreeMap<&'static str, Hole> = BTreeMap::new();
    let mut set = |k: &'static str, v: i64| {
        h.insert(k, Hole::Int(v));
    };
    match n.op {
        OpKind::Gemm | OpKind::GemmQ8 => {
            set("batch", if r == 3 { oe[0] as i64 } else { 1 });
            set("m", oe[r - 2] as i64);
            set("o", oe[r - 1] as i64);
            set("n", *ext(0).last().unwrap() as i64);
            let bias_mode = match out {
                3 if ext(2).len() == 1 => 1,
                3 => 2,
                _ => 0,
            };
            set("bias_mode", bias_mode);
        }
        OpKind::ConvPw => {
            set("w", oe[0] as i64);
            set("cin", ext(0)[1] as i64);
            set("cout", oe[1] as i64);
        }
        OpKind::Requant | OpKind::Add | OpKind::Mul | OpKind::Hardswish => set("numel", prod(oe)),
        OpKind::RmsNorm => {
            set("rows", prod(&oe[..r - 1]));
            set("d", oe[r - 1] as i64);
            set("eps", attr("eps")?);
        }
        OpKind::Rope => {
            set("rows", oe[0] as i64);
            set("d", oe[1] as i64);
            set("head_dim", attr("head_dim")?);
            set("pos", attr("pos_offset")? + oo[0] as i64);
        }
        OpKind::Softmax => {
            let axis = n.int_or("axis", -1);
            if axis.rem_euclid(r as i64) != r as i64 - 1 {
                return Err(BackendError::Precondition(format!(
                    "softmax `{}` normalizes axis {axis}; emission supports the last axis only",
                    n.name
                )));
            }
            set("rows", prod(&oe[..r - 1]));
            set("rows_per_mat", if r >= 2 { oe[r - 2] as i64 } else { 1 });
            set("d", oe[r - 1] as i64);
            set("row0", if r >= 2 { oo[r - 2] as i64 } else { 0 });
            for key in ["q_ln2", "q_b", "q_c", "in_shift", "out_bits"] {
                h.insert(key, Hole::Int(attr(key)?));
            }
            h.insert("causal", Hole::Int(n.int_or("causal", 0)));
            h.insert("causal_offset", Hole::Int(n.int_or("causal_offset", 0)));
        }
        OpKind::GatherRows => {
            set("rows", oe[0] as i64);
            set("d", oe[1] as i64);
            set("vocab", ext(0)[0] as i64);
        }
        OpKind::ConcatSeq => {
            let row = oe[1] as i64 * elem(out);
            set("rows0", ext(0)[0] as i64);
            set("rows1", ext(1)[0] as i64);
            set("row_bytes", row);
            set("stride0", row);
            set("stride1", row);
        }
        OpKind::Transpose => {
            set("elem", elem(0));
            set("rank", r as i64);
            h.insert("in_dims", Hole::Ints(ext(0).iter().map(|&e| e as i64).collect()));
            h.insert("perm", Hole::Ints(n.ints("perm").unwrap_or(&[]).to_vec()));
        }
        OpKind::SplitHeads => {
            set("elem", elem(0));
            set("heads", oe[0] as i64);
            set("rows", oe[1] as i64);
            set("dh", oe[2] as i64);
        }
        OpKind::MergeHeads => {
            set("elem", elem(0));
            set("heads", ext(0)[0] as i64);
            set("rows", oe[0] as i64);
            set("dh", ext(0)[2] as i64);
        }
    }
    for key in ["mul", "shift", "zp", "mul_a", "mul_b", "three", "six"] {
        if let Some(v) = n.int(key) {
            h.insert(key, Hole::Int(v));
        }
    }
    Ok(h)
}

/// C literal of a constant hole value.
fn lit(v: i64) -> String {
    if v >= 0 {
        format!("{v}")
    } else if v == i64::MIN {
        "INT64_MIN".into()
    } else {
        format!("({v})")
    }
}

/// Generated code of one schedule step.
#[derive(Clone, Debug)]
pub struct NodeCode {
    /// File-scope tables the segment reads.
    pub tables: String,
    /// Final segment: the kernel call, pointer bindings, tile loop and, for
    /// offloaded nodes, the closure invocation.
    pub segment: CodeSegment,
}

/// Per-tile scalar columns: constant holes become literals, varying ones
/// columns of the step's tile table.
struct TileTable {
    columns: Vec<Vec<i64>>,
}

impl TileTable {
    fn value(&mut self, per_tile: Vec<i64>, kx: &str, sym: &str) -> String {
        if per_tile.iter().all(|v| *v == per_tile[0]) {
            return lit(per_tile[0]);
        }
        let c = self.columns.iter().position(|c| *c == per_tile).unwrap_or_else(|| {
            self.columns.push(per_tile);
            self.columns.len() - 1
        });
        format!("{sym}[{kx}][{c}]")
    }
}

#[derive(PartialEq, PartialOrd)]
enum Stage {
    Start,
    Instantiated,
    Bound,
    Looped,
    Final,
}

/// Runs the kernel's code generation passes for step `s` of `p`.
pub fn gen_node_code(p: &Program, s: usize, syms: &Symbols, reg: &Registry) -> Result<NodeCode, BackendError> {
    let step = &p.steps[s];
    let tmpl = reg
        .get(&step.kernel)
        .ok_or_else(|| BackendError::Internal(format!("unknown kernel `{}`", step.kernel)))?;
    let pre = &syms.prefix;
    let n_tiles = step.loops.tiles.len();
    let looped = n_tiles > 1;
    let kx = if looped { "k" } else { "0" };
    let out = step.operands.len() - 1;
    let tile_sym = format!("{pre}_s{s}_tile");
    let dma_sym = format!("{pre}_s{s}_dma");
    let xfer_sym = format!("{pre}_s{s}_xfer");
    let holes: Vec<BTreeMap<&str, Hole>> = (0..n_tiles).map(|k| scalar_holes(p, step, k)).collect::<Result<_, _>>()?;
    let mut table = TileTable { columns: Vec::new() };
    let mut candidates: Vec<FreeVar> = Vec::new();
    let mut stage = Stage::Start;
    let mut text = String::new();
    let mut offload = None;
    let has_dma = !step.loops.transfers.is_empty();
    let db = step.loops.double_buffered;
    for pass in tmpl.passes {
        match *pass {
            "instantiate" => {
                // Pointer holes become markers that bind_pointers resolves.
                let call = tmpl.instantiate(&|hole| {
                    if let Some(j) = hole.strip_prefix("in").and_then(|j| j.parse::<usize>().ok()) {
                        return Some(if j < out { format!("$in{j}$") } else { "0".into() });
                    }
                    if hole == "out" {
                        return Some("$out$".into());
                    }
                    if let Some(j) = hole.strip_prefix("scratch").and_then(|j| j.parse::<usize>().ok()) {
                        return (j < step.node.scratch.len()).then(|| format!("$scratch{j}$"));
                    }
                    let vals: Vec<&Hole> = holes.iter().map(|h| h.get(hole)).collect::<Option<_>>()?;
                    Some(match vals[0] {
                        Hole::Int(_) => {
                            let v: Vec<i64> = vals
                                .iter()
                                .map(|h| match h {
                                    Hole::Int(v) => *v,
                                    Hole::Ints(_) => 0,
                                })
                                .collect();
                            // Resolved against the tile table once instantiated.
                            format!("$int:{}$", v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","))
                        }
                        Hole::Ints(first) => {
                            let items: Vec<String> = (0..first.len())
                                .map(|i| {
                                    let v: Vec<String> = vals
                                        .iter()
                                        .map(|h| match h {
                                            Hole::Ints(x) => x[i].to_string(),
                                            Hole::Int(_) => "0".into(),
                                        })
                                        .collect();
                                    format!("$int:{}$", v.join(","))
                                })
                                .collect();
                            format!("(const uint32_t[]){{ {} }}", items.join(", "))
                        }
                    })
                })?;
                text = resolve_ints(&call, &mut table, kx, &tile_sym);
                stage = Stage::Instantiated;
            }
            "bind_pointers" => {
                if stage != Stage::Instantiated {
                    return Err(BackendError::Precondition(format!("{}: pointers bound before instantiation", step.kernel)));
                }
                for (j, op) in step.operands.iter().enumerate() {
                    let b = p
                        .buffer(&op.buffer)
                        .ok_or_else(|| BackendError::Internal(format!("buffer `{}`", op.buffer)))?;
                    let cty = if j == out {
                        format!("({} *)", b.dtype.c_type())
                    } else {
                        format!("(const {} *)", b.dtype.c_type())
                    };
                    let expr = match &op.arena {
                        Some(a) => {
                            let ap = p.arena(a).ok_or_else(|| BackendError::Internal(format!("arena `{a}`")))?;
                            let mem = &syms.levels[&ap.level];
                            candidates.push(FreeVar::new(mem, "uint8_t", Bound::Symbol(ap.level.clone())));
                            let slot = if db && looped {
                                format!(" + (k % 2u) * {}u", op.slot_bytes)
                            } else {
                                String::new()
                            };
                            format!("{cty}({mem}.b + {}u{slot})", ap.offset)
                        }
                        None => {
                            let sym = syms.buffer(&op.buffer);
                            candidates.push(FreeVar::new(sym, ptr_type(b.dtype), Bound::Buffer(op.buffer.clone())));
                            let offs: Vec<i64> = step
                                .loops
                                .regions
                                .iter()
                                .map(|r| (in_place_offset(&b.shape, &r[j].origin) * b.dtype.bytes()) as i64)
                                .collect();
                            if offs.iter().all(|&o| o == 0) {
                                format!("{cty}{sym}")
                            } else {
                                let off = table.value(offs, kx, &tile_sym);
                                format!("{cty}((const uint8_t *){sym} + {off})")
                            }
                        }
                    };
                    let marker = if j == out { "$out$".to_string() } else { format!("$in{j}$") };
                    text = text.replace(&marker, &expr);
                }
                for (j, sc) in step.node.scratch.iter().enumerate() {
                    let sym = syms.buffer(sc);
                    candidates.push(FreeVar::new(sym, "uint8_t *", Bound::Buffer(sc.clone())));
                    text = text.replace(&format!("$scratch{j}$"), &format!("(int32_t *){sym}"));
                }
                stage = Stage::Bound;
            }
            "tile_loop" => {
                if stage != Stage::Bound {
                    return Err(BackendError::Precondition(format!("{}: tiling before pointer binding", step.kernel)));
                }
                text = tile_loop(p, step, syms, &text, n_tiles, &dma_sym, &xfer_sym, &mut candidates)?;
                if has_dma {
                    for sym in [&dma_sym, &xfer_sym] {
                        candidates.push(FreeVar::new(sym, "uint32_t *", Bound::Symbol(sym.clone())));
                    }
                }
                stage = Stage::Looped;
            }
            "closure" => {
                if stage != Stage::Looped {
                    return Err(BackendError::Precondition(format!("{}: closure before the tile loop", step.kernel)));
                }
                if !step.offload {
                    stage = Stage::Final;
                    continue;
                }
                offload = Some(Offload {
                    engine: step.engine.clone(),
                    symbol: syms.engine_macro(&step.engine),
                });
                stage = Stage::Final;
            }
            other => return Err(BackendError::Precondition(format!("unknown code generation pass `{other}`"))),
        }
    }
    if stage != Stage::Final {
        return Err(BackendError::Precondition(format!("{}: incomplete pass pipeline", step.kernel)));
    }
    if !table.columns.is_empty() {
        candidates.push(FreeVar::new(&tile_sym, "uint32_t *", Bound::Symbol(tile_sym.clone())));
    }
    let tables = render_tables(step, s, n_tiles, &table, &dma_sym, &xfer_sym, &tile_sym);
    let name = format!("{pre}_step{s}_{}", sanitize(&step.node.name));
    let mut seg = CodeSegment::new(&name, text, candidates);
    let segment = match offload {
        Some(o) => {
            seg.offload = Some(o);
            make_closure(&seg, &syms.globals)?.into_segment(name)
        }
        None => seg,
    };
    Ok(NodeCode { tables, segment })
}

/// Replaces `$int:v0,v1,..$` markers (one value per tile) with literals
/// or tile table references.
fn resolve_ints(text: &str, table: &mut TileTable, kx: &str, sym: &str) -> String {
    let mut out = String::new();
    let mut rest = text;
    while let Some(s) = rest.find("$int:") {
        out.push_str(&rest[..s]);
        let e = rest[s + 5..].find('$').expect("closed marker") + s + 5;
        let vals: Vec<i64> = rest[s + 5..e].split(',').map(|v| v.parse().expect("integer")).collect();
        out.push_str(&table.value(vals, kx, sym));
        rest = &rest[e + 1..];
    }
    out.push_str(rest);
    out
}

fn in_place_offset(shape: &[usize], origin: &[usize]) -> usize {
    let st = crate::kernels::strides(shape);
    origin.iter().zip(&st).map(|(o, s)| o * s).sum()
}

/// Descriptor index ranges per tile: `[in_lo, in_hi, out_lo, out_hi]` into
/// the step's descriptor table, which lists descriptors in event order.
fn transfer_ranges(step: &StepPlan, n_tiles: usize) -> (Vec<[usize; 4]>, Vec<(usize, &Transfer)>) {
    let mut ranges = vec![[0usize; 4]; n_tiles];
    let mut seen = vec![[false; 2]; n_tiles];
    let mut flat = Vec::new();
    let mut at = 0;
    for ev in &step.loops.events {
        if let crate::memalloc::Event::Transfer(id) = ev {
            let x = &step.loops.transfers[*id];
            let c = if x.dir == Dir::In { 0 } else { 2 };
            let d = c / 2;
            if !seen[x.tile][d] {
                seen[x.tile][d] = true;
                ranges[x.tile][c] = at;
                ranges[x.tile][c + 1] = at;
            }
            at += x.descriptors.len();
            ranges[x.tile][c + 1] = at;
            flat.push((*id, x));
        }
    }
    (ranges, flat)
}

fn max_group(ranges: &[[usize; 4]], lo: usize) -> usize {
    ranges.iter().map(|r| r[lo + 1] - r[lo]).max().unwrap_or(0).max(1)
}

#[allow(clippy::too_many_arguments)]
fn tile_loop(
    p: &Program,
    step: &StepPlan,
    syms: &Symbols,
    call: &str,
    n_tiles: usize,
    dma_sym: &str,
    xfer_sym: &str,
    candidates: &mut Vec<FreeVar>,
) -> Result<String, BackendError> {
    if step.loops.transfers.is_empty() {
        return Ok(if n_tiles > 1 {
            format!("uint32_t k;\nfor (k = 0; k < {n_tiles}u; ++k) {{\n{}\n}}", indent(call, 4))
        } else {
            call.to_string()
        });
    }
    let (ranges, _) = transfer_ranges(step, n_tiles);
    let n_in = max_group(&ranges, 0);
    let n_out = max_group(&ranges, 2);
    let mut homes = Vec::new();
    let mut tiles = Vec::new();
    for op in &step.operands {
        match &op.arena {
            Some(a) => {
                let b = p.buffer(&op.buffer).ok_or_else(|| BackendError::Internal(format!("buffer `{}`", op.buffer)))?;
                let sym = syms.buffer(&op.buffer);
                candidates.push(FreeVar::new(sym, ptr_type(b.dtype), Bound::Buffer(op.buffer.clone())));
                homes.push(format!("(uint8_t *){sym}"));
                let ap = p.arena(a).ok_or_else(|| BackendError::Internal(format!("arena `{a}`")))?;
                tiles.push(format!("{}.b + {}u", syms.levels[&ap.level], ap.offset));
            }
            None => {
                homes.push("0".into());
                tiles.push("0".into());
            }
        }
    }
    let issue = |kx: &str, c: usize, h: &str| {
        format!("td_issue({dma_sym}, {xfer_sym}[{kx}][{c}], {xfer_sym}[{kx}][{}], home, tile, {h})", c + 1)
    };
    let mut s = String::new();
    let _ = writeln!(s, "uint8_t *const home[{}] = {{ {} }};", homes.len(), homes.join(", "));
    let _ = writeln!(s, "uint8_t *const tile[{}] = {{ {} }};", tiles.len(), tiles.join(", "));
    if n_tiles == 1 {
        let _ = writeln!(s, "td_dma_handle_t hin[{n_in}], hout[{n_out}];");
        let _ = writeln!(s, "td_await(hin, {});", issue("0", 0, "hin"));
        let _ = writeln!(s, "{call}");
        let _ = write!(s, "td_await(hout, {});", issue("0", 2, "hout"));
    } else if step.loops.double_buffered {
        let _ = writeln!(s, "td_dma_handle_t hin[2][{n_in}], hout[2][{n_out}];");
        let _ = writeln!(s, "uint32_t nin[2] = {{ 0, 0 }}, nout[2] = {{ 0, 0 }};");
        let _ = writeln!(s, "uint32_t k;");
        let _ = writeln!(s, "nin[0] = {};", issue("0", 0, "hin[0]"));
        let _ = writeln!(s, "for (k = 0; k < {n_tiles}u; ++k) {{");
        let _ = writeln!(s, "    if (k + 1 < {n_tiles}u) {{");
        let _ = writeln!(s, "        nin[(k + 1) % 2u] = {};", issue("k + 1", 0, "hin[(k + 1) % 2u]"));
        let _ = writeln!(s, "    }}");
        let _ = writeln!(s, "    td_await(hin[k % 2u], nin[k % 2u]);");
        let _ = writeln!(s, "    td_await(hout[k % 2u], nout[k % 2u]);");
        let _ = writeln!(s, "{}", indent(call, 4));
        let _ = writeln!(s, "    if (k > 0) {{");
        let _ = writeln!(s, "        nout[(k - 1) % 2u] = {};", issue("k - 1", 2, "hout[(k - 1) % 2u]"));
        let _ = writeln!(s, "    }}");
        let _ = writeln!(s, "}}");
        let last = n_tiles - 1;
        let _ = writeln!(s, "nout[{}] = {};", last % 2, issue(&last.to_string(), 2, &format!("hout[{}]", last % 2)));
        let _ = write!(s, "td_await(hout[0], nout[0]);\ntd_await(hout[1], nout[1]);");
    } else {
        let _ = writeln!(s, "td_dma_handle_t hin[{n_in}], hout[{n_out}];");
        let _ = writeln!(s, "uint32_t k;");
        let _ = writeln!(s, "for (k = 0; k < {n_tiles}u; ++k) {{");
        let _ = writeln!(s, "    td_await(hin, {});", issue("k", 0, "hin"));
        let _ = writeln!(s, "{}", indent(call, 4));
        let _ = writeln!(s, "    td_await(hout, {});", issue("k", 2, "hout"));
        let _ = write!(s, "}}");
    }
    Ok(s)
}

fn render_tables(
    step: &StepPlan,
    s: usize,
    n_tiles: usize,
    table: &TileTable,
    dma_sym: &str,
    xfer_sym: &str,
    tile_sym: &str,
) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "/* step {s}: {} ({} on {}), {} tile{} */",
        step.node.name,
        step.kernel,
        step.engine,
        n_tiles,
        if n_tiles == 1 { "" } else { "s" }
    );
    if !step.loops.transfers.is_empty() {
        let (ranges, flat) = transfer_ranges(step, n_tiles);
        let count: usize = flat.iter().map(|(_, x)| x.descriptors.len()).sum();
        let _ = writeln!(out, "static const td_desc_t {dma_sym}[{count}] = {{");
        for (_, x) in &flat {
            for d in &x.descriptors {
                let _ = writeln!(
                    out,
                    "    {{ {}, {}, {}u, {}u, {}u, {}u, {}u, {}u }},",
                    x.operand,
                    (x.dir == Dir::In) as u8,
                    d.src,
                    d.dst,
                    d.rows,
                    d.row_bytes,
                    d.src_stride,
                    d.dst_stride
                );
            }
        }
        let _ = writeln!(out, "}};");
        let _ = writeln!(out, "static const uint32_t {xfer_sym}[{n_tiles}][4] = {{");
        for r in &ranges {
            let _ = writeln!(out, "    {{ {}u, {}u, {}u, {}u }},", r[0], r[1], r[2], r[3]);
        }
        let _ = writeln!(out, "}};");
    }
    if !table.columns.is_empty() {
        let _ = writeln!(out, "static const uint32_t {tile_sym}[{n_tiles}][{}] = {{", table.columns.len());
        for k in 0..n_tiles {
            let row: Vec<String> = table.columns.iter().map(|c| format!("{}u", c[k])).collect();
            let _ = writeln!(out, "    {{ {} }},", row.join(", "));
        }
        let _ = writeln!(out, "}};");
    }
    out
}
