use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::ir::{BufferKind, Scope};
use crate::kernels::Registry;

use super::codegen::{gen_node_code, Symbols};
use super::{BackendError, Program};

const KERNEL_LIBRARY: &str = include_str!("c/kernels.c");

/// Sections of the kernel library, keyed by the name after `/*@`.
fn library() -> BTreeMap<&'static str, &'static str> {
    let mut out = BTreeMap::new();
    let mut rest = KERNEL_LIBRARY;
    while let Some(s) = rest.find("/*@ ") {
        let name_end = rest[s..].find(" */").expect("closed section marker") + s;
        let name = &rest[s + 4..name_end];
        let body_start = name_end + 3;
        let body_end = rest[body_start..].find("/*@ ").map(|e| e + body_start).unwrap_or(rest.len());
        out.insert(name, rest[body_start..body_end].trim());
        rest = &rest[body_end..];
    }
    out
}

/// Kernel library function a template calls.
fn kernel_fn(template: &str) -> &str {
    template.split('(').next().unwrap_or("").trim()
}

/// Emitted C sources of one program.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceArtifact {
    pub name: String,
    pub source: String,
    pub header: String,
    /// Tab-separated `symbol level offset size`, one line per placed buffer
    /// and tile arena.
    pub manifest: String,
    pub entry: String,
    /// Memory arrays and their sizes (the level peaks); empty levels are
    /// omitted.
    pub arenas: Vec<(String, usize)>,
    /// Graph buffer or arena name to its C symbol.
    pub symbols: BTreeMap<String, String>,
}

impl SourceArtifact {
    pub fn source_file(&self) -> String {
        format!("{}.c", self.name)
    }

    pub fn header_file(&self) -> String {
        format!("{}_runtime.h", self.name)
    }

    pub fn manifest_file(&self) -> String {
        format!("{}_manifest.txt", self.name)
    }

    /// `(file name, contents)` of the three files.
    pub fn files(&self) -> [(String, &str); 3] {
        [
            (self.source_file(), self.source.as_str()),
            (self.header_file(), self.header.as_str()),
            (self.manifest_file(), self.manifest.as_str()),
        ]
    }

    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, BackendError> {
        let mut paths = Vec::new();
        for (name, text) in self.files() {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| BackendError::Io(format!("{}: {e}", path.display())))?;
            paths.push(path);
        }
        Ok(paths)
    }

    /// Parsed manifest rows: `(symbol, level, offset, size)`.
    pub fn manifest_rows(&self) -> Vec<(String, String, usize, usize)> {
        self.manifest
            .lines()
            .filter_map(|l| {
                let f: Vec<&str> = l.split('\t').collect();
                if f.len() != 4 {
                    return None;
                }
                Some((f[0].to_string(), f[1].to_string(), f[2].parse().ok()?, f[3].parse().ok()?))
            })
            .collect()
    }
}

fn c_ident_upper(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_uppercase() } else { '_' }).collect()
}

/// Renders `p` as C: one memory array per level sized to its peak with
/// constants placed at their offsets, pointers for every buffer, the
/// kernels the program uses, per-step tables and closures, and the entry
/// function running the schedule in order.
pub fn emit(p: &Program) -> Result<SourceArtifact, BackendError> {
    let reg = Registry::builtin();
    let syms = Symbols::new(p);
    let pre = syms.prefix.clone();
    let name = p.name.clone();
    let entry = format!("{pre}_run");
    let lib = library();

    let mut codes = Vec::with_capacity(p.steps.len());
    for s in 0..p.steps.len() {
        codes.push(gen_node_code(p, s, &syms, &reg)?);
    }

    // Header.
    let guard = format!("{}_{}_RUNTIME_H", pre.to_uppercase(), c_ident_upper(&name));
    let mut h = String::new();
    let _ = writeln!(h, "/* Runtime interface of `{name}`. */");
    let _ = writeln!(h, "#ifndef {guard}\n#define {guard}\n");
    let _ = writeln!(h, "#include <stddef.h>\n#include <stdint.h>\n");
    let _ = writeln!(h, "typedef uint32_t td_dma_handle_t;\n");
    let _ = writeln!(h, "/* Starts a copy of `rows` rows of `row_bytes` bytes. */");
    let _ = writeln!(
        h,
        "td_dma_handle_t dma_copy_2d(const void *src, void *dst, uint32_t rows, uint32_t row_bytes, uint32_t src_stride,\n                            uint32_t dst_stride);"
    );
    let _ = writeln!(h, "void dma_wait(td_dma_handle_t handle);");
    let _ = writeln!(h, "/* Runs fn(env) on an engine; one offload per engine is outstanding. */");
    let _ = writeln!(h, "void offload(uint32_t engine_id, void (*fn)(void *), void *env);");
    let _ = writeln!(h, "void offload_wait(uint32_t engine_id);\n");
    for (i, e) in p.target.engines.iter().enumerate() {
        let _ = writeln!(h, "#define {} {i}u", syms.engine_macro(&e.name));
    }
    let _ = writeln!(h);
    let io: Vec<&String> = p.inputs.iter().chain(p.outputs.iter().filter(|o| !p.inputs.contains(o))).collect();
    for b in &io {
        let bp = p.buffer(b).ok_or_else(|| BackendError::Internal(format!("graph i/o `{b}` is not placed")))?;
        let _ = writeln!(h, "extern {} *const {};", bp.dtype.c_type(), syms.names[*b]);
    }
    let _ = writeln!(h, "\nvoid {entry}(void);\n\n#endif");

    // Source.
    let mut c = String::new();
    let _ = writeln!(
        c,
        "/* `{name}` for target `{}`, scenario {}, double buffering {}. */",
        p.target.name,
        p.scenario,
        if p.double_buffer { "on" } else { "off" }
    );
    let _ = writeln!(c, "#include \"{name}_runtime.h\"\n");

    let mut arenas = Vec::new();
    for l in &p.levels {
        if l.peak == 0 {
            continue;
        }
        let sym = &syms.levels[&l.name];
        arenas.push((l.name.clone(), l.peak));
        let _ = writeln!(c, "/* {}: {} of {} bytes */", l.name, l.peak, l.capacity);
        let mut consts: Vec<_> = p
            .buffers
            .iter()
            .filter(|b| b.level == l.name && b.kind == BufferKind::Constant)
            .collect();
        consts.sort_by_key(|b| b.offset);
        if consts.is_empty() {
            let _ = writeln!(c, "static union {{\n    uint8_t b[{}];\n    uint64_t align;\n}} {sym};\n", l.peak);
            continue;
        }
        let _ = writeln!(c, "static union {{\n    uint8_t b[{}];\n    uint64_t align;\n}} {sym} = {{ {{", l.peak);
        for b in consts {
            let data = b
                .payload
                .as_deref()
                .ok_or_else(|| BackendError::Internal(format!("constant `{}` has no payload", b.name)))?;
            let _ = writeln!(c, "    /* {} */", b.name);
            for (i, chunk) in data.chunks(24).enumerate() {
                let bytes: Vec<String> = chunk.iter().map(|v| v.to_string()).collect();
                if i == 0 {
                    let _ = writeln!(c, "    [{}] = {},", b.offset, bytes.join(", "));
                } else {
                    let _ = writeln!(c, "    {},", bytes.join(", "));
                }
            }
        }
        let _ = writeln!(c, "}} }};\n");
    }

    let _ = writeln!(c, "/* Global buffers. */");
    for b in &p.buffers {
        let global = b.scope == Scope::Global || b.kind == BufferKind::Constant;
        if !global {
            continue;
        }
        let storage = if io.contains(&&b.name) { "" } else { "static " };
        let ty = b.dtype.c_type();
        let _ = writeln!(
            c,
            "{storage}{ty} *const {} = ({ty} *)({}.b + {}u);",
            syms.names[&b.name], syms.levels[&b.level], b.offset
        );
    }
    let _ = writeln!(c);

    let mut used: Vec<&str> = vec!["common"];
    for s in &p.steps {
        if let Some(t) = reg.get(&s.kernel) {
            let f = kernel_fn(t.template);
            if !used.contains(&f) {
                used.push(f);
            }
        }
    }
    if p.steps.iter().any(|s| !s.loops.transfers.is_empty()) {
        used.push("dma");
    }
    let mut order: Vec<&str> = lib.keys().copied().filter(|k| used.contains(k)).collect();
    // Library order: helpers first, DMA last.
    order.sort_by_key(|k| (*k != "common", *k == "dma", *k));
    for k in order {
        let _ = writeln!(c, "{}\n", lib[k]);
    }

    for code in &codes {
        if !code.tables.trim().is_empty() {
            let _ = writeln!(c, "{}", code.tables);
        }
    }
    for code in &codes {
        for def in &code.segment.hoisted {
            let _ = writeln!(c, "{def}");
        }
    }

    let _ = writeln!(c, "void {entry}(void)\n{{");
    for b in &p.buffers {
        let global = b.scope == Scope::Global || b.kind == BufferKind::Constant;
        if global {
            continue;
        }
        let ty = b.dtype.c_type();
        let _ = writeln!(
            c,
            "    {ty} *const {} = ({ty} *)({}.b + {}u);",
            syms.names[&b.name], syms.levels[&b.level], b.offset
        );
    }
    for (s, code) in codes.iter().enumerate() {
        let step = &p.steps[s];
        let _ = writeln!(c, "    /* step {s}: {} */", step.node.name);
        let _ = writeln!(c, "    {{");
        for line in code.segment.text.lines() {
            if line.is_empty() {
                let _ = writeln!(c);
            } else {
                let _ = writeln!(c, "        {line}");
            }
        }
        let _ = writeln!(c, "    }}");
    }
    let _ = writeln!(c, "}}");

    // Manifest.
    let mut rows: Vec<(String, String, usize, usize)> = p
        .buffers
        .iter()
        .map(|b| (syms.names[&b.name].clone(), b.level.clone(), b.offset, b.reserved))
        .chain(p.arenas.iter().map(|a| (syms.names[&a.name].clone(), a.level.clone(), a.offset, a.reserved)))
        .collect();
    rows.sort_by(|a, b| (&a.1, a.2, &a.0).cmp(&(&b.1, b.2, &b.0)));
    let mut manifest = String::new();
    for (sym, level, off, size) in rows {
        let _ = writeln!(manifest, "{sym}\t{level}\t{off}\t{size}");
    }

    Ok(SourceArtifact {
        name,
        source: c,
        header: h,
        manifest,
        entry,
        arenas,
        symbols: syms.names.clone(),
    })
}
