use super::{Binding, FrontendError};
use crate::ir::{BufferKind, Graph, OpKind, Scope};
use crate::target::{EngineKind, TargetDescription};

/// Where constant weights of NPU convolutions live.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnnotationPolicy {
    /// Every global in the default global level.
    NoNms,
    /// Weights of NPU-bound pointwise convolutions in the NPU's weight
    /// memory; every other constant resident in the scratch level when all
    /// its readers can reach it, so no weight moves at run time.
    NmsWeights,
}

/// Assigns a memory level to every buffer.
pub fn annotate_memory_levels(
    g: &Graph,
    t: &TargetDescription,
    policy: AnnotationPolicy,
    binding: &Binding,
) -> Result<Graph, FrontendError> {
    let mut out = g.clone();
    for b in out.buffers_mut() {
        let lvl = match (b.kind, b.scope) {
            (BufferKind::Transient, _) => &t.defaults.scratch,
            (BufferKind::Constant, _) | (_, Scope::Global) => &t.defaults.globals,
            (_, Scope::Local) => &t.defaults.locals,
        };
        b.level = Some(lvl.clone());
    }
    if policy == AnnotationPolicy::NmsWeights {
        for (i, n) in g.nodes.iter().enumerate() {
            let Some(e) = t.engine(&binding.nodes[i].engine) else { continue };
            if n.op != OpKind::ConvPw || e.kind != EngineKind::ConvNpu {
                continue;
            }
            let w = &n.inputs[1];
            if !g.buffer(w).is_some_and(|b| b.is_constant()) {
                continue;
            }
            let wm = t
                .levels
                .iter()
                .find(|l| l.constants_only && l.accessible_by.contains(&e.name));
            if let Some(wm) = wm {
                out.buffer_mut(w).unwrap().level = Some(wm.name.clone());
            }
        }
        let scratch = &t.defaults.scratch;
        let consts: Vec<String> = out
            .buffers()
            .filter(|b| b.is_constant() && b.level.as_deref() == Some(t.defaults.globals.as_str()))
            .map(|b| b.name.clone())
            .collect();
        for c in consts {
            let mut readers = g.nodes.iter().enumerate().filter(|(_, n)| n.inputs.contains(&c)).peekable();
            if readers.peek().is_none() {
                continue;
            }
            let reach = readers.all(|(i, _)| {
                t.level(scratch)
                    .is_some_and(|l| l.accessible_by.contains(&binding.nodes[i].engine))
            });
            if reach {
                out.buffer_mut(&c).unwrap().level = Some(scratch.clone());
            }
        }
    }
    for b in out.buffers() {
        let lvl = t.level(b.level.as_deref().unwrap()).expect("default levels resolve");
        let size = b.size_bytes().unwrap_or(b.numel());
        if size > lvl.capacity {
            return Err(FrontendError::Capacity {
                buffer: b.name.clone(),
                level: lvl.name.clone(),
                size,
                capacity: lvl.capacity,
            });
        }
        if lvl.constants_only && !b.is_constant() {
            return Err(FrontendError::Missing(format!(
                "level `{}` holds constants only, `{}` is not one",
                lvl.name, b.name
            )));
        }
    }
    Ok(out)
}
