//! Tile constraint flow: one symbolic variable per tensor dimension, size
//! variables per memory hop, and the per-kernel tiling rules instantiated
//! over them as a constraint program.

mod cp;

use std::collections::{BTreeMap, BTreeSet};

pub use cp::{
    decode_permutation, encode_permutation, Assignment, Constraint, ConstraintProgram, Expr, Objective, SizeKind,
    SizeVar, Var, VarId,
};

use crate::frontend::Binding;
use crate::ir::{BufferKind, Graph, Schedule, SizeExpr};
use crate::kernels::{Registry, TileRule};
use crate::target::TargetDescription;

#[derive(Debug, thiserror::Error)]
pub enum TileError {
    #[error("node `{node}` reads `{buffer}` in `{level}`, which engine `{engine}` cannot reach or stage")]
    Unreachable {
        node: String,
        buffer: String,
        level: String,
        engine: String,
    },
    #[error("node `{node}` needs at least {min_bytes} bytes in `{level}` (capacity {capacity})")]
    Unsatisfiable {
        node: String,
        level: String,
        min_bytes: i64,
        capacity: usize,
    },
    #[error("tile dimensions {0} are tied but have different extents")]
    Extent(String),
    #[error("{0}")]
    Kernel(#[from] crate::kernels::KernelError),
    #[error("missing {0}")]
    Missing(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TileOpts {
    pub double_buffer: bool,
}

impl Default for TileOpts {
    fn default() -> Self {
        TileOpts { double_buffer: true }
    }
}

/// Where one operand of a node lives and whether it must be staged.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OperandPlace {
    pub buffer: String,
    pub home: String,
    pub staged: bool,
}

/// Per-node operand placement: inputs then the output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodePlace {
    pub engine: String,
    pub operands: Vec<OperandPlace>,
    /// Level tiles of staged operands are copied into.
    pub stage_level: String,
}

/// Decides which operands each node reads through tile arenas. An operand
/// is staged when its level is not directly reachable by the node's
/// engine; it is then copied into the default scratch level, whose parent
/// must be the operand's level.
pub fn placement(g: &Graph, b: &Binding, t: &TargetDescription) -> Result<Vec<NodePlace>, TileError> {
    let stage = t.defaults.scratch.clone();
    let stage_parent = t.level(&stage).and_then(|l| l.parent.clone());
    g.nodes
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let engine = b.nodes[i].engine.clone();
            let reach = t
                .reachable_levels(&engine)
                .map_err(|e| TileError::Missing(e.to_string()))?;
            let operands = n
                .inputs
                .iter()
                .chain(&n.outputs)
                .map(|name| {
                    let buf = g.buffer(name).ok_or_else(|| TileError::Missing(format!("buffer `{name}`")))?;
                    let home = buf
                        .level
                        .clone()
                        .ok_or_else(|| TileError::Missing(format!("memory level of `{name}`")))?;
                    let staged = !reach.contains(&home);
                    if staged && (stage_parent.as_deref() != Some(home.as_str()) || !reach.contains(&stage)) {
                        return Err(TileError::Unreachable {
                            node: n.name.clone(),
                            buffer: name.clone(),
                            level: home,
                            engine: engine.clone(),
                        });
                    }
                    Ok(OperandPlace {
                        buffer: name.clone(),
                        home,
                        staged,
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            for s in &n.scratch {
                let lvl = g.buffer(s).and_then(|x| x.level.clone()).unwrap_or_default();
                if !reach.contains(&lvl) {
                    return Err(TileError::Unreachable {
                        node: n.name.clone(),
                        buffer: s.clone(),
                        level: lvl,
                        engine: engine.clone(),
                    });
                }
            }
            Ok(NodePlace {
                engine,
                operands,
                stage_level: stage.clone(),
            })
        })
        .collect()
}

/// Union-find classes of DimVars tied by equalities, with their admissible
/// tile extents.
#[derive(Clone, Debug)]
pub struct DimClasses {
    /// Class index per DimVar.
    pub class_of: BTreeMap<VarId, usize>,
    pub classes: Vec<DimClass>,
}

#[derive(Clone, Debug)]
pub struct DimClass {
    pub members: Vec<VarId>,
    pub extent: i64,
    /// Admissible values, largest first. A tile extent is only admissible
    /// if it is the largest one giving its tile count.
    pub candidates: Vec<i64>,
}

impl DimClasses {
    pub fn analyse(cp: &ConstraintProgram) -> Result<DimClasses, TileError> {
        let dims: Vec<VarId> = cp.dim_vars.values().copied().collect();
        let index: BTreeMap<VarId, usize> = dims.iter().enumerate().map(|(i, v)| (*v, i)).collect();
        let mut parent: Vec<usize> = (0..dims.len()).collect();
        fn find(p: &mut [usize], x: usize) -> usize {
            let mut r = x;
            while p[r] != r {
                r = p[r];
            }
            let mut y = x;
            while p[y] != r {
                let n = p[y];
                p[y] = r;
                y = n;
            }
            r
        }
        let mut fixed: BTreeMap<usize, i64> = BTreeMap::new();
        let mut multiples: Vec<(usize, i64)> = Vec::new();
        for c in &cp.constraints {
            match c {
                Constraint::Eq(Expr::Var(a), Expr::Var(b)) => {
                    if let (Some(&x), Some(&y)) = (index.get(a), index.get(b)) {
                        let (rx, ry) = (find(&mut parent, x), find(&mut parent, y));
                        parent[rx] = ry;
                    }
                }
                Constraint::Eq(Expr::Var(a), Expr::Const(v)) | Constraint::Eq(Expr::Const(v), Expr::Var(a)) => {
                    if let Some(&x) = index.get(a) {
                        fixed.insert(x, *v);
                    }
                }
                Constraint::MultipleOrFull { var, k, .. } => {
                    if let Some(&x) = index.get(var) {
                        multiples.push((x, *k));
                    }
                }
                _ => {}
            }
        }
        let mut by_root: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for i in 0..dims.len() {
            let r = find(&mut parent, i);
            by_root.entry(r).or_default().push(i);
        }
        let mut class_of = BTreeMap::new();
        let mut classes = Vec::new();
        for members in by_root.into_values() {
            let vars: Vec<VarId> = members.iter().map(|&i| dims[i]).collect();
            let extent = cp.var(vars[0]).hi;
            if vars.iter().any(|v| cp.var(*v).hi != extent) {
                let names: Vec<&str> = vars.iter().map(|v| cp.var(*v).name.as_str()).collect();
                return Err(TileError::Extent(names.join(", ")));
            }
            let pinned: BTreeSet<i64> = members.iter().filter_map(|m| fixed.get(m).copied()).collect();
            let ks: Vec<i64> = multiples.iter().filter(|(m, _)| members.contains(m)).map(|(_, k)| *k).collect();
            let admissible = |v: i64| ks.iter().all(|k| v % k == 0 || v == extent);
            let candidates: Vec<i64> = match pinned.len() {
                0 => tile_extents(extent).into_iter().filter(|&v| admissible(v)).collect(),
                1 => {
                    let v = *pinned.first().unwrap();
                    if (1..=extent).contains(&v) && admissible(v) {
                        vec![v]
                    } else {
                        vec![]
                    }
                }
                _ => vec![],
            };
            if candidates.is_empty() {
                let names: Vec<&str> = vars.iter().map(|v| cp.var(*v).name.as_str()).collect();
                return Err(TileError::Extent(names.join(", ")));
            }
            for v in &vars {
                class_of.insert(*v, classes.len());
            }
            classes.push(DimClass {
                members: vars,
                extent,
                candidates,
            });
        }
        Ok(DimClasses { class_of, classes })
    }

    /// Assignment with every DimVar set from its class value and every
    /// defined variable evaluated; other variables at their lower bound.
    pub fn assignment(&self, cp: &ConstraintProgram, values: &[i64]) -> Assignment {
        let mut a: Assignment = cp.vars.iter().map(|v| v.lo.max(0)).collect();
        for (c, class) in self.classes.iter().enumerate() {
            for v in &class.members {
                a[v.0] = values[c];
            }
        }
        for c in &cp.constraints {
            if let Constraint::Define(v, e) = c {
                a[v.0] = cp.eval(e, &a);
            }
        }
        a
    }

    pub fn max_values(&self) -> Vec<i64> {
        self.classes.iter().map(|c| c.candidates[0]).collect()
    }

    pub fn min_values(&self) -> Vec<i64> {
        self.classes.iter().map(|c| *c.candidates.last().unwrap()).collect()
    }
}

/// Tile extents worth considering for a dimension of `extent`: for every
/// tile count, the largest extent achieving it. Descending.
pub fn tile_extents(extent: i64) -> Vec<i64> {
    let mut out = Vec::new();
    let mut count = 1;
    while count <= extent {
        let t = (extent + count - 1) / count;
        if out.last() != Some(&t) {
            out.push(t);
        }
        // Skip to the smallest count that yields a smaller extent.
        count = (extent + t - 2) / (t - 1).max(1);
        if t == 1 {
            break;
        }
    }
    out
}

fn dim_var(cp: &mut ConstraintProgram, g: &Graph, tensor: &str, d: usize) -> VarId {
    if let Some(v) = cp.dim_var(tensor, d) {
        return v;
    }
    let extent = g.buffer(tensor).map(|b| b.shape[d]).unwrap_or(1) as i64;
    let v = cp.add_var(format!("D[{tensor}][{d}]"), 1, extent);
    cp.dim_vars.insert((tensor.to_string(), d), v);
    v
}

/// Instantiates every node's tiling rules, in schedule order, over shared
/// per-tensor DimVars, and defines one SizeVar per staged tensor per hop
/// and one per kernel scratch buffer.
pub fn build_tile_cp(
    g: &Graph,
    b: &Binding,
    t: &TargetDescription,
    reg: &Registry,
    sched: &Schedule,
    opts: TileOpts,
) -> Result<ConstraintProgram, TileError> {
    let places = placement(g, b, t)?;
    let mut cp = ConstraintProgram::new();
    let factor = if opts.double_buffer { 2 } else { 1 };
    let align = t.emit.align as i64;
    let mut seen_eq: BTreeSet<(VarId, VarId)> = BTreeSet::new();
    let mut staged_dims: BTreeSet<VarId> = BTreeSet::new();
    let mut hop_size: BTreeMap<(String, String), VarId> = BTreeMap::new();
    let mut fixed: BTreeSet<VarId> = BTreeSet::new();
    let fix = |cp: &mut ConstraintProgram, fixed: &mut BTreeSet<VarId>, v: VarId| {
        if fixed.insert(v) {
            let full = cp.var(v).hi;
            cp.add(Constraint::Eq(Expr::Var(v), Expr::Const(full)));
        }
    };
    for &i in &sched.order {
        let n = &g.nodes[i];
        let place = &places[i];
        let ops: Vec<&str> = place.operands.iter().map(|o| o.buffer.as_str()).collect();
        let shapes: Vec<Vec<usize>> = ops.iter().map(|x| g.buffer(x).unwrap().shape.clone()).collect();
        let ranks: Vec<usize> = shapes.iter().map(Vec::len).collect();
        let vars: Vec<Vec<VarId>> = ops
            .iter()
            .zip(&ranks)
            .map(|(x, &r)| (0..r).map(|d| dim_var(&mut cp, g, x, d)).collect())
            .collect();
        let spec = reg.tile_constraints_for(&b.nodes[i].kernel, n, &ranks)?;
        for rule in spec.rules() {
            match *rule {
                TileRule::Equal(x, y) => {
                    let (a, c) = (vars[x.0][x.1], vars[y.0][y.1]);
                    let key = (a.min(c), a.max(c));
                    if a != c && seen_eq.insert(key) {
                        cp.add(Constraint::Eq(Expr::Var(a), Expr::Var(c)));
                    }
                }
                TileRule::Untileable(x) => fix(&mut cp, &mut fixed, vars[x.0][x.1]),
                TileRule::MultipleOrFull(x, k) => {
                    let v = vars[x.0][x.1];
                    let full = cp.var(v).hi;
                    cp.add(Constraint::MultipleOrFull { var: v, k: k as i64, full });
                }
            }
        }
        for (k, o) in place.operands.iter().enumerate() {
            if o.staged {
                staged_dims.extend(&vars[k]);
                let key = (o.buffer.clone(), place.stage_level.clone());
                if let std::collections::btree_map::Entry::Vacant(e) = hop_size.entry(key) {
                    let buf = g.buffer(&o.buffer).unwrap();
                    let bytes = buf.dtype.map(|d| d.bytes()).unwrap_or(1) as i64;
                    let mut terms = vec![Expr::Const(bytes)];
                    terms.extend(vars[k].iter().map(|v| Expr::Var(*v)));
                    let hi = factor * t.aligned(buf.size_bytes().unwrap_or(0)) as i64;
                    let s = cp.add_var(format!("S[{}]@{}", o.buffer, place.stage_level), 0, hi);
                    let def = Expr::Product(vec![
                        Expr::Const(factor),
                        Expr::AlignUp(Box::new(Expr::Product(terms)), align),
                    ]);
                    cp.add(Constraint::Define(s, def));
                    cp.size_vars.push(SizeVar {
                        var: s,
                        tensor: o.buffer.clone(),
                        level: place.stage_level.clone(),
                        factor,
                        kind: SizeKind::Tile,
                    });
                    e.insert(s);
                }
            } else {
                // Tiles read or written in place must stay contiguous.
                for &v in vars[k].iter().skip(1) {
                    fix(&mut cp, &mut fixed, v);
                }
            }
        }
        for s in &n.scratch {
            let buf = g.buffer(s).ok_or_else(|| TileError::Missing(format!("scratch `{s}`")))?;
            if buf.kind != BufferKind::Transient {
                continue;
            }
            let expr = match &buf.size_expr {
                Some(e) => scratch_expr(e, n, &vars),
                None => Expr::Const(buf.size_bytes().unwrap_or(0) as i64),
            };
            let level = buf.level.clone().unwrap_or_else(|| t.defaults.scratch.clone());
            let hi = t.aligned(buf.size_bytes().unwrap_or(0)) as i64;
            let v = cp.add_var(format!("S[{s}]@{level}"), 0, hi.max(1));
            cp.add(Constraint::Define(v, Expr::AlignUp(Box::new(expr), align)));
            cp.size_vars.push(SizeVar {
                var: v,
                tensor: s.clone(),
                level,
                factor: 1,
                kind: SizeKind::Transient,
            });
        }
    }
    // Dimensions that never meet a staged operand are not tiled.
    let classes = DimClasses::analyse(&cp)?;
    for class in &classes.classes {
        if !class.members.iter().any(|v| staged_dims.contains(v)) {
            for &v in &class.members {
                fix(&mut cp, &mut fixed, v);
            }
        }
    }
    check_minimum(&cp, g, &places, sched, t)?;
    Ok(cp)
}

fn scratch_expr(e: &SizeExpr, n: &crate::ir::Node, vars: &[Vec<VarId>]) -> Expr {
    match e {
        SizeExpr::Const(c) => Expr::Const(*c),
        SizeExpr::Attr(a) => Expr::Const(n.int_or(a, 0)),
        SizeExpr::TileDim { operand, dim } => Expr::Var(vars[*operand][*dim]),
        SizeExpr::Sum(t) => Expr::Sum(t.iter().map(|x| scratch_expr(x, n, vars)).collect()),
        SizeExpr::Product(t) => Expr::Product(t.iter().map(|x| scratch_expr(x, n, vars)).collect()),
    }
}

/// Rejects programs where some node's arenas and scratch cannot fit even at
/// their smallest admissible tiles.
fn check_minimum(
    cp: &ConstraintProgram,
    g: &Graph,
    places: &[NodePlace],
    sched: &Schedule,
    t: &TargetDescription,
) -> Result<(), TileError> {
    let classes = DimClasses::analyse(cp)?;
    let a = classes.assignment(cp, &classes.min_values());
    let size_of: BTreeMap<(&str, &str), i64> = cp
        .size_vars
        .iter()
        .map(|s| ((s.tensor.as_str(), s.level.as_str()), a[s.var.0]))
        .collect();
    for &i in &sched.order {
        let p = &places[i];
        let mut per_level: BTreeMap<&str, i64> = BTreeMap::new();
        for o in p.operands.iter().filter(|o| o.staged) {
            *per_level.entry(&p.stage_level).or_default() += size_of[&(o.buffer.as_str(), p.stage_level.as_str())];
        }
        for s in &g.nodes[i].scratch {
            if let Some(sv) = cp.size_vars.iter().find(|x| &x.tensor == s) {
                *per_level.entry(&sv.level).or_default() += a[sv.var.0];
            }
        }
        for (lvl, bytes) in per_level {
            let cap = t.level(lvl).map(|l| l.capacity).unwrap_or(0);
            if bytes > cap as i64 {
                return Err(TileError::Unsatisfiable {
                    node: g.nodes[i].name.clone(),
                    level: lvl.to_string(),
                    min_bytes: bytes,
                    capacity: cap,
                });
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TilingPolicy {
    /// Largest total tile bytes on the innermost hop.
    #[default]
    MaxTiles,
}

/// Declares the tiling objective: the sum of tile-arena SizeVars, ties
/// broken towards larger innermost dimensions.
pub fn tiling_objective(mut cp: ConstraintProgram, policy: TilingPolicy) -> Result<ConstraintProgram, String> {
    match policy {
        TilingPolicy::MaxTiles => {
            let terms: Vec<Expr> = cp
                .size_vars
                .iter()
                .filter(|s| s.kind == SizeKind::Tile)
                .map(|s| Expr::Var(s.var))
                .collect();
            let mut dims: Vec<(usize, usize, VarId)> = cp
                .dim_vars
                .iter()
                .map(|((tensor, d), v)| {
                    let rank = cp.dim_vars.range((tensor.clone(), 0)..=(tensor.clone(), usize::MAX)).count();
                    (rank - 1 - d, v.0, *v)
                })
                .collect();
            dims.sort();
            cp.set_objective(Objective {
                maximize: Expr::Sum(terms),
                tie_break: dims.into_iter().map(|x| x.2).collect(),
            })?;
        }
    }
    Ok(cp)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extents_are_largest_per_count() {
        assert_eq!(tile_extents(1), vec![1]);
        assert_eq!(tile_extents(4), vec![4, 2, 1]);
        assert_eq!(tile_extents(7), vec![7, 4, 3, 2, 1]);
        for e in 1..300i64 {
            let got = tile_extents(e);
            let mut want: Vec<i64> = (1..=e).map(|c| (e + c - 1) / c).collect();
            want.dedup();
            assert_eq!(got, want, "extent {e}");
        }
    }
}
