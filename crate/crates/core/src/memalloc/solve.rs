use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::tetris::{live_bound, tetris_spans};
use super::{best_order, AllocError, AllocationProblem, LevelMap, MapEntry, MemoryMap, SearchLimits};
use crate::tileflow::{Assignment, ConstraintProgram, DimClasses, SizeKind};

/// Search limits for [`solve_joint`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Budget {
    pub time_ms: u64,
    pub seed: u64,
    /// Branch-and-bound nodes over tile extents.
    pub nodes: u64,
}

impl Default for Budget {
    fn default() -> Self {
        Budget {
            time_ms: 60_000,
            seed: 0,
            nodes: 200_000,
        }
    }
}

/// Tile of one tensor on one memory hop.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorTiling {
    pub level: String,
    pub tile: Vec<usize>,
    pub extent: Vec<usize>,
    pub factor: usize,
    /// Number of tiles covering the tensor, edge tiles included.
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilingSolution {
    pub assignment: Assignment,
    /// Tile shape of every tensor with dimension variables.
    pub dims: BTreeMap<String, Vec<usize>>,
    /// Staged tensors, per hop.
    pub hops: BTreeMap<String, TensorTiling>,
    pub objective: i64,
    /// The objective is proven maximal and every level's feasibility was
    /// decided exactly.
    pub optimal: bool,
    pub explored: u64,
}

enum Feasible {
    Yes(Vec<Vec<usize>>),
    No,
    Unknown,
}

struct Solver<'a> {
    cp: &'a ConstraintProgram,
    classes: DimClasses,
    problems: Vec<&'a AllocationProblem>,
    spans: Vec<Vec<(usize, usize)>>,
    seed: u64,
    deadline: Instant,
    nodes: u64,
    node_limit: u64,
    aborted: bool,
    uncertain: bool,
    best: Option<Incumbent>,
}

/// Objective, tie-break key, class values and per-level orders.
type Incumbent = (i64, Vec<i64>, Vec<i64>, Vec<Vec<usize>>);

impl Solver<'_> {
    fn assignment(&self, values: &[i64]) -> Assignment {
        self.classes.assignment(self.cp, values)
    }

    fn score(&self, a: &[i64]) -> (i64, Vec<i64>) {
        let obj = self.cp.objective_value(a).unwrap_or(0);
        let key = self
            .cp
            .objective
            .as_ref()
            .map(|o| o.tie_break.iter().map(|v| a[v.0]).collect())
            .unwrap_or_default();
        (obj, key)
    }

    fn bound_ok(&self, a: &[i64]) -> bool {
        self.problems.iter().zip(&self.spans).all(|(p, s)| {
            let sizes = p.sizes(a);
            let all: Vec<usize> = (0..sizes.len()).collect();
            live_bound(&all, s, &sizes) <= p.capacity
        })
    }

    fn feasible(&mut self, a: &[i64]) -> Feasible {
        let mut orders = Vec::new();
        for (p, s) in self.problems.iter().zip(&self.spans) {
            let sizes = p.sizes(a);
            let all: Vec<usize> = (0..sizes.len()).collect();
            if live_bound(&all, s, &sizes) > p.capacity {
                return Feasible::No;
            }
            let limits = SearchLimits {
                nodes: 5_000,
                deadline: Some(self.deadline),
                seed: self.seed,
                restarts: 2,
                local_search: false,
            };
            let r = best_order(s, &sizes, limits, Some(p.capacity));
            if r.peak <= p.capacity {
                orders.push(r.order);
            } else if r.exact {
                return Feasible::No;
            } else {
                return Feasible::Unknown;
            }
        }
        Feasible::Yes(orders)
    }

    fn record(&mut self, values: &[i64], orders: Vec<Vec<usize>>) {
        let a = self.assignment(values);
        let (obj, key) = self.score(&a);
        let better = match &self.best {
            None => true,
            Some((o, k, _, _)) => (obj, &key) > (*o, k),
        };
        if better {
            self.best = Some((obj, key, values.to_vec(), orders));
        }
    }

    fn dfs(&mut self, order: &[usize], depth: usize, values: &mut Vec<i64>) {
        if self.aborted {
            return;
        }
        self.nodes += 1;
        if self.nodes > self.node_limit || (self.nodes.is_multiple_of(256) && Instant::now() > self.deadline) {
            self.aborted = true;
            return;
        }
        let mut hi = values.clone();
        let mut lo = values.clone();
        for &c in &order[depth..] {
            hi[c] = self.classes.classes[c].candidates[0];
            lo[c] = *self.classes.classes[c].candidates.last().unwrap();
        }
        let (ub, ukey) = self.score(&self.assignment(&hi));
        if let Some((o, k, _, _)) = &self.best {
            if (ub, &ukey) <= (*o, k) {
                return;
            }
        }
        if !self.bound_ok(&self.assignment(&lo)) {
            return;
        }
        if depth == order.len() {
            let a = self.assignment(values);
            match self.feasible(&a) {
                Feasible::Yes(orders) => self.record(values, orders),
                Feasible::No => {}
                Feasible::Unknown => self.uncertain = true,
            }
            return;
        }
        let c = order[depth];
        for v in self.classes.classes[c].candidates.clone() {
            values[c] = v;
            self.dfs(order, depth + 1, values);
            if self.aborted {
                return;
            }
        }
    }
}

/// Chooses tile extents and per-level buffer orders together: maximizes the
/// tiling objective subject to every level's Tetris peak staying within
/// capacity. Levels with fixed sizes are solved once; the others are
/// re-solved for every tile assignment the branch and bound visits.
/// Tile-extent search runs over classes of tied DimVars, largest values
/// first, pruned by the objective upper bound and by the live-bytes lower
/// bound on each level.
pub fn solve_joint(
    cp: &ConstraintProgram,
    problems: &[AllocationProblem],
    budget: Budget,
) -> Result<(TilingSolution, MemoryMap), AllocError> {
    let start = Instant::now();
    let deadline = start + Duration::from_millis(budget.time_ms);
    let classes = DimClasses::analyse(cp)?;
    let full_limits = SearchLimits {
        nodes: 200_000,
        deadline: Some(deadline),
        seed: budget.seed,
        ..SearchLimits::default()
    };
    let mut fixed_orders: BTreeMap<usize, (Vec<usize>, bool)> = BTreeMap::new();
    let mut variable = Vec::new();
    for (i, p) in problems.iter().enumerate() {
        if p.is_fixed() {
            let r = best_order(&p.spans(), &p.sizes(&[]), full_limits, None);
            if r.peak > p.capacity {
                return Err(AllocError::Infeasible {
                    level: p.level.clone(),
                    min_peak: r.peak,
                    capacity: p.capacity,
                });
            }
            fixed_orders.insert(i, (r.order, r.exact));
        } else {
            variable.push(i);
        }
    }
    let mut solver = Solver {
        cp,
        problems: variable.iter().map(|&i| &problems[i]).collect(),
        spans: variable.iter().map(|&i| problems[i].spans()).collect(),
        classes,
        seed: budget.seed,
        deadline,
        nodes: 0,
        node_limit: budget.nodes,
        aborted: false,
        uncertain: false,
        best: None,
    };
    let max = solver.classes.max_values();
    let min = solver.classes.min_values();
    let mut complete = true;
    match solver.feasible(&solver.assignment(&max)) {
        Feasible::Yes(orders) => solver.record(&max, orders),
        _ => {
            // Classes whose extent changes some allocated size.
            let base = solver.assignment(&max);
            let relevant: Vec<usize> = (0..max.len())
                .filter(|&c| {
                    let mut v = max.clone();
                    v[c] = min[c];
                    let a = solver.assignment(&v);
                    solver.problems.iter().any(|p| p.sizes(&a) != p.sizes(&base))
                })
                .collect();
            let mut values = max.clone();
            for &c in &relevant {
                values[c] = min[c];
            }
            let at_min = solver.assignment(&values);
            if let Feasible::No = solver.feasible(&at_min) {
                return Err(infeasible_report(&solver, &at_min, full_limits));
            }
            greedy(&mut solver, &relevant, max.clone());
            let mut values = max.clone();
            solver.dfs(&relevant, 0, &mut values);
            complete = !solver.aborted;
        }
    }
    let Some((objective, _, values, orders)) = solver.best.clone() else {
        return Err(AllocError::Budget);
    };
    let a = solver.assignment(&values);
    let mut memory = MemoryMap::default();
    for (i, p) in problems.iter().enumerate() {
        let spans = p.spans();
        let sizes = p.sizes(&a);
        let (order, exact) = match fixed_orders.remove(&i) {
            Some(x) => x,
            None => {
                let k = variable.iter().position(|&v| v == i).unwrap();
                let r = best_order(&spans, &sizes, full_limits, None);
                let found = &orders[k];
                if r.peak <= tetris_spans(found, &spans, &sizes).1 {
                    (r.order, r.exact)
                } else {
                    (found.clone(), false)
                }
            }
        };
        let (offsets, peak) = tetris_spans(&order, &spans, &sizes);
        let entries = p
            .items
            .iter()
            .zip(offsets.iter().zip(&sizes))
            .map(|(it, (&offset, &reserved))| MapEntry {
                name: it.name.clone(),
                offset,
                reserved,
                start: it.start,
                end: it.end,
            })
            .collect();
        memory.levels.insert(
            p.level.clone(),
            LevelMap {
                capacity: p.capacity,
                peak,
                order,
                exact,
                entries,
            },
        );
    }
    let mut dims: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for ((tensor, d), v) in &cp.dim_vars {
        let e = dims.entry(tensor.clone()).or_default();
        if e.len() <= *d {
            e.resize(d + 1, 0);
        }
        e[*d] = a[v.0] as usize;
    }
    let hops = cp
        .size_vars
        .iter()
        .filter(|s| s.kind == SizeKind::Tile)
        .map(|s| {
            let tile = dims.get(&s.tensor).cloned().unwrap_or_default();
            let extent: Vec<usize> = (0..tile.len())
                .map(|d| cp.var(cp.dim_var(&s.tensor, d).unwrap()).hi as usize)
                .collect();
            let count = tile.iter().zip(&extent).map(|(t, e)| e.div_ceil(*t)).product();
            (
                s.tensor.clone(),
                TensorTiling {
                    level: s.level.clone(),
                    tile,
                    extent,
                    factor: s.factor as usize,
                    count,
                },
            )
        })
        .collect();
    log::debug!(
        "solve_joint: objective {objective}, {} nodes, complete {complete}, {:?}",
        solver.nodes,
        start.elapsed()
    );
    Ok((
        TilingSolution {
            assignment: a,
            dims,
            hops,
            objective,
            optimal: complete && !solver.uncertain,
            explored: solver.nodes,
        },
        memory,
    ))
}

/// Shrinks one class at a time, keeping the most objective, until the
/// allocation fits. Seeds the branch and bound with an incumbent.
fn greedy(s: &mut Solver, relevant: &[usize], mut values: Vec<i64>) {
    loop {
        if Instant::now() > s.deadline {
            return;
        }
        let a = s.assignment(&values);
        if let Feasible::Yes(orders) = s.feasible(&a) {
            s.record(&values, orders);
            return;
        }
        let total = |a: &[i64]| -> usize { s.problems.iter().map(|p| p.sizes(a).iter().sum::<usize>()).sum() };
        let now = total(&a);
        let mut pick: Option<(i64, Vec<i64>, usize)> = None;
        for &c in relevant {
            let cands = &s.classes.classes[c].candidates;
            let pos = cands.iter().position(|&v| v == values[c]).unwrap();
            if pos + 1 == cands.len() {
                continue;
            }
            let mut next = values.clone();
            next[c] = cands[pos + 1];
            let na = s.assignment(&next);
            if total(&na) >= now {
                continue;
            }
            let (obj, key) = s.score(&na);
            if pick.as_ref().is_none_or(|(o, k, _)| (obj, &key) > (*o, k)) {
                pick = Some((obj, key, c));
            }
        }
        let Some((_, _, c)) = pick else { return };
        let cands = &s.classes.classes[c].candidates;
        let pos = cands.iter().position(|&v| v == values[c]).unwrap();
        values[c] = cands[pos + 1];
    }
}

fn infeasible_report(s: &Solver, a: &[i64], limits: SearchLimits) -> AllocError {
    for (p, spans) in s.problems.iter().zip(&s.spans) {
        let sizes = p.sizes(a);
        let r = best_order(spans, &sizes, limits, None);
        if r.peak > p.capacity {
            return AllocError::Infeasible {
                level: p.level.clone(),
                min_peak: r.peak,
                capacity: p.capacity,
            };
        }
    }
    AllocError::Budget
}
