use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Lifetime;

/// Buffers a permutation search handles exhaustively.
pub const EXACT_LIMIT: usize = 8;

pub(crate) fn overlaps(a: (usize, usize), b: (usize, usize)) -> bool {
    a.0 <= b.1 && b.0 <= a.1
}

/// Places buffers in `order`: each sits on the highest top among the
/// earlier-placed buffers whose lifetime overlaps its own. Offsets are
/// indexed by buffer.
pub fn tetris_allocate(order: &[usize], lifetimes: &[Lifetime], sizes: &[usize]) -> (Vec<usize>, usize) {
    let spans: Vec<(usize, usize)> = lifetimes.iter().map(|l| (l.start, l.end)).collect();
    tetris_spans(order, &spans, sizes)
}

pub(crate) fn tetris_spans(order: &[usize], spans: &[(usize, usize)], sizes: &[usize]) -> (Vec<usize>, usize) {
    let mut offsets = vec![0; sizes.len()];
    let mut top = vec![0; sizes.len()];
    let mut peak = 0;
    for (j, &b) in order.iter().enumerate() {
        let base = order[..j]
            .iter()
            .filter(|&&i| overlaps(spans[i], spans[b]))
            .map(|&i| top[i])
            .max()
            .unwrap_or(0);
        offsets[b] = base;
        top[b] = base + sizes[b];
        peak = peak.max(top[b]);
    }
    (offsets, peak)
}

/// Largest total size of buffers live at one step; no order does better.
pub(crate) fn live_bound(items: &[usize], spans: &[(usize, usize)], sizes: &[usize]) -> usize {
    items
        .iter()
        .map(|&p| {
            let s = spans[p].0;
            items.iter().filter(|&&i| spans[i].0 <= s && s <= spans[i].1).map(|&i| sizes[i]).sum()
        })
        .max()
        .unwrap_or(0)
}

/// Connected components of the overlap graph, each in ascending order.
pub(crate) fn components(spans: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..spans.len()).collect();
    idx.sort_by_key(|&i| (spans[i].0, i));
    let mut comps: Vec<Vec<usize>> = Vec::new();
    let mut reach = 0usize;
    for i in idx {
        match comps.last_mut() {
            Some(c) if spans[i].0 <= reach => {
                c.push(i);
                reach = reach.max(spans[i].1);
            }
            _ => {
                comps.push(vec![i]);
                reach = spans[i].1;
            }
        }
    }
    for c in &mut comps {
        c.sort_unstable();
    }
    comps.sort_by_key(|c| c[0]);
    comps
}

#[derive(Clone, Copy, Debug)]
pub struct SearchLimits {
    pub nodes: u64,
    pub deadline: Option<Instant>,
    pub seed: u64,
    pub restarts: usize,
    pub local_search: bool,
}

impl Default for SearchLimits {
    fn default() -> Self {
        SearchLimits {
            nodes: 200_000,
            deadline: None,
            seed: 0,
            restarts: 8,
            local_search: true,
        }
    }
}

/// Best order found for one level, with its peak and whether the peak is
/// proven minimal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OrderResult {
    pub order: Vec<usize>,
    pub peak: usize,
    pub exact: bool,
}

/// Searches for the order minimizing the Tetris peak. Components of the
/// overlap graph are independent and solved separately; each is exact when
/// small enough, when a heuristic order meets the live-bytes bound, or when
/// branch and bound finishes within the limits. `target` stops the search
/// early once a peak at or below it is found.
pub fn best_order(spans: &[(usize, usize)], sizes: &[usize], limits: SearchLimits, target: Option<usize>) -> OrderResult {
    let mut order = Vec::with_capacity(sizes.len());
    let mut peak = 0;
    let mut exact = true;
    for comp in components(spans) {
        let r = best_component(&comp, spans, sizes, limits, target);
        order.extend(r.order);
        peak = peak.max(r.peak);
        exact &= r.exact;
    }
    OrderResult { order, peak, exact }
}

fn peak_of(order: &[usize], spans: &[(usize, usize)], sizes: &[usize]) -> usize {
    let mut top: Vec<(usize, usize)> = Vec::with_capacity(order.len());
    let mut peak = 0;
    for &b in order {
        let base = top
            .iter()
            .filter(|(i, _)| overlaps(spans[*i], spans[b]))
            .map(|(_, t)| *t)
            .max()
            .unwrap_or(0);
        top.push((b, base + sizes[b]));
        peak = peak.max(base + sizes[b]);
    }
    peak
}

fn best_component(
    comp: &[usize],
    spans: &[(usize, usize)],
    sizes: &[usize],
    limits: SearchLimits,
    target: Option<usize>,
) -> OrderResult {
    let bound = live_bound(comp, spans, sizes);
    if comp.len() == 1 {
        return OrderResult {
            order: comp.to_vec(),
            peak: sizes[comp[0]],
            exact: true,
        };
    }
    let mut candidates: Vec<Vec<usize>> = Vec::new();
    let mut by = |key: &dyn Fn(usize) -> (i64, i64, i64)| {
        let mut o = comp.to_vec();
        o.sort_by_key(|&i| (key(i), i));
        candidates.push(o);
    };
    by(&|i| (spans[i].0 as i64, -(spans[i].1 as i64), -(sizes[i] as i64)));
    by(&|i| (-(sizes[i] as i64), spans[i].0 as i64, 0));
    by(&|i| (-((spans[i].1 - spans[i].0) as i64), -(sizes[i] as i64), spans[i].0 as i64));
    by(&|i| (-((spans[i].1 - spans[i].0 + 1) as i64 * sizes[i] as i64), spans[i].0 as i64, 0));
    let mut best = OrderResult {
        order: comp.to_vec(),
        peak: usize::MAX,
        exact: false,
    };
    let done = |b: &OrderResult| b.peak <= bound || target.is_some_and(|t| b.peak <= t);
    let consider = |best: &mut OrderResult, o: Vec<usize>| {
        let p = peak_of(&o, spans, sizes);
        if p < best.peak {
            best.peak = p;
            best.order = o;
        }
    };
    for o in candidates {
        consider(&mut best, o);
    }
    if !done(&best) && comp.len() > EXACT_LIMIT {
        let mut rng = ChaCha8Rng::seed_from_u64(limits.seed ^ comp[0] as u64);
        for _ in 0..limits.restarts {
            let mut o = comp.to_vec();
            o.shuffle(&mut rng);
            consider(&mut best, o);
        }
        if limits.local_search && !done(&best) {
            improve(&mut best, spans, sizes, bound, limits.deadline, evaluations(comp.len()));
        }
    }
    if done(&best) {
        best.exact = best.peak <= bound;
        return best;
    }
    let mut bb = BranchBound {
        spans,
        sizes,
        bound,
        best: best.peak,
        best_order: best.order.clone(),
        nodes: 0,
        limit: if comp.len() <= EXACT_LIMIT { u64::MAX } else { limits.nodes.min(evaluations(comp.len()) * 64) },
        deadline: if comp.len() <= EXACT_LIMIT { None } else { limits.deadline },
        target: target.unwrap_or(0),
        aborted: false,
    };
    let mut placed = Vec::with_capacity(comp.len());
    let mut rest = comp.to_vec();
    bb.search(&mut placed, &mut rest, 0);
    OrderResult {
        order: bb.best_order,
        peak: bb.best,
        exact: !bb.aborted || bb.best <= bound,
    }
}

/// Peak evaluations a heuristic may spend on a component of `n` buffers:
/// one evaluation costs about n² steps, and the total stays near 2·10⁷.
fn evaluations(n: usize) -> u64 {
    (20_000_000 / (n * n).max(1) as u64).max(16)
}

/// Moves single buffers to earlier positions while that lowers the peak,
/// for at most `budget` peak evaluations.
fn improve(
    best: &mut OrderResult,
    spans: &[(usize, usize)],
    sizes: &[usize],
    bound: usize,
    deadline: Option<Instant>,
    mut budget: u64,
) {
    let n = best.order.len();
    let mut improved = true;
    let mut rounds = 0;
    while improved && best.peak > bound && rounds < 4 {
        improved = false;
        rounds += 1;
        for j in 1..n {
            if deadline.is_some_and(|d| Instant::now() > d) {
                return;
            }
            for i in 0..j {
                if budget == 0 {
                    return;
                }
                budget -= 1;
                let mut o = best.order.clone();
                let b = o.remove(j);
                o.insert(i, b);
                let p = peak_of(&o, spans, sizes);
                if p < best.peak {
                    best.peak = p;
                    best.order = o;
                    improved = true;
                    break;
                }
            }
        }
    }
}

struct BranchBound<'a> {
    spans: &'a [(usize, usize)],
    sizes: &'a [usize],
    bound: usize,
    best: usize,
    best_order: Vec<usize>,
    nodes: u64,
    limit: u64,
    deadline: Option<Instant>,
    target: usize,
    aborted: bool,
}

impl BranchBound<'_> {
    fn finished(&self) -> bool {
        self.best <= self.bound || self.best <= self.target || self.aborted
    }

    fn search(&mut self, placed: &mut Vec<(usize, usize)>, rest: &mut Vec<usize>, cur: usize) {
        if rest.is_empty() {
            if cur < self.best {
                self.best = cur;
                self.best_order = placed.iter().map(|p| p.0).collect();
            }
            return;
        }
        self.nodes += 1;
        if self.nodes > self.limit || (self.nodes.is_multiple_of(1024) && self.deadline.is_some_and(|d| Instant::now() > d)) {
            self.aborted = true;
            return;
        }
        for k in 0..rest.len() {
            let b = rest[k];
            let base = placed
                .iter()
                .filter(|(i, _)| overlaps(self.spans[*i], self.spans[b]))
                .map(|(_, t)| *t)
                .max()
                .unwrap_or(0);
            let top = base + self.sizes[b];
            let next = cur.max(top);
            if next >= self.best {
                continue;
            }
            rest.swap_remove(k);
            placed.push((b, top));
            self.search(placed, rest, next);
            placed.pop();
            rest.push(b);
            let last = rest.len() - 1;
            rest.swap(k, last);
            if self.finished() {
                return;
            }
        }
    }
}
