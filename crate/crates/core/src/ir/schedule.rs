use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use super::{Graph, IrError};

/// Total execution order over a graph's nodes (indices into `Graph::nodes`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub order: Vec<usize>,
}

impl Schedule {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Step index of every node, indexed by node index.
    pub fn steps(&self) -> Vec<usize> {
        let mut steps = vec![usize::MAX; self.order.len()];
        for (s, &n) in self.order.iter().enumerate() {
            steps[n] = s;
        }
        steps
    }

    /// True if every producer precedes each of its consumers.
    pub fn respects(&self, g: &Graph) -> bool {
        if self.order.len() != g.nodes.len() {
            return false;
        }
        let steps = self.steps();
        if steps.contains(&usize::MAX) {
            return false;
        }
        g.edges().iter().all(|&(p, c)| steps[p] < steps[c])
    }
}

/// Deterministic topological order; ready nodes are taken in ascending
/// declaration index.
pub fn topo_schedule(g: &Graph) -> Result<Schedule, IrError> {
    let n = g.nodes.len();
    let edges = g.edges();
    let mut indegree = vec![0usize; n];
    let mut succ = vec![Vec::new(); n];
    for &(p, c) in &edges {
        if p == c {
            return Err(IrError::Cycle(vec![g.nodes[p].name.clone()]));
        }
        indegree[c] += 1;
        succ[p].push(c);
    }
    let mut ready: BinaryHeap<Reverse<usize>> = (0..n).filter(|&i| indegree[i] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(v)) = ready.pop() {
        order.push(v);
        for &c in &succ[v] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.push(Reverse(c));
            }
        }
    }
    if order.len() != n {
        let stuck = (0..n)
            .filter(|&i| indegree[i] > 0)
            .map(|i| g.nodes[i].name.clone())
            .collect();
        return Err(IrError::Cycle(stuck));
    }
    Ok(Schedule { order })
}
