use std::collections::BTreeSet;

/// Outcome of an acyclicity check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Acyclicity {
    /// A topological order of all nodes.
    Order(Vec<usize>),
    /// A closed walk `v0, v1, ..., v0` along directed edges.
    Cycle(Vec<usize>),
}

impl Acyclicity {
    pub fn is_acyclic(&self) -> bool {
        matches!(self, Acyclicity::Order(_))
    }
}

/// Topological order of `0..n` under `edges`, or one explicit cycle.
///
/// Ready nodes are emitted smallest index first, so the order is deterministic.
pub fn verify_acyclic(n: usize, edges: &[(usize, usize)]) -> Acyclicity {
    let mut succ = vec![Vec::new(); n];
    let mut indeg = vec![0usize; n];
    for &(u, v) in edges {
        assert!(u < n && v < n, "edge ({u}, {v}) outside 0..{n}");
        succ[u].push(v);
        indeg[v] += 1;
    }
    let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(u) = ready.pop_first() {
        order.push(u);
        for &v in &succ[u] {
            indeg[v] -= 1;
            if indeg[v] == 0 {
                ready.insert(v);
            }
        }
    }
    if order.len() == n {
        return Acyclicity::Order(order);
    }
    // Every leftover node has a leftover predecessor; walk backwards until a
    // node repeats, then read the loop forwards.
    let left: Vec<bool> = (0..n).map(|i| indeg[i] > 0).collect();
    let mut pred = vec![usize::MAX; n];
    for &(u, v) in edges {
        if left[u] && left[v] && pred[v] == usize::MAX {
            pred[v] = u;
        }
    }
    let start = (0..n).find(|&i| left[i]).expect("leftover node");
    let mut seen = vec![false; n];
    let mut cur = start;
    while !seen[cur] {
        seen[cur] = true;
        cur = pred[cur];
    }
    let anchor = cur;
    let mut back = vec![anchor];
    let mut w = pred[anchor];
    while w != anchor {
        back.push(w);
        w = pred[w];
    }
    back.push(anchor);
    back.reverse();
    // rotate so the smallest node leads
    let body = &back[..back.len() - 1];
    let lead = (0..body.len()).min_by_key(|&i| body[i]).unwrap();
    let mut cycle: Vec<usize> = body[lead..].iter().chain(&body[..lead]).copied().collect();
    cycle.push(cycle[0]);
    Acyclicity::Cycle(cycle)
}
