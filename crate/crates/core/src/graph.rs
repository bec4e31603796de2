//! Small undirected-graph helpers shared by the topology and control layers.

use serde::{Deserialize, Serialize};

/// Undirected edge stored with `lo < hi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub lo: usize,
    pub hi: usize,
}

impl Edge {
    /// Returns `None` for self-loops.
    pub fn new(a: usize, b: usize) -> Option<Self> {
        match a.cmp(&b) {
            std::cmp::Ordering::Less => Some(Edge { lo: a, hi: b }),
            std::cmp::Ordering::Greater => Some(Edge { lo: b, hi: a }),
            std::cmp::Ordering::Equal => None,
        }
    }

    pub fn touches(&self, node: usize) -> bool {
        self.lo == node || self.hi == node
    }

    /// The endpoint opposite `node`. Panics if `node` is not an endpoint.
    pub fn other(&self, node: usize) -> usize {
        if self.lo == node {
            self.hi
        } else {
            assert_eq!(self.hi, node, "{node} is not an endpoint of {self:?}");
            self.lo
        }
    }
}

/// Node degrees of an undirected edge list over `n` nodes.
pub fn degrees(edges: &[Edge], n: usize) -> Vec<usize> {
    let mut deg = vec![0; n];
    for e in edges {
        deg[e.lo] += 1;
        deg[e.hi] += 1;
    }
    deg
}

/// Connected-component sizes over all `n` nodes, largest first.
pub fn component_sizes(edges: &[Edge], n: usize) -> Vec<usize> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for e in edges {
        let (a, b) = (find(&mut parent, e.lo), find(&mut parent, e.hi));
        if a != b {
            parent[a.max(b)] = a.min(b);
        }
    }
    let mut sizes = vec![0usize; n];
    for v in 0..n {
        let r = find(&mut parent, v);
        sizes[r] += 1;
    }
    let mut sizes: Vec<usize> = sizes.into_iter().filter(|&s| s > 0).collect();
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    sizes
}
