//! Successive-shortest-path min-cost flow with real-valued arc costs.
//!
//! Potentials are initialised with Bellman-Ford so negative arc costs are
//! allowed as long as the initial graph has no negative cycle; every
//! subsequent search is Dijkstra on reduced costs.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

#[derive(Debug, Clone)]
struct Arc {
    to: usize,
    cap: i64,
    cost: f64,
}

#[derive(Debug, Clone)]
pub struct MinCostFlow {
    arcs: Vec<Arc>,
    adj: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct HeapItem {
    dist: f64,
    node: usize,
}

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on distance, then on node index
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl MinCostFlow {
    pub fn new(nodes: usize) -> Self {
        MinCostFlow {
            arcs: Vec::new(),
            adj: vec![Vec::new(); nodes],
        }
    }

    /// Adds an arc and returns its id; the paired residual arc is `id ^ 1`.
    pub fn add_arc(&mut self, from: usize, to: usize, cap: i64, cost: f64) -> usize {
        let id = self.arcs.len();
        self.arcs.push(Arc { to, cap, cost });
        self.arcs.push(Arc {
            to: from,
            cap: 0,
            cost: -cost,
        });
        self.adj[from].push(id);
        self.adj[to].push(id + 1);
        id
    }

    /// Flow currently carried by arc `id`.
    pub fn flow(&self, id: usize) -> i64 {
        self.arcs[id ^ 1].cap
    }

    fn bellman_ford(&self, source: usize) -> Vec<f64> {
        let n = self.adj.len();
        let mut dist = vec![f64::INFINITY; n];
        dist[source] = 0.0;
        for _ in 0..n {
            let mut changed = false;
            for u in 0..n {
                if dist[u] == f64::INFINITY {
                    continue;
                }
                for &e in &self.adj[u] {
                    let a = &self.arcs[e];
                    if a.cap > 0 && dist[u] + a.cost < dist[a.to] {
                        dist[a.to] = dist[u] + a.cost;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        dist
    }

    /// Pushes up to `limit` units from `source` to `sink` at minimum cost.
    /// Returns `(flow, cost)`.
    pub fn run(&mut self, source: usize, sink: usize, limit: i64) -> (i64, f64) {
        let n = self.adj.len();
        let mut potential: Vec<f64> = self
            .bellman_ford(source)
            .into_iter()
            .map(|d| if d.is_finite() { d } else { 0.0 })
            .collect();
        let mut flow = 0;
        let mut cost = 0.0;
        let mut dist = vec![f64::INFINITY; n];
        let mut parent = vec![usize::MAX; n];
        let mut heap = BinaryHeap::new();
        while flow < limit {
            dist.fill(f64::INFINITY);
            parent.fill(usize::MAX);
            dist[source] = 0.0;
            heap.push(HeapItem {
                dist: 0.0,
                node: source,
            });
            while let Some(HeapItem { dist: d, node: u }) = heap.pop() {
                if d > dist[u] {
                    continue;
                }
                for &e in &self.adj[u] {
                    let a = &self.arcs[e];
                    if a.cap <= 0 {
                        continue;
                    }
                    // rounding can leave reduced costs a hair below zero
                    let reduced = (a.cost + potential[u] - potential[a.to]).max(0.0);
                    let nd = d + reduced;
                    if nd < dist[a.to] {
                        dist[a.to] = nd;
                        parent[a.to] = e;
                        heap.push(HeapItem { dist: nd, node: a.to });
                    }
                }
            }
            if dist[sink] == f64::INFINITY {
                break;
            }
            for (p, &d) in potential.iter_mut().zip(&dist) {
                if d.is_finite() {
                    *p += d;
                }
            }
            let mut push = limit - flow;
            let mut v = sink;
            while v != source {
                let e = parent[v];
                push = push.min(self.arcs[e].cap);
                v = self.arcs[e ^ 1].to;
            }
            let mut v = sink;
            while v != source {
                let e = parent[v];
                self.arcs[e].cap -= push;
                self.arcs[e ^ 1].cap += push;
                cost += push as f64 * self.arcs[e].cost;
                v = self.arcs[e ^ 1].to;
            }
            flow += push;
        }
        (flow, cost)
    }
}
