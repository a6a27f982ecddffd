//! Prototype pseudolabels and their rectification under prior knowledge.
//!
//! Rectification picks hard labels maximizing `Σ_i ln p_{i,ŷ_i}` subject to
//! count constraints on the classes. Unary bounds are a transportation
//! problem solved exactly by min-cost flow. Binary (ordering) relationships
//! are not flow-representable; they are handled by repairing the count
//! vector and then running an exact-move local search over count vectors.

mod flow;
mod prior;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use flow::MinCostFlow;
pub use prior::{ConstraintKind, PriorKnowledge, PriorSpec};

use crate::error::{Error, Result};
use crate::numerics::{softmax, Matrix};

/// Probabilities are floored here before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;
/// Improvements smaller than this are treated as ties.
const IMPROVEMENT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    Raw,
    Rectified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudolabelSet {
    pub labels: Vec<usize>,
    pub source: LabelSource,
    /// `Σ_i ln max(p_{i,label_i}, PROB_FLOOR)` under the probabilities the set was built from.
    pub log_likelihood: f64,
    /// `p_{i,label_i}` per sample.
    pub confidence: Vec<f64>,
}

impl PseudolabelSet {
    fn build(labels: Vec<usize>, probs: &Matrix, source: LabelSource) -> Self {
        let confidence: Vec<f64> = labels.iter().enumerate().map(|(i, &y)| probs[(i, y)]).collect();
        PseudolabelSet {
            log_likelihood: log_likelihood(probs, &labels),
            labels,
            source,
            confidence,
        }
    }

    pub fn counts(&self, classes: usize) -> Vec<usize> {
        class_counts(&self.labels, classes)
    }
}

/// `Σ_i ln max(p_{i,y_i}, PROB_FLOOR)`, summed in row order.
pub fn log_likelihood(probs: &Matrix, labels: &[usize]) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| probs[(i, y)].max(PROB_FLOOR).ln())
        .sum()
}

pub fn class_counts(labels: &[usize], classes: usize) -> Vec<usize> {
    let mut counts = vec![0; classes];
    for &y in labels {
        counts[y] += 1;
    }
    counts
}

/// Output of [`prototype_pseudolabels`].
#[derive(Debug, Clone)]
pub struct PrototypeLabels {
    pub set: PseudolabelSet,
    /// Final class centroids, `K × b`.
    pub centroids: Matrix,
    /// Cosine similarity of every sample to every centroid, `N × K`.
    pub similarity: Matrix,
    /// `softmax(similarity / temperature)`; its row argmax equals the labels.
    pub affinity: Matrix,
}

pub const DEFAULT_PROTOTYPE_TEMPERATURE: f64 = 0.1;

fn cosine_similarity(features: &Matrix, norms: &[f64], centroids: &Matrix) -> Matrix {
    let mut sim = features.matmul_t(centroids).expect("matching feature width");
    let cnorms: Vec<f64> = centroids
        .iter_rows()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    for (i, &norm) in norms.iter().enumerate().take(sim.rows()) {
        for (k, s) in sim.row_mut(i).iter_mut().enumerate() {
            *s = if cnorms[k] > 0.0 {
                *s / (norm * cnorms[k])
            } else {
                0.0
            };
        }
    }
    snap_near_ties(&mut sim);
    sim
}

/// Recomputed centroids can differ in the last ulp, so similarities this close
/// to a row's maximum are treated as tied and the lowest class wins.
const TIE_TOLERANCE: f64 = 1e-12;

fn snap_near_ties(sim: &mut Matrix) {
    for i in 0..sim.rows() {
        let row = sim.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for s in row.iter_mut() {
            if max - *s <= TIE_TOLERANCE {
                *s = max;
            }
        }
    }
}

/// Nearest-centroid pseudolabels under cosine distance.
///
/// Round 0 uses probability-weighted centroids; every later round recomputes
/// centroids as the mean of the hard-assigned features, and a class left
/// empty keeps its previous centroid. Equal distances go to the lowest class.
pub fn prototype_pseudolabels(
    features: &Matrix,
    probs: &Matrix,
    rounds: usize,
    temperature: f64,
) -> Result<PrototypeLabels> {
    if rounds == 0 {
        return Err(Error::InvalidArgument("prototype rounds must be >= 1".into()));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "prototype temperature must be > 0, got {temperature}"
        )));
    }
    let n = features.rows();
    if n == 0 {
        return Err(Error::InvalidArgument("no samples for prototype estimation".into()));
    }
    probs.ensure_shape(n, probs.cols())?;
    features.ensure_finite("features")?;
    probs.ensure_finite("probabilities")?;
    let k = probs.cols();
    let norms: Vec<f64> = features
        .iter_rows()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    if let Some(i) = norms.iter().position(|&v| v == 0.0) {
        return Err(Error::InvalidArgument(format!("feature row {i} has zero norm")));
    }

    let mut centroids = probs.t_matmul(features)?;
    let mass = probs.sum_rows();
    for (c, &m) in mass.iter().enumerate() {
        if m > 0.0 {
            centroids.row_mut(c).iter_mut().for_each(|v| *v /= m);
        }
    }
    let mut similarity = cosine_similarity(features, &norms, &centroids);
    let mut labels = similarity.argmax_rows();
    for _ in 1..rounds {
        let mut sums = Matrix::zeros(k, features.cols());
        let mut counts = vec![0usize; k];
        for (i, &y) in labels.iter().enumerate() {
            counts[y] += 1;
            for (s, f) in sums.row_mut(y).iter_mut().zip(features.row(i)) {
                *s += f;
            }
        }
        for (c, &count) in counts.iter().enumerate() {
            if count > 0 {
                let cnt = count as f64;
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s / cnt;
                }
            }
        }
        similarity = cosine_similarity(features, &norms, &centroids);
        let next = similarity.argmax_rows();
        if next == labels {
            break;
        }
        labels = next;
    }
    let affinity = softmax(&similarity.map(|s| s / temperature))?;
    let set = PseudolabelSet::build(labels, &affinity, LabelSource::Raw);
    Ok(PrototypeLabels {
        set,
        centroids,
        similarity,
        affinity,
    })
}

/// A single broken constraint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Violation {
    LabelOutOfRange { index: usize, label: usize },
    BelowLowerBound { class: usize, count: usize, bound: usize },
    AboveUpperBound { class: usize, count: usize, bound: usize },
    /// `count(higher) < count(lower)` although `higher` precedes `lower` in the prior order.
    OrderBroken {
        higher: usize,
        lower: usize,
        higher_count: usize,
        lower_count: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Violation::LabelOutOfRange { index, label } => {
                write!(f, "label {label} at sample {index} is out of range")
            }
            Violation::BelowLowerBound { class, count, bound } => {
                write!(f, "class {class}: count {count} below lower bound {bound}")
            }
            Violation::AboveUpperBound { class, count, bound } => {
                write!(f, "class {class}: count {count} above upper bound {bound}")
            }
            Violation::OrderBroken {
                higher,
                lower,
                higher_count,
                lower_count,
            } => write!(
                f,
                "class {higher} ({higher_count}) must not have fewer samples than class {lower} ({lower_count})"
            ),
        }
    }
}

/// Checks hard labels against the prior's count constraints.
pub fn check_constraints(labels: &[usize], prior: &PriorKnowledge) -> std::result::Result<(), Vec<Violation>> {
    let k = prior.classes();
    let mut violations: Vec<Violation> = labels
        .iter()
        .enumerate()
        .filter(|(_, &y)| y >= k)
        .map(|(index, &label)| Violation::LabelOutOfRange { index, label })
        .collect();
    if !violations.is_empty() {
        return Err(violations);
    }
    let counts = class_counts(labels, k);
    violations = counts_violations(&counts, prior, labels.len());
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

fn counts_violations(counts: &[usize], prior: &PriorKnowledge, n: usize) -> Vec<Violation> {
    let mut out = Vec::new();
    match prior.kind() {
        ConstraintKind::UnaryBound => {
            for (class, (&count, (lo, hi))) in counts.iter().zip(prior.count_bounds(n)).enumerate() {
                if count < lo {
                    out.push(Violation::BelowLowerBound { class, count, bound: lo });
                }
                if count > hi {
                    out.push(Violation::AboveUpperBound { class, count, bound: hi });
                }
            }
        }
        ConstraintKind::BinaryRelationship => {
            for pair in prior.class_order().windows(2) {
                let (higher, lower) = (pair[0], pair[1]);
                if counts[higher] < counts[lower] {
                    out.push(Violation::OrderBroken {
                        higher,
                        lower,
                        higher_count: counts[higher],
                        lower_count: counts[lower],
                    });
                }
            }
        }
    }
    out
}

fn validate_probs(probs: &Matrix, classes: usize) -> Result<()> {
    if probs.cols() != classes {
        return Err(Error::shape(
            format!("{classes} probability columns"),
            format!("{} columns", probs.cols()),
        ));
    }
    if probs.rows() == 0 {
        return Err(Error::InvalidArgument("no samples to rectify".into()));
    }
    if probs.data().iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::InvalidArgument("probabilities must be finite and >= 0".into()));
    }
    Ok(())
}

fn costs(probs: &Matrix) -> Matrix {
    probs.map(|p| -p.max(PROB_FLOOR).ln())
}

/// Maximum-likelihood hard labels subject to the prior's count constraints.
pub fn rectify(probs: &Matrix, prior: &PriorKnowledge) -> Result<PseudolabelSet> {
    validate_probs(probs, prior.classes())?;
    let cost = costs(probs);
    let labels = match prior.kind() {
        ConstraintKind::UnaryBound => {
            let bounds = prior.count_bounds(probs.rows());
            check_bounds_feasible(&bounds, probs.rows())?;
            let argmax = probs.argmax_rows();
            let counts = class_counts(&argmax, prior.classes());
            if counts.iter().zip(&bounds).all(|(&c, &(lo, hi))| lo <= c && c <= hi) {
                argmax
            } else {
                solve_transport(&cost, &bounds)
            }
        }
        ConstraintKind::BinaryRelationship => solve_ordered(&cost, prior),
    };
    debug_assert!(check_constraints(&labels, prior).is_ok());
    Ok(PseudolabelSet::build(labels, probs, LabelSource::Rectified))
}

fn check_bounds_feasible(bounds: &[(usize, usize)], n: usize) -> Result<()> {
    let lo: usize = bounds.iter().map(|b| b.0).sum();
    let hi: usize = bounds.iter().map(|b| b.1).sum();
    if lo > n {
        let detail: Vec<String> = bounds.iter().enumerate().map(|(k, b)| format!("n_{k} >= {}", b.0)).collect();
        return Err(Error::Infeasible(format!(
            "lower bounds sum to {lo} > {n} samples ({})",
            detail.join(", ")
        )));
    }
    if hi < n {
        let detail: Vec<String> = bounds.iter().enumerate().map(|(k, b)| format!("n_{k} <= {}", b.1)).collect();
        return Err(Error::Infeasible(format!(
            "upper bounds sum to {hi} < {n} samples ({})",
            detail.join(", ")
        )));
    }
    Ok(())
}

/// Minimum-cost assignment of every row to a column with column counts in
/// `bounds`, via min-cost flow. Bounds must be feasible.
///
/// Lower bounds are enforced by a parallel sink arc of capacity `lo_k` whose
/// cost is negative enough that any optimal flow saturates it.
fn solve_transport(cost: &Matrix, bounds: &[(usize, usize)]) -> Vec<usize> {
    let (n, k) = cost.shape();
    let source = n + k;
    let sink = source + 1;
    let max_cost = cost.data().iter().copied().fold(0.0, f64::max);
    let reward = (n as f64 + 1.0) * (max_cost + 1.0);
    let mut g = MinCostFlow::new(n + k + 2);
    let mut arc_ids = Vec::with_capacity(n * k);
    for i in 0..n {
        g.add_arc(source, i, 1, 0.0);
        for c in 0..k {
            arc_ids.push(g.add_arc(i, n + c, 1, cost[(i, c)]));
        }
    }
    for (c, &(lo, hi)) in bounds.iter().enumerate() {
        if lo > 0 {
            g.add_arc(n + c, sink, lo as i64, -reward);
        }
        if hi > lo {
            g.add_arc(n + c, sink, (hi - lo) as i64, 0.0);
        }
    }
    let (flow, _) = g.run(source, sink, n as i64);
    debug_assert_eq!(flow, n as i64);
    (0..n)
        .map(|i| {
            (0..k)
                .find(|&c| g.flow(arc_ids[i * k + c]) > 0)
                .expect("every sample is assigned")
        })
        .collect()
}

/// Exact counts version of [`solve_transport`].
fn solve_with_counts(cost: &Matrix, counts: &[usize]) -> Vec<usize> {
    let bounds: Vec<(usize, usize)> = counts.iter().map(|&c| (c, c)).collect();
    solve_transport(cost, &bounds)
}

fn ordered(counts: &[usize], order: &[usize]) -> bool {
    order.windows(2).all(|p| counts[p[0]] >= counts[p[1]])
}

/// Non-increasing integer counts along `order`, closest to `counts` in the
/// least-squares sense (pool-adjacent-violators, then order-keeping rounding).
fn repair_counts(counts: &[usize], order: &[usize]) -> Vec<usize> {
    // blocks of (sum, len) over the ordered sequence
    let mut blocks: Vec<(f64, usize)> = Vec::new();
    for &c in order {
        blocks.push((counts[c] as f64, 1));
        while blocks.len() > 1 {
            let (s2, l2) = blocks[blocks.len() - 1];
            let (s1, l1) = blocks[blocks.len() - 2];
            if s1 / l1 as f64 >= s2 / l2 as f64 {
                break;
            }
            blocks.pop();
            *blocks.last_mut().unwrap() = (s1 + s2, l1 + l2);
        }
    }
    let targets: Vec<f64> = blocks
        .iter()
        .flat_map(|&(s, l)| std::iter::repeat_n(s / l as f64, l))
        .collect();
    round_ordered(&targets, order, counts.iter().sum())
}

/// All-pairs cheapest way of moving one sample out of class `from` and one
/// into class `to`, through a chain of single-sample reassignments.
struct ExchangeGraph {
    dist: Vec<Vec<f64>>,
    next: Vec<Vec<usize>>,
    /// `mover[a][b]`: sample whose move from `a` to `b` is cheapest.
    mover: Vec<Vec<Option<usize>>>,
}

impl ExchangeGraph {
    fn build(cost: &Matrix, labels: &[usize]) -> Self {
        let k = cost.cols();
        let mut dist = vec![vec![f64::INFINITY; k]; k];
        let mut mover = vec![vec![None; k]; k];
        for (i, &a) in labels.iter().enumerate() {
            for b in 0..k {
                if b == a {
                    continue;
                }
                let d = cost[(i, b)] - cost[(i, a)];
                if d < dist[a][b] {
                    dist[a][b] = d;
                    mover[a][b] = Some(i);
                }
            }
        }
        let mut next: Vec<Vec<usize>> = (0..k).map(|_| (0..k).collect()).collect();
        for (a, row) in dist.iter_mut().enumerate() {
            row[a] = row[a].min(0.0);
        }
        for m in 0..k {
            for a in 0..k {
                for b in 0..k {
                    let via = dist[a][m] + dist[m][b];
                    if via < dist[a][b] {
                        dist[a][b] = via;
                        next[a][b] = next[a][m];
                    }
                }
            }
        }
        ExchangeGraph { dist, next, mover }
    }

    fn path(&self, from: usize, to: usize) -> Vec<(usize, usize)> {
        let mut hops = Vec::new();
        let mut at = from;
        while at != to && hops.len() <= self.dist.len() {
            let nxt = self.next[at][to];
            hops.push((at, nxt));
            at = nxt;
        }
        hops
    }

    /// Applies the cheapest move of one unit from class `from` to class `to`.
    fn apply(&self, labels: &mut [usize], from: usize, to: usize) {
        for (a, b) in self.path(from, to) {
            let i = self.mover[a][b].expect("finite path has movers");
            labels[i] = b;
        }
    }
}

/// Upper limit on the number of order-respecting count vectors that
/// ordered rectification enumerates exhaustively.
pub const ORDERED_ENUMERATION_BUDGET: usize = 200_000;

/// Rectification under an ordering chain over class counts.
///
/// If the argmax labels already respect the order they are optimal. Otherwise,
/// when the order-respecting count vectors are few enough, every one of them
/// is visited by exact unit moves and the best is kept; beyond the budget a
/// multi-start repair + local search is used.
fn solve_ordered(cost: &Matrix, prior: &PriorKnowledge) -> Vec<usize> {
    let (n, k) = cost.shape();
    let order = prior.class_order();
    let argmax_labels: Vec<usize> = (0..n)
        .map(|i| {
            let row = cost.row(i);
            (1..k).fold(0, |best, c| if row[c] < row[best] { c } else { best })
        })
        .collect();
    let counts = class_counts(&argmax_labels, k);
    if ordered(&counts, order) {
        return argmax_labels;
    }
    match ordered_count_vectors(n, order, ORDERED_ENUMERATION_BUDGET) {
        Some(candidates) => enumerate_ordered(cost, argmax_labels, &candidates),
        None => local_search_ordered(cost, prior, &counts),
    }
}

/// All count vectors (indexed by class) that are non-increasing along
/// `order` and sum to `n`, or `None` if there are more than `budget`.
fn ordered_count_vectors(n: usize, order: &[usize], budget: usize) -> Option<Vec<Vec<usize>>> {
    fn rec(
        remaining: usize,
        cap: usize,
        pos: usize,
        order: &[usize],
        cur: &mut Vec<usize>,
        out: &mut Vec<Vec<usize>>,
        budget: usize,
    ) -> bool {
        let k = order.len();
        if pos == k - 1 {
            if remaining <= cap {
                cur[order[pos]] = remaining;
                out.push(cur.clone());
                return out.len() <= budget;
            }
            return true;
        }
        // the remaining positions can absorb at most `cap` each
        let slots = k - pos;
        let min_here = remaining.div_ceil(slots);
        for v in (min_here..=cap.min(remaining)).rev() {
            cur[order[pos]] = v;
            if !rec(remaining - v, v, pos + 1, order, cur, out, budget) {
                return false;
            }
        }
        true
    }
    let mut out = Vec::new();
    let mut cur = vec![0; order.len()];
    if rec(n, n, 0, order, &mut cur, &mut out, budget) {
        Some(out)
    } else {
        None
    }
}

fn total_cost(cost: &Matrix, labels: &[usize]) -> f64 {
    labels.iter().enumerate().map(|(i, &y)| cost[(i, y)]).sum()
}

/// Walks `labels` from its current counts to `target` one unit at a time
/// along cheapest exchange paths, which keeps the assignment optimal for
/// every intermediate count vector.
fn move_to_counts(cost: &Matrix, labels: &mut [usize], counts: &mut [usize], target: &[usize]) {
    while counts != target {
        let from = (0..counts.len()).find(|&c| counts[c] > target[c]).unwrap();
        let to = (0..counts.len()).find(|&c| counts[c] < target[c]).unwrap();
        let graph = ExchangeGraph::build(cost, labels);
        if (0..counts.len()).any(|c| graph.dist[c][c] < -IMPROVEMENT_EPS) {
            // rounding broke optimality; restore it at the target directly
            labels.copy_from_slice(&solve_with_counts(cost, target));
            counts.copy_from_slice(target);
            return;
        }
        graph.apply(labels, from, to);
        counts[from] -= 1;
        counts[to] += 1;
    }
}

fn enumerate_ordered(cost: &Matrix, start: Vec<usize>, candidates: &[Vec<usize>]) -> Vec<usize> {
    let k = cost.cols();
    let mut labels = start;
    let mut counts = class_counts(&labels, k);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for target in candidates {
        move_to_counts(cost, &mut labels, &mut counts, target);
        let value = total_cost(cost, &labels);
        if best.as_ref().is_none_or(|b| value < b.0 - IMPROVEMENT_EPS) {
            best = Some((value, labels.clone()));
        }
    }
    best.expect("at least one ordered count vector exists").1
}

/// Rounds real targets (already non-increasing along `order`) to integers
/// summing to `total`, largest remainders first, keeping the order.
fn round_ordered(targets_by_pos: &[f64], order: &[usize], total: usize) -> Vec<usize> {
    let mut base: Vec<usize> = targets_by_pos.iter().map(|t| t.floor() as usize).collect();
    let mut remainder = total.saturating_sub(base.iter().sum::<usize>());
    let mut by_fraction: Vec<usize> = (0..targets_by_pos.len()).collect();
    by_fraction.sort_by(|&a, &b| {
        let fa = targets_by_pos[a] - targets_by_pos[a].floor();
        let fb = targets_by_pos[b] - targets_by_pos[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &pos in by_fraction.iter().cycle().take(remainder * 2 + by_fraction.len()) {
        if remainder == 0 {
            break;
        }
        base[pos] += 1;
        remainder -= 1;
    }
    let mut out = vec![0; order.len()];
    for (pos, &c) in order.iter().enumerate() {
        out[c] = base[pos];
    }
    out
}

fn local_search_ordered(cost: &Matrix, prior: &PriorKnowledge, argmax_counts: &[usize]) -> Vec<usize> {
    let n = cost.rows();
    let order = prior.class_order();
    let k = order.len();
    let nf = n as f64;
    let mut starts = vec![repair_counts(argmax_counts, order)];
    let by_prior: Vec<f64> = order.iter().map(|&c| nf * prior.priors()[c]).collect();
    starts.push(round_ordered(&by_prior, order, n));
    for m in 1..=k {
        let split: Vec<f64> = (0..k).map(|pos| if pos < m { nf / m as f64 } else { 0.0 }).collect();
        starts.push(round_ordered(&split, order, n));
    }
    starts.dedup();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for counts in starts {
        debug_assert!(ordered(&counts, order));
        let labels = improve_ordered(cost, order, counts);
        let value = total_cost(cost, &labels);
        if best.as_ref().is_none_or(|b| value < b.0 - IMPROVEMENT_EPS) {
            best = Some((value, labels));
        }
    }
    best.expect("starts are non-empty").1
}

/// Single and paired unit-move local search from the optimal assignment for `counts`.
fn improve_ordered(cost: &Matrix, order: &[usize], mut counts: Vec<usize>) -> Vec<usize> {
    let (n, k) = cost.shape();
    let mut labels = solve_with_counts(cost, &counts);
    for _ in 0..k * n + k {
        let graph = ExchangeGraph::build(cost, &labels);
        // shortest-path moves keep the assignment optimal for its counts, so a
        // negative cycle only appears through rounding; distances are unreliable then
        if (0..k).any(|c| graph.dist[c][c] < -IMPROVEMENT_EPS) {
            break;
        }
        let mut best: Option<(f64, Vec<(usize, usize)>)> = None;
        for from in 0..k {
            for to in 0..k {
                if from == to || counts[from] == 0 || !graph.dist[from][to].is_finite() {
                    continue;
                }
                let mut next = counts.clone();
                next[from] -= 1;
                next[to] += 1;
                let gain = graph.dist[from][to];
                if ordered(&next, order) && gain < -IMPROVEMENT_EPS && best.as_ref().is_none_or(|b| gain < b.0) {
                    best = Some((gain, vec![(from, to)]));
                }
            }
        }
        if best.is_none() {
            best = best_double_move(cost, &labels, &counts, order, &graph);
        }
        let Some((_, moves)) = best else { break };
        for (from, to) in moves {
            let g = ExchangeGraph::build(cost, &labels);
            g.apply(&mut labels, from, to);
            counts[from] -= 1;
            counts[to] += 1;
        }
    }
    labels
}

/// Best pair of unit moves whose combination keeps the order, allowing the
/// intermediate counts to break it.
fn best_double_move(
    cost: &Matrix,
    labels: &[usize],
    counts: &[usize],
    order: &[usize],
    graph: &ExchangeGraph,
) -> Option<(f64, Vec<(usize, usize)>)> {
    let k = counts.len();
    let mut best: Option<(f64, Vec<(usize, usize)>)> = None;
    for a in 0..k {
        for b in 0..k {
            if a == b || counts[a] == 0 || !graph.dist[a][b].is_finite() {
                continue;
            }
            let mut mid_labels = labels.to_vec();
            graph.apply(&mut mid_labels, a, b);
            let mut mid = counts.to_vec();
            mid[a] -= 1;
            mid[b] += 1;
            let g2 = ExchangeGraph::build(cost, &mid_labels);
            for c in 0..k {
                for d in 0..k {
                    if c == d || mid[c] == 0 || !g2.dist[c][d].is_finite() {
                        continue;
                    }
                    let mut end = mid.clone();
                    end[c] -= 1;
                    end[d] += 1;
                    if end == counts || !ordered(&end, order) {
                        continue;
                    }
                    let gain = graph.dist[a][b] + g2.dist[c][d];
                    if gain < -IMPROVEMENT_EPS && best.as_ref().is_none_or(|x| gain < x.0) {
                        best = Some((gain, vec![(a, b), (c, d)]));
                    }
                }
            }
        }
    }
    best
}
