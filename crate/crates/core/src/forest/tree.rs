//! A single honest tree: growth on the split half, leaves populated by the
//! estimation half, empty leaves pruned away.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Supplies the per-row quantity that splits try to separate.
///
/// Regression trees split on the target itself; the instrumental forest
/// splits on moment-based pseudo-outcomes recomputed at every node.
pub trait SplitRule: Sync {
    /// Fills `out` with one pseudo-outcome per entry of `rows`. Returning
    /// `false` makes the node a leaf.
    fn pseudo_outcomes(&self, rows: &[u32], out: &mut Vec<f64>) -> bool;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
    /// Estimation-sample rows that landed here, ascending.
    Leaf { samples: Vec<u32> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HonestTree {
    /// Root is node 0.
    pub nodes: Vec<Node>,
    /// Depth of each node, root at 0.
    pub depths: Vec<u16>,
    pub split_rows: Vec<u32>,
    pub estimation_rows: Vec<u32>,
    /// Little bag this tree belongs to.
    pub bag: u32,
    /// Compact breadth-first copy of `nodes` for descents.
    #[serde(skip)]
    steps: Vec<Step>,
}

/// A split with adjacent children at `next` and `next + 1`, or a leaf
/// (`feature == LEAF`) whose node id is `next`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Step {
    threshold: f64,
    feature: u32,
    next: u32,
}

const LEAF: u32 = u32::MAX;

impl HonestTree {
    pub fn new(nodes: Vec<Node>, depths: Vec<u16>, split_rows: Vec<u32>, estimation_rows: Vec<u32>, bag: u32) -> Self {
        let mut tree = Self {
            nodes,
            depths,
            split_rows,
            estimation_rows,
            bag,
            steps: Vec::new(),
        };
        tree.rebuild_steps();
        tree
    }

    /// Rebuilds the descent copy, e.g. after deserialising.
    pub(crate) fn rebuild_steps(&mut self) {
        let mut steps = Vec::with_capacity(self.nodes.len());
        let mut queue = std::collections::VecDeque::from([0usize]);
        while let Some(id) = queue.pop_front() {
            steps.push(match self.nodes[id] {
                Node::Leaf { .. } => Step {
                    threshold: 0.0,
                    feature: LEAF,
                    next: id as u32,
                },
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    // children take the next two breadth-first slots
                    let next = (steps.len() + queue.len() + 1) as u32;
                    queue.extend([left as usize, right as usize]);
                    Step {
                        threshold,
                        feature,
                        next,
                    }
                }
            });
        }
        self.steps = steps;
    }

    /// Leaf node reached by a covariate vector.
    pub fn leaf_for(&self, x: &[f64]) -> usize {
        self.leaf_by(|f| x[f])
    }

    /// Leaf node reached by training row `row` of column-major covariates.
    pub fn leaf_for_row(&self, covariates: &[Vec<f64>], row: usize) -> usize {
        self.leaf_by(|f| covariates[f][row])
    }

    /// Leaf node reached when feature `j` takes the value `value(j)`.
    pub fn leaf_by(&self, value: impl Fn(usize) -> f64) -> usize {
        if self.steps.is_empty() {
            return self.leaf_by_nodes(value);
        }
        let mut at = 0usize;
        loop {
            let step = self.steps[at];
            if step.feature == LEAF {
                return step.next as usize;
            }
            at = step.next as usize + usize::from(!(value(step.feature as usize) <= step.threshold));
        }
    }

    fn leaf_by_nodes(&self, value: impl Fn(usize) -> f64) -> usize {
        let mut id = 0usize;
        loop {
            match &self.nodes[id] {
                Node::Leaf { .. } => return id,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    id = if value(*feature as usize) <= *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
            }
        }
    }

    pub fn leaf_samples(&self, node: usize) -> &[u32] {
        match &self.nodes[node] {
            Node::Leaf { samples } => samples,
            Node::Split { .. } => &[],
        }
    }

    pub fn n_splits(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Split { .. }))
            .count()
    }

    /// Rows drawn for this tree (split and estimation halves).
    pub fn subsample(&self) -> impl Iterator<Item = u32> + '_ {
        self.split_rows.iter().chain(&self.estimation_rows).copied()
    }
}

/// Scratch state reused while growing one tree.
pub(crate) struct Grower<'a, R: SplitRule> {
    pub covariates: &'a [Vec<f64>],
    /// Every row sorted by each feature; ties in row order.
    pub presorted: &'a [Vec<u32>],
    pub rule: &'a R,
    pub min_node_size: usize,
    pub alpha: f64,
    pub mtry: usize,
}

const ROLE_NONE: u8 = 0;
const ROLE_SPLIT: u8 = 1;
const ROLE_EST: u8 = 2;

#[derive(Clone, Copy)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

/// A node's rows: `[s_lo, s_hi)` in every split-sample order and
/// `[e_lo, e_hi)` in every estimation-sample order.
#[derive(Clone, Copy)]
struct Span {
    id: usize,
    s_lo: usize,
    s_hi: usize,
    e_lo: usize,
    e_hi: usize,
}

/// Stable in-place partition of `seg` by `goes_left`; returns the left count.
fn partition(seg: &mut [u32], goes_left: &[bool], tmp: &mut [u32]) -> usize {
    // branch-free: write both destinations, advance one
    assert!(tmp.len() >= seg.len());
    let (mut l, mut r) = (0, 0);
    for i in 0..seg.len() {
        let row = seg[i];
        let left = usize::from(goes_left[row as usize]);
        // SAFETY: l + r == i < seg.len() <= tmp.len()
        unsafe {
            *seg.get_unchecked_mut(l) = row;
            *tmp.get_unchecked_mut(r) = row;
        }
        l += left;
        r += 1 - left;
    }
    seg[l..].copy_from_slice(&tmp[..r]);
    l
}

impl<R: SplitRule> Grower<'_, R> {
    pub fn grow(
        &self,
        mut split_rows: Vec<u32>,
        mut estimation_rows: Vec<u32>,
        bag: u32,
        rng: &mut impl Rng,
    ) -> HonestTree {
        let n = self.covariates[0].len();
        let mut role = vec![ROLE_NONE; n];
        split_rows.iter().for_each(|&r| role[r as usize] = ROLE_SPLIT);
        estimation_rows.iter().for_each(|&r| role[r as usize] = ROLE_EST);
        // ascending row order without sorting
        split_rows.clear();
        estimation_rows.clear();
        for (r, &k) in role.iter().enumerate() {
            match k {
                ROLE_SPLIT => split_rows.push(r as u32),
                ROLE_EST => estimation_rows.push(r as u32),
                _ => {}
            }
        }

        // per-feature orderings of this tree's rows, one family per half
        let mut split_orders: Vec<Vec<u32>> = Vec::with_capacity(self.presorted.len());
        let mut est_orders: Vec<Vec<u32>> = Vec::with_capacity(self.presorted.len());
        for all in self.presorted {
            let mut so = Vec::with_capacity(split_rows.len());
            let mut eo = Vec::with_capacity(estimation_rows.len());
            for &r in all {
                match role[r as usize] {
                    ROLE_SPLIT => so.push(r),
                    ROLE_EST => eo.push(r),
                    _ => {}
                }
            }
            split_orders.push(so);
            est_orders.push(eo);
        }

        let mut nodes: Vec<Node> = vec![Node::Leaf { samples: Vec::new() }];
        let mut depths: Vec<u16> = vec![0];
        let mut stack = vec![Span {
            id: 0,
            s_lo: 0,
            s_hi: split_rows.len(),
            e_lo: 0,
            e_hi: estimation_rows.len(),
        }];
        let mut rho_buf = Vec::new();
        let mut rho = vec![0.0; n];
        let mut goes_left = vec![false; n];
        let mut leaf_of = vec![0u32; n];
        // reciprocal child sizes for the gain scan
        let inv: Vec<f64> = (0..=split_rows.len()).map(|k| 1.0 / k as f64).collect();
        let mut tmp = vec![0u32; split_rows.len().max(estimation_rows.len())];

        while let Some(span) = stack.pop() {
            let rows = &split_orders[0][span.s_lo..span.s_hi];
            let n_split = rows.len();
            let n_est = span.e_hi - span.e_lo;
            let best = if n_split >= 2 * self.min_node_size
                && n_est >= 2 * self.min_node_size
                && self.rule.pseudo_outcomes(rows, &mut rho_buf)
            {
                for (&r, &v) in rows.iter().zip(&rho_buf) {
                    rho[r as usize] = v;
                }
                self.best_split(&split_orders, &est_orders, span, &rho, &rho_buf, &inv, rng)
            } else {
                None
            };

            let Some(best) = best else {
                for &r in &est_orders[0][span.e_lo..span.e_hi] {
                    leaf_of[r as usize] = span.id as u32;
                }
                nodes[span.id] = Node::Leaf {
                    samples: Vec::with_capacity(n_est),
                };
                continue;
            };

            let column = &self.covariates[best.feature];
            for &r in split_orders[0][span.s_lo..span.s_hi]
                .iter()
                .chain(&est_orders[0][span.e_lo..span.e_hi])
            {
                goes_left[r as usize] = column[r as usize] <= best.threshold;
            }
            let s_left = partition(&mut split_orders[0][span.s_lo..span.s_hi], &goes_left, &mut tmp);
            let e_left = partition(&mut est_orders[0][span.e_lo..span.e_hi], &goes_left, &mut tmp);
            // leaves only read the first ordering
            let splittable = |s: usize, e: usize| s >= 2 * self.min_node_size && e >= 2 * self.min_node_size;
            if splittable(s_left, e_left) || splittable(n_split - s_left, n_est - e_left) {
                for (so, eo) in split_orders.iter_mut().zip(est_orders.iter_mut()).skip(1) {
                    partition(&mut so[span.s_lo..span.s_hi], &goes_left, &mut tmp);
                    partition(&mut eo[span.e_lo..span.e_hi], &goes_left, &mut tmp);
                }
            }
            let left = nodes.len();
            let depth = depths[span.id] + 1;
            nodes.push(Node::Leaf { samples: Vec::new() });
            nodes.push(Node::Leaf { samples: Vec::new() });
            depths.extend([depth, depth]);
            nodes[span.id] = Node::Split {
                feature: best.feature as u32,
                threshold: best.threshold,
                left: left as u32,
                right: left as u32 + 1,
            };
            stack.push(Span {
                id: left + 1,
                s_lo: span.s_lo + s_left,
                e_lo: span.e_lo + e_left,
                ..span
            });
            stack.push(Span {
                id: left,
                s_hi: span.s_lo + s_left,
                e_hi: span.e_lo + e_left,
                ..span
            });
        }

        for &r in &estimation_rows {
            if let Node::Leaf { samples } = &mut nodes[leaf_of[r as usize] as usize] {
                samples.push(r);
            }
        }
        let (nodes, depths) = prune_empty_leaves(nodes);
        HonestTree::new(nodes, depths, split_rows, estimation_rows, bag)
    }

    fn best_split(
        &self,
        split_orders: &[Vec<u32>],
        est_orders: &[Vec<u32>],
        span: Span,
        rho: &[f64],
        node_rho: &[f64],
        inv: &[f64],
        rng: &mut impl Rng,
    ) -> Option<Candidate> {
        let n_split = span.s_hi - span.s_lo;
        let n_est = span.e_hi - span.e_lo;
        let total: f64 = node_rho.iter().sum();
        let total_sq: f64 = node_rho.iter().map(|v| v * v).sum();
        let parent = total * total / n_split as f64;
        let tol = 1e-12 * (total_sq + parent.abs());
        let mns = self.min_node_size;
        let min_child = mns.max((self.alpha * n_split as f64).ceil() as usize);
        if n_split < 2 * min_child {
            return None;
        }
        let p = self.covariates.len();

        let mut features = index::sample(rng, p, self.mtry.min(p)).into_vec();
        features.sort_unstable();

        let mut best: Option<Candidate> = None;
        for &f in &features {
            let column = &self.covariates[f];
            let seg = &split_orders[f][span.s_lo..span.s_hi];
            if column[seg[0] as usize] == column[seg[n_split - 1] as usize] {
                continue;
            }
            // the estimation halves keep at least `mns` rows exactly when
            // `t` lies in [est_lo, est_hi)
            let est = &est_orders[f][span.e_lo..span.e_hi];
            let est_lo = column[est[mns - 1] as usize];
            let est_hi = column[est[n_est - mns] as usize];
            if est_lo >= est_hi {
                continue;
            }
            let scan = Scan {
                total,
                min_child,
                est_lo,
                est_hi,
            };
            if let Some((gain, threshold)) = scan.run(seg, column, rho, inv) {
                if best.is_none_or(|b| gain > b.gain) {
                    best = Some(Candidate {
                        gain,
                        feature: f,
                        threshold,
                    });
                }
            }
        }
        best.filter(|b| b.gain - parent > tol)
    }
}

/// Sweep over one feature's sorted split-sample rows at a node.
struct Scan {
    total: f64,
    min_child: usize,
    est_lo: f64,
    est_hi: f64,
}

impl Scan {
    /// Best `(gain, threshold)` over boundaries that leave at least
    /// `min_child` rows on each side.
    fn run(&self, seg: &[u32], column: &[f64], rho: &[f64], inv: &[f64]) -> Option<(f64, f64)> {
        let n = seg.len();
        let (first, last) = (self.min_child, n - self.min_child);
        assert!(first >= 1 && first <= last && last < inv.len());
        assert!(column.len() == rho.len());
        debug_assert!(seg.iter().all(|&r| (r as usize) < column.len()));
        // SAFETY (all unchecked reads below): rows come from the presorted
        // orders of `column` so they index `column` and `rho`; positions
        // `first..=last` and their complements index `seg` and `inv`
        let at = |i: usize| unsafe { *seg.get_unchecked(i) as usize };
        let value = |r: usize| unsafe { *column.get_unchecked(r) };
        let target = |r: usize| unsafe { *rho.get_unchecked(r) };

        let mut left_sum: f64 = (0..first).map(|i| target(at(i))).sum();
        let mut prev = value(at(first - 1));
        let mut best = f64::NEG_INFINITY;
        let mut best_t = 0.0;
        // a boundary before position `i` leaves `i` rows on the left
        for i in first..=last {
            let r = at(i);
            let v = value(r);
            if v > prev {
                let right_sum = self.total - left_sum;
                let (inv_l, inv_r) = unsafe { (*inv.get_unchecked(i), *inv.get_unchecked(n - i)) };
                let gain = left_sum * left_sum * inv_l + right_sum * right_sum * inv_r;
                if gain > best {
                    let mut t = 0.5 * (prev + v);
                    if t >= v {
                        t = prev;
                    }
                    if t >= self.est_lo && t < self.est_hi {
                        best = gain;
                        best_t = t;
                    }
                }
            }
            left_sum += target(r);
            prev = v;
        }
        (best > f64::NEG_INFINITY).then_some((best, best_t))
    }
}

/// Removes leaves without estimation rows by collapsing their parent onto
/// the surviving sibling. Returns the compacted nodes with fresh depths.
pub(crate) fn prune_empty_leaves(mut nodes: Vec<Node>) -> (Vec<Node>, Vec<u16>) {
    fn occupied(nodes: &[Node], id: usize, memo: &mut [Option<bool>]) -> bool {
        if let Some(v) = memo[id] {
            return v;
        }
        let v = match &nodes[id] {
            Node::Leaf { samples } => !samples.is_empty(),
            Node::Split { left, right, .. } => {
                let l = occupied(nodes, *left as usize, memo);
                let r = occupied(nodes, *right as usize, memo);
                l || r
            }
        };
        memo[id] = Some(v);
        v
    }

    fn emit(
        nodes: &mut [Node],
        mut id: usize,
        depth: u16,
        memo: &mut [Option<bool>],
        out: &mut Vec<Node>,
        depths: &mut Vec<u16>,
    ) -> u32 {
        // skip splits with an empty side
        while let Node::Split { left, right, .. } = &nodes[id] {
            let l = occupied(nodes, *left as usize, memo);
            let r = occupied(nodes, *right as usize, memo);
            match (l, r) {
                (true, false) => id = *left as usize,
                (false, true) => id = *right as usize,
                _ => break,
            }
        }
        let slot = out.len();
        let node = std::mem::replace(&mut nodes[id], Node::Leaf { samples: Vec::new() });
        out.push(node);
        depths.push(depth);
        if let Node::Split {
            feature,
            threshold,
            left,
            right,
        } = out[slot]
        {
            let l = emit(nodes, left as usize, depth + 1, memo, out, depths);
            let r = emit(nodes, right as usize, depth + 1, memo, out, depths);
            out[slot] = Node::Split {
                feature,
                threshold,
                left: l,
                right: r,
            };
        }
        slot as u32
    }

    let mut memo = vec![None; nodes.len()];
    for id in 0..nodes.len() {
        occupied(&nodes, id, &mut memo);
    }
    let mut out = Vec::with_capacity(nodes.len());
    let mut depths = Vec::with_capacity(nodes.len());
    emit(&mut nodes, 0, 0, &mut memo, &mut out, &mut depths);
    (out, depths)
}
