//! Treatment-assignment rules learned from doubly robust scores.
//!
//! Two problems are solved exactly: choosing `K` units to maximise the
//! summed reward (a cardinality-constrained integer program whose optimum
//! is the top `K` rewards), and choosing the best axis-aligned decision
//! tree of depth at most two.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::compare_groups;
use crate::dataset::ObservationFrame;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Minimize,
    Maximize,
}

/// Which outcome the rule targets and in which direction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub outcome: String,
    pub direction: Direction,
}

impl RewardSpec {
    /// `r_i = +Gamma_i` when maximising, `-Gamma_i` when minimising.
    pub fn rewards(&self, scores: &[f64]) -> Result<Vec<f64>> {
        if let Some(i) = scores.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!("score of row {i} is not finite")));
        }
        let sign = match self.direction {
            Direction::Maximize => 1.0,
            Direction::Minimize => -1.0,
        };
        Ok(scores.iter().map(|s| sign * s).collect())
    }
}

/// An optimal `K`-subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationResult {
    /// Selected row indices, ascending.
    pub treated: Vec<usize>,
    pub k: usize,
    /// Sum of selected rewards, added in row order.
    pub objective: f64,
    /// Smallest selected reward. Every unselected reward is at most this
    /// value, which certifies optimality.
    pub threshold: f64,
}

/// Selects the `k` largest rewards; ties at the cut go to lower row
/// indices.
pub fn allocate_capacity(rewards: &[f64], k: usize) -> Result<AllocationResult> {
    let n = rewards.len();
    if k == 0 || k > n {
        return Err(Error::InvalidParameter(format!("capacity K = {k} must be in 1..={n}")));
    }
    if rewards.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidData("rewards must be finite".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let cmp = |a: &usize, b: &usize| rewards[*b].total_cmp(&rewards[*a]).then(a.cmp(b));
    if k < n {
        order.select_nth_unstable_by(k - 1, cmp);
    }
    let mut treated = order[..k].to_vec();
    treated.sort_unstable();
    let objective = treated.iter().map(|&i| rewards[i]).sum();
    let threshold = treated.iter().map(|&i| rewards[i]).fold(f64::INFINITY, f64::min);
    Ok(AllocationResult {
        treated,
        k,
        objective,
        threshold,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    NoOffer,
    Treat,
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Action::NoOffer => "no offer",
            Action::Treat => "treat",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PolicyNode {
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: String,
        threshold: f64,
        left: Box<PolicyNode>,
        right: Box<PolicyNode>,
    },
    Leaf {
        action: Action,
        n: usize,
        share: f64,
    },
}

/// A depth-limited assignment rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTree {
    pub max_depth: usize,
    pub root: PolicyNode,
    /// Summed reward of treated training rows, added in row order.
    pub objective: f64,
    /// No split beat the best constant rule.
    pub constant: bool,
    pub n: usize,
}

impl PolicyTree {
    /// Action for a point given feature values by name.
    pub fn action(&self, value: impl Fn(&str) -> f64) -> Action {
        let mut node = &self.root;
        loop {
            match node {
                PolicyNode::Leaf { action, .. } => return *action,
                PolicyNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => node = if value(feature) <= *threshold { left } else { right },
            }
        }
    }

    /// Actions for every row of `frame`.
    pub fn assign(&self, frame: &ObservationFrame) -> Result<Vec<Action>> {
        let mut names = Vec::new();
        collect_features(&self.root, &mut names);
        let cols = names
            .iter()
            .map(|n| Ok((n.as_str(), frame.covariate(n)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok((0..frame.n_rows())
            .map(|i| self.action(|f| cols.iter().find(|(n, _)| *n == f).map(|(_, c)| c[i]).unwrap_or(f64::NAN)))
            .collect())
    }

    /// Indented text rendering, one node per line.
    pub fn render(&self) -> String {
        fn walk(node: &PolicyNode, indent: usize, out: &mut String) {
            let pad = "  ".repeat(indent);
            match node {
                PolicyNode::Leaf { action, n, share } => {
                    out.push_str(&format!("{pad}{action} (n = {n}, {:.1}%)\n", 100.0 * share));
                }
                PolicyNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    out.push_str(&format!("{pad}{feature} <= {threshold}\n"));
                    walk(left, indent + 1, out);
                    out.push_str(&format!("{pad}{feature} > {threshold}\n"));
                    walk(right, indent + 1, out);
                }
            }
        }
        let mut s = String::new();
        walk(&self.root, 0, &mut s);
        s
    }

    pub fn leaves(&self) -> Vec<(Action, usize)> {
        fn walk(node: &PolicyNode, out: &mut Vec<(Action, usize)>) {
            match node {
                PolicyNode::Leaf { action, n, .. } => out.push((*action, *n)),
                PolicyNode::Split { left, right, .. } => {
                    walk(left, out);
                    walk(right, out);
                }
            }
        }
        let mut v = Vec::new();
        walk(&self.root, &mut v);
        v
    }
}

fn collect_features(node: &PolicyNode, out: &mut Vec<String>) {
    if let PolicyNode::Split { feature, left, right, .. } = node {
        if !out.contains(feature) {
            out.push(feature.clone());
        }
        collect_features(left, out);
        collect_features(right, out);
    }
}

/// Best rule on a set of rows: `None` is a constant leaf.
#[derive(Debug, Clone, Copy)]
struct Stump {
    value: f64,
    split: Option<(usize, f64)>,
}

fn leaf_value(sum: f64) -> f64 {
    sum.max(0.0)
}

/// Best depth-one rule for the rows flagged `member`, scanning every
/// feature's presorted order. `total` is the rows' reward sum.
fn best_stump(x: &[Vec<f64>], order: &[Vec<u32>], r: &[f64], member: impl Fn(usize) -> bool, total: f64) -> Stump {
    let mut best = Stump {
        value: leaf_value(total),
        split: None,
    };
    for (f, ord) in order.iter().enumerate() {
        let col = &x[f];
        let mut left = 0.0;
        let mut prev: Option<f64> = None;
        for &i in ord {
            let i = i as usize;
            if !member(i) {
                continue;
            }
            let v = col[i];
            if let Some(a) = prev {
                if v > a {
                    let value = leaf_value(left) + leaf_value(total - left);
                    if value > best.value {
                        best = Stump {
                            value,
                            split: Some((f, midpoint(a, v))),
                        };
                    }
                }
            }
            left += r[i];
            prev = Some(v);
        }
    }
    best
}

fn midpoint(a: f64, b: f64) -> f64 {
    let t = 0.5 * (a + b);
    if t >= b {
        a
    } else {
        t
    }
}

#[derive(Debug, Clone, Copy)]
struct RootChoice {
    value: f64,
    feature: usize,
    threshold: f64,
    left: Stump,
    right: Stump,
}

/// Learns the reward-maximising tree of depth `depth` (1 or 2) over the
/// named covariates of `frame`.
pub fn learn_policy_tree(frame: &ObservationFrame, rewards: &[f64], allowed: &[String], depth: usize) -> Result<PolicyTree> {
    if allowed.is_empty() {
        return Err(Error::InvalidParameter("at least one feature must be allowed".into()));
    }
    let cols = allowed
        .iter()
        .map(|n| frame.covariate(n).map(<[f64]>::to_vec))
        .collect::<Result<Vec<_>>>()?;
    learn_policy_tree_columns(&cols, allowed, rewards, depth)
}

/// [`learn_policy_tree`] over explicit column-major features.
pub fn learn_policy_tree_columns(x: &[Vec<f64>], names: &[String], rewards: &[f64], depth: usize) -> Result<PolicyTree> {
    if depth > 2 {
        return Err(Error::InvalidParameter(format!(
            "depth {depth} rejected: exact search cost grows exponentially with depth, so at most 2 is supported"
        )));
    }
    if depth == 0 {
        return Err(Error::InvalidParameter("depth must be 1 or 2".into()));
    }
    let n = rewards.len();
    if n == 0 {
        return Err(Error::Empty("no rows to learn a policy from".into()));
    }
    if x.len() != names.len() || x.iter().any(|c| c.len() != n) {
        return Err(Error::InvalidData("features and rewards differ in shape".into()));
    }
    if rewards.iter().chain(x.iter().flatten()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidData("rewards and features must be finite".into()));
    }
    let order: Vec<Vec<u32>> = x
        .iter()
        .map(|col| {
            let mut o: Vec<u32> = (0..n as u32).collect();
            o.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b)));
            o
        })
        .collect();
    let total: f64 = rewards.iter().sum();

    let root_stump = best_stump(x, &order, rewards, |_| true, total);
    let choice = if depth == 1 {
        root_stump.split.map(|(f, t)| {
            let left: f64 = (0..n).filter(|&i| x[f][i] <= t).map(|i| rewards[i]).sum();
            RootChoice {
                value: root_stump.value,
                feature: f,
                threshold: t,
                left: Stump {
                    value: leaf_value(left),
                    split: None,
                },
                right: Stump {
                    value: leaf_value(total - left),
                    split: None,
                },
            }
        })
    } else {
        best_depth_two(x, &order, rewards, total)
    };

    let constant_value = leaf_value(total);
    let root = match choice.filter(|c| c.value > constant_value) {
        None => leaf(total, n, n),
        Some(c) => {
            let goes_left = |i: usize| x[c.feature][i] <= c.threshold;
            let child = |s: Stump, side: bool| -> PolicyNode {
                let rows: Vec<usize> = (0..n).filter(|&i| goes_left(i) == side).collect();
                match s.split {
                    None => leaf(rows.iter().map(|&i| rewards[i]).sum(), rows.len(), n),
                    Some((g, t)) => {
                        let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| x[g][i] <= t);
                        PolicyNode::Split {
                            feature: names[g].clone(),
                            threshold: t,
                            left: Box::new(leaf(l.iter().map(|&i| rewards[i]).sum(), l.len(), n)),
                            right: Box::new(leaf(r.iter().map(|&i| rewards[i]).sum(), r.len(), n)),
                        }
                    }
                }
            };
            PolicyNode::Split {
                feature: names[c.feature].clone(),
                threshold: c.threshold,
                left: Box::new(child(c.left, true)),
                right: Box::new(child(c.right, false)),
            }
        }
    };
    let constant = matches!(root, PolicyNode::Leaf { .. });
    let mut tree = PolicyTree {
        max_depth: depth,
        root,
        objective: 0.0,
        constant,
        n,
    };
    let index: Vec<(&str, usize)> = names.iter().map(String::as_str).zip(0..).collect();
    tree.objective = (0..n)
        .filter(|&i| {
            tree.action(|f| index.iter().find(|(name, _)| *name == f).map_or(f64::NAN, |&(_, j)| x[j][i]))
                == Action::Treat
        })
        .map(|i| rewards[i])
        .sum();
    Ok(tree)
}

fn leaf(sum: f64, count: usize, n: usize) -> PolicyNode {
    PolicyNode::Leaf {
        action: if sum > 0.0 { Action::Treat } else { Action::NoOffer },
        n: count,
        share: count as f64 / n as f64,
    }
}

/// Exhaustive depth-two search: every root cut of every feature, with the
/// best stump (or leaf) on each side. Root features run in parallel; the
/// reduction keeps the lowest feature and smallest threshold among ties.
fn best_depth_two(x: &[Vec<f64>], order: &[Vec<u32>], r: &[f64], total: f64) -> Option<RootChoice> {
    let n = r.len();
    let per_feature: Vec<Option<RootChoice>> = (0..x.len())
        .into_par_iter()
        .map(|f| {
            let col = &x[f];
            let ord = &order[f];
            let mut in_left = vec![false; n];
            let mut left_sum = 0.0;
            let mut best: Option<RootChoice> = None;
            let mut pos = 0;
            while pos < n {
                // move every row sharing the next value to the left side
                let v = col[ord[pos] as usize];
                while pos < n && col[ord[pos] as usize] == v {
                    let i = ord[pos] as usize;
                    in_left[i] = true;
                    left_sum += r[i];
                    pos += 1;
                }
                if pos == n {
                    break;
                }
                let threshold = midpoint(v, col[ord[pos] as usize]);
                let left = best_stump(x, order, r, |i| in_left[i], left_sum);
                let right = best_stump(x, order, r, |i| !in_left[i], total - left_sum);
                let value = left.value + right.value;
                if best.is_none_or(|b| value > b.value) {
                    best = Some(RootChoice {
                        value,
                        feature: f,
                        threshold,
                        left,
                        right,
                    });
                }
            }
            best
        })
        .collect();
    per_feature
        .into_iter()
        .flatten()
        .fold(None, |acc: Option<RootChoice>, c| match acc {
            Some(a) if a.value >= c.value => Some(a),
            _ => Some(c),
        })
}

/// Mean of each variable among selected units against a reference set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationProfile {
    pub n_selected: usize,
    pub n_reference: usize,
    /// Units in both sets.
    pub overlap: usize,
    pub rows: Vec<AllocationRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationRow {
    pub variable: String,
    pub mean_selected: f64,
    pub mean_reference: f64,
    pub difference: f64,
    pub se: f64,
    pub p_value: f64,
}

/// Compares the outcome and raw covariates of two index sets with
/// household-clustered tests. Overlapping sets are allowed.
pub fn profile_allocation(frame: &ObservationFrame, selected: &[usize], reference: &[usize]) -> Result<AllocationProfile> {
    let n = frame.n_rows();
    if selected.is_empty() || reference.is_empty() {
        return Err(Error::Empty("both index sets must be nonempty".into()));
    }
    if let Some(&i) = selected.iter().chain(reference).find(|&&i| i >= n) {
        return Err(Error::InvalidParameter(format!("row index {i} out of range")));
    }
    let mut a = vec![false; n];
    let mut b = vec![false; n];
    selected.iter().for_each(|&i| a[i] = true);
    reference.iter().for_each(|&i| b[i] = true);
    let overlap = (0..n).filter(|&i| a[i] && b[i]).count();
    let mut vars: Vec<(&str, &[f64])> = vec![(frame.outcome_name(), frame.outcome())];
    let k = frame.n_raw_covariates();
    vars.extend(
        frame.covariate_names()[..k]
            .iter()
            .map(String::as_str)
            .zip(frame.covariates()[..k].iter().map(Vec::as_slice)),
    );
    let table = compare_groups(&vars, frame.cluster_ids(), &a, &b)?;
    Ok(AllocationProfile {
        n_selected: table.n_increase,
        n_reference: table.n_decrease,
        overlap,
        rows: table
            .rows
            .into_iter()
            .map(|r| AllocationRow {
                variable: r.variable,
                mean_selected: r.mean_increase,
                mean_reference: r.mean_decrease,
                difference: r.difference,
                se: r.se,
                p_value: r.p_value,
            })
            .collect(),
    })
}
