//! Honest, subsampled tree ensembles.
//!
//! Trees are grown independently from a shared read-only covariate matrix.
//! Each tree draws a subsample of sampling units (households when cluster
//! sampling is on), splits it into a split half and an estimation half,
//! grows on the former and stores the latter in its leaves. With a bag
//! size above one, consecutive groups of trees draw their subsamples from
//! a common half-sample so that prediction variance can be estimated from
//! the between/within-bag decomposition.

mod params;
mod regression;
mod tree;

pub use params::{default_mtry, TreeParams};
pub use regression::{grow_regression_forest, RegressionForest};
pub use tree::{HonestTree, Node, SplitRule};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::ObservationFrame;
use crate::error::{Error, Result};
use tree::Grower;

const STREAM_BAG: u64 = 1 << 48;
const STREAM_TREE: u64 = 2 << 48;

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Borrowed training covariates and household structure.
#[derive(Debug, Clone, Copy)]
pub struct ForestInput<'a> {
    /// Column-major, one `Vec` per feature.
    pub covariates: &'a [Vec<f64>],
    /// Dense cluster id per row.
    pub clusters: &'a [u32],
    pub n_clusters: usize,
}

impl<'a> ForestInput<'a> {
    pub fn from_frame(frame: &'a ObservationFrame) -> Self {
        Self {
            covariates: frame.covariates(),
            clusters: frame.cluster_ids(),
            n_clusters: frame.n_clusters(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.covariates.first().map_or(0, Vec::len)
    }

    pub fn n_features(&self) -> usize {
        self.covariates.len()
    }
}

/// A grown ensemble.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ForestModel {
    pub trees: Vec<HonestTree>,
    pub params: TreeParams,
    pub covariate_names: Vec<String>,
    /// Fingerprint of the training frame, empty when unknown.
    pub fingerprint: String,
    pub n_train: usize,
    pub n_features: usize,
    /// `split_counts[d][j]`: splits on feature `j` at depth `d` (root 0).
    pub split_counts: Vec<Vec<u64>>,
}

/// Which trees contribute to a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TreeSelection {
    All,
    /// Trees whose subsample excludes this training row.
    OutOfBag(usize),
}

/// Per-tree membership bitsets, built once for out-of-bag queries.
pub struct InBagIndex {
    words: usize,
    bits: Vec<u64>,
}

impl InBagIndex {
    pub fn new(model: &ForestModel) -> Self {
        let words = model.n_train.div_ceil(64);
        let mut bits = vec![0u64; words * model.trees.len()];
        for (t, tree) in model.trees.iter().enumerate() {
            let base = t * words;
            for r in tree.subsample() {
                bits[base + r as usize / 64] |= 1 << (r % 64);
            }
        }
        Self { words, bits }
    }

    pub fn contains(&self, tree: usize, row: usize) -> bool {
        self.bits[tree * self.words + row / 64] & (1 << (row % 64)) != 0
    }
}

/// Sampling units: households or single rows.
fn sampling_units(input: &ForestInput<'_>, by_cluster: bool) -> Vec<Vec<u32>> {
    let n = input.n_rows();
    if by_cluster {
        let mut units = vec![Vec::new(); input.n_clusters];
        for r in 0..n {
            units[input.clusters[r] as usize].push(r as u32);
        }
        units.retain(|u| !u.is_empty());
        units
    } else {
        (0..n as u32).map(|r| vec![r]).collect()
    }
}

fn expand(units: &[Vec<u32>], picked: &[usize]) -> Vec<u32> {
    picked.iter().flat_map(|&u| units[u].iter().copied()).collect()
}

/// Grows a forest with the given split rule.
pub fn grow_forest<R: SplitRule>(
    input: &ForestInput<'_>,
    rule: &R,
    params: &TreeParams,
) -> Result<ForestModel> {
    let n = input.n_rows();
    let p = input.n_features();
    params.validate(p)?;
    if n < 2 * params.min_node_size {
        return Err(Error::InvalidData(format!(
            "{n} rows is fewer than twice min_node_size ({})",
            params.min_node_size
        )));
    }
    if input.clusters.len() != n {
        return Err(Error::InvalidData("cluster ids do not match rows".into()));
    }

    let units = sampling_units(input, params.cluster_sampling);
    let n_units = units.len();
    let n_trees = params.effective_n_trees();
    let n_bags = n_trees / params.bag_size;
    let per_tree = ((params.subsample_fraction * n_units as f64).round() as usize).max(1);

    let half_samples: Vec<Vec<usize>> = (0..n_bags)
        .map(|b| {
            if params.bag_size > 1 {
                let mut rng = stream_rng(params.seed, STREAM_BAG | b as u64);
                let mut half = index::sample(&mut rng, n_units, (n_units / 2).max(1)).into_vec();
                half.sort_unstable();
                half
            } else {
                (0..n_units).collect()
            }
        })
        .collect();

    let presorted: Vec<Vec<u32>> = input
        .covariates
        .iter()
        .map(|col| {
            let mut order: Vec<u32> = (0..n as u32).collect();
            order.sort_unstable_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b)));
            order
        })
        .collect();

    let grower = Grower {
        covariates: input.covariates,
        presorted: &presorted,
        rule,
        min_node_size: params.min_node_size,
        alpha: params.alpha,
        mtry: params.resolved_mtry(p),
    };

    let trees: Vec<HonestTree> = (0..n_trees)
        .into_par_iter()
        .map(|t| {
            let bag = t / params.bag_size;
            let mut rng = stream_rng(params.seed, STREAM_TREE | t as u64);
            let half = &half_samples[bag];
            let k = per_tree.min(half.len());
            let mut picked: Vec<usize> = index::sample(&mut rng, half.len(), k)
                .into_iter()
                .map(|i| half[i])
                .collect();
            picked.shuffle(&mut rng);
            let n_split = if k >= 2 {
                ((params.honesty_fraction * k as f64).round() as usize).clamp(1, k - 1)
            } else {
                0
            };
            let split_rows = expand(&units, &picked[..n_split]);
            let est_rows = expand(&units, &picked[n_split..]);
            grower.grow(split_rows, est_rows, bag as u32, &mut rng)
        })
        .collect();

    let split_counts = tally_splits(&trees, p);
    Ok(ForestModel {
        trees,
        params: params.clone(),
        covariate_names: Vec::new(),
        fingerprint: String::new(),
        n_train: n,
        n_features: p,
        split_counts,
    })
}

fn tally_splits(trees: &[HonestTree], p: usize) -> Vec<Vec<u64>> {
    let mut counts: Vec<Vec<u64>> = Vec::new();
    for tree in trees {
        for (node, &depth) in tree.nodes.iter().zip(&tree.depths) {
            if let Node::Split { feature, .. } = node {
                let d = depth as usize;
                if counts.len() <= d {
                    counts.resize(d + 1, vec![0; p]);
                }
                counts[d][*feature as usize] += 1;
            }
        }
    }
    counts
}

impl ForestModel {
    /// Restores derived per-tree state that is not serialised.
    pub fn rebuild_index(&mut self) {
        self.trees.iter_mut().for_each(HonestTree::rebuild_steps);
    }

    pub fn with_metadata(mut self, frame: &ObservationFrame) -> Self {
        self.covariate_names = frame.covariate_names().to_vec();
        self.fingerprint = frame.fingerprint();
        self
    }

    pub fn check_point(&self, x: &[f64], n_features: usize) -> Result<()> {
        if x.len() != n_features {
            return Err(Error::InvalidParameter(format!(
                "test point has {} values, model expects {n_features}",
                x.len()
            )));
        }
        Ok(())
    }

    /// Checks that `frame` is the data this model was trained on.
    pub fn check_frame(&self, frame: &ObservationFrame) -> Result<()> {
        if frame.n_rows() != self.n_train {
            return Err(Error::ModelMismatch(format!(
                "model trained on {} rows, frame has {}",
                self.n_train,
                frame.n_rows()
            )));
        }
        if !self.fingerprint.is_empty() && self.fingerprint != frame.fingerprint() {
            return Err(Error::ModelMismatch("training-frame fingerprint differs".into()));
        }
        Ok(())
    }

    /// Maps `f` over `n_rows` query rows, handing it `leaf(tree, node)`
    /// for every leaf the row reaches. Rows are pushed through one tree at
    /// a time in blocks so that a tree's nodes stay in cache. With
    /// `in_bag`, trees containing the row are skipped unless that leaves
    /// none.
    pub fn map_leaves<L: Send, T: Send>(
        &self,
        n_rows: usize,
        value: impl Fn(usize, usize) -> f64 + Sync,
        in_bag: Option<&InBagIndex>,
        leaf: impl Fn(usize, usize) -> L + Sync,
        f: impl Fn(usize, &[L]) -> T + Sync,
    ) -> Vec<T> {
        const BLOCK: usize = 2048;
        let blocks: Vec<Vec<T>> = (0..n_rows.div_ceil(BLOCK))
            .into_par_iter()
            .map(|b| {
                let rows = b * BLOCK..((b + 1) * BLOCK).min(n_rows);
                let mut found: Vec<Vec<L>> = rows.clone().map(|_| Vec::new()).collect();
                for (t, tree) in self.trees.iter().enumerate() {
                    for (row, out) in rows.clone().zip(found.iter_mut()) {
                        if !in_bag.is_some_and(|ib| ib.contains(t, row)) {
                            out.push(leaf(t, tree.leaf_by(|j| value(row, j))));
                        }
                    }
                }
                rows.zip(found.iter_mut())
                    .map(|(row, out)| {
                        if out.is_empty() {
                            out.extend(
                                self.trees
                                    .iter()
                                    .enumerate()
                                    .map(|(t, tree)| leaf(t, tree.leaf_by(|j| value(row, j)))),
                            );
                        }
                        f(row, out)
                    })
                    .collect()
            })
            .collect();
        blocks.into_iter().flatten().collect()
    }

    /// Leaf node of every selected tree for a covariate vector, as
    /// `(tree index, node index)` pairs.
    pub fn leaves_for(
        &self,
        x: &[f64],
        selection: TreeSelection,
        in_bag: Option<&InBagIndex>,
    ) -> Vec<(usize, usize)> {
        self.trees
            .iter()
            .enumerate()
            .filter(|(t, _)| match selection {
                TreeSelection::All => true,
                TreeSelection::OutOfBag(row) => !in_bag.is_some_and(|ib| ib.contains(*t, row)),
            })
            .map(|(t, tree)| (t, tree.leaf_for(x)))
            .collect()
    }
}

/// Forest similarity weights of every training row relative to `x`:
/// each contributing tree spreads mass `1/B` uniformly over the
/// estimation rows sharing `x`'s leaf.
pub fn forest_weights(model: &ForestModel, x: &[f64]) -> Result<Vec<f64>> {
    forest_weights_selected(model, x, TreeSelection::All)
}

/// [`forest_weights`] restricted to a tree selection, e.g. out-of-bag trees
/// for a training row.
pub fn forest_weights_selected(
    model: &ForestModel,
    x: &[f64],
    selection: TreeSelection,
) -> Result<Vec<f64>> {
    model.check_point(x, model.n_features)?;
    let in_bag = match selection {
        TreeSelection::All => None,
        TreeSelection::OutOfBag(_) => Some(InBagIndex::new(model)),
    };
    let mut leaves = model.leaves_for(x, selection, in_bag.as_ref());
    if leaves.is_empty() {
        leaves = model.leaves_for(x, TreeSelection::All, None);
    }
    let mut alpha = vec![0.0; model.n_train];
    let b = leaves.len() as f64;
    for (t, node) in leaves {
        let samples = model.trees[t].leaf_samples(node);
        let w = 1.0 / (b * samples.len() as f64);
        for &i in samples {
            alpha[i as usize] += w;
        }
    }
    Ok(alpha)
}

/// Depth-weighted split frequencies.
///
/// For depths `d = 1..=max_depth` (root is 1) the share of splits at that
/// depth using each feature is weighted by `d^-2`, normalised over the
/// depths considered. Depths without splits contribute nothing.
pub fn variable_importance(model: &ForestModel, max_depth: usize) -> Vec<f64> {
    let p = model.n_features;
    let raw: Vec<f64> = (1..=max_depth).map(|d| (d as f64).powi(-2)).collect();
    let norm: f64 = raw.iter().sum();
    let mut scores = vec![0.0; p];
    for (d, w) in raw.iter().enumerate() {
        let Some(counts) = model.split_counts.get(d) else {
            break;
        };
        let total: u64 = counts.iter().sum();
        if total == 0 {
            continue;
        }
        for (s, &c) in scores.iter_mut().zip(counts) {
            *s += w / norm * c as f64 / total as f64;
        }
    }
    scores
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Target<'a>(&'a [f64]);

    impl SplitRule for Target<'_> {
        fn pseudo_outcomes(&self, rows: &[u32], out: &mut Vec<f64>) -> bool {
            out.clear();
            out.extend(rows.iter().map(|&r| self.0[r as usize]));
            true
        }
    }

    fn grid(n: usize) -> (Vec<Vec<f64>>, Vec<f64>, Vec<u32>) {
        let x0: Vec<f64> = (0..n).map(|i| (i % 97) as f64 / 97.0).collect();
        let x1: Vec<f64> = (0..n).map(|i| ((i * 31) % 89) as f64 / 89.0).collect();
        let y: Vec<f64> = x0.iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect();
        let clusters = (0..n as u32).map(|i| i / 2).collect();
        (vec![x0, x1], y, clusters)
    }

    #[test]
    fn honest_partition_and_cluster_sampling() {
        let (x, y, clusters) = grid(400);
        let input = ForestInput {
            covariates: &x,
            clusters: &clusters,
            n_clusters: 200,
        };
        let params = TreeParams {
            n_trees: 8,
            bag_size: 4,
            ..Default::default()
        };
        let model = grow_forest(&input, &Target(&y), &params).unwrap();
        assert_eq!(model.trees.len(), 8);
        for tree in &model.trees {
            let mut all: Vec<u32> = tree.subsample().collect();
            let len = all.len();
            all.sort_unstable();
            all.dedup();
            assert_eq!(all.len(), len, "split and estimation rows overlap");
            // households are never separated
            for &r in &all {
                let mate = r ^ 1;
                assert!(all.binary_search(&mate).is_ok());
            }
            let leaf_rows: usize = tree
                .nodes
                .iter()
                .map(|n| match n {
                    Node::Leaf { samples } => {
                        assert!(samples.len() >= params.min_node_size);
                        samples.len()
                    }
                    _ => 0,
                })
                .sum();
            assert_eq!(leaf_rows, tree.estimation_rows.len());
        }
        // trees of one bag share a half-sample
        let bag0: Vec<u32> = model.trees[0].subsample().collect();
        assert_eq!(bag0.len(), 200);
    }

    #[test]
    fn first_split_finds_the_step() {
        let (x, y, clusters) = grid(400);
        let input = ForestInput {
            covariates: &x,
            clusters: &clusters,
            n_clusters: 200,
        };
        let model = grow_forest(&input, &Target(&y), &TreeParams { n_trees: 20, ..Default::default() }).unwrap();
        for tree in &model.trees {
            match &tree.nodes[0] {
                Node::Split { feature, threshold, .. } => {
                    assert_eq!(*feature, 0);
                    assert!((threshold - 0.5).abs() < 0.03, "threshold {threshold}");
                }
                Node::Leaf { .. } => panic!("root should split"),
            }
        }
        let imp = variable_importance(&model, 4);
        assert!(imp[0] > imp[1]);
        assert!(imp.iter().sum::<f64>() <= 1.0 + 1e-12);
    }

    #[test]
    fn weights_are_a_distribution() {
        let (x, y, clusters) = grid(300);
        let input = ForestInput {
            covariates: &x,
            clusters: &clusters,
            n_clusters: 150,
        };
        let model = grow_forest(&input, &Target(&y), &TreeParams { n_trees: 10, ..Default::default() }).unwrap();
        let alpha = forest_weights(&model, &[0.2, 0.7]).unwrap();
        assert!(alpha.iter().all(|&a| a >= 0.0));
        assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(forest_weights(&model, &[0.2]).is_err());
        let oob = forest_weights_selected(&model, &[x[0][3], x[1][3]], TreeSelection::OutOfBag(3)).unwrap();
        assert!((oob.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unsplittable_tree_weights_are_uniform() {
        let (x, y, clusters) = grid(100);
        let input = ForestInput {
            covariates: &x,
            clusters: &clusters,
            n_clusters: 50,
        };
        let params = TreeParams {
            n_trees: 1,
            min_node_size: 25,
            bag_size: 1,
            ..Default::default()
        };
        let model = grow_forest(&input, &Target(&y), &params).unwrap();
        assert_eq!(model.trees[0].n_splits(), 0);
        let alpha = forest_weights(&model, &[0.9, 0.1]).unwrap();
        let est = &model.trees[0].estimation_rows;
        for (i, a) in alpha.iter().enumerate() {
            let expected = if est.binary_search(&(i as u32)).is_ok() {
                1.0 / est.len() as f64
            } else {
                0.0
            };
            assert!((a - expected).abs() < 1e-15);
        }
        assert!(variable_importance(&model, 4).iter().all(|&s| s == 0.0));
    }

    #[test]
    fn importance_weights_follow_inverse_square_depth() {
        let model = ForestModel {
            trees: vec![],
            params: TreeParams::default(),
            covariate_names: vec![],
            fingerprint: String::new(),
            n_train: 0,
            n_features: 2,
            split_counts: vec![vec![1, 0], vec![0, 2]],
        };
        // w1 = 1 / (1 + 1/4), w2 = (1/4) / (1 + 1/4)
        let s = variable_importance(&model, 2);
        assert!((s[0] - 0.8).abs() < 1e-15);
        assert!((s[1] - 0.2).abs() < 1e-15);
        let s4 = variable_importance(&model, 4);
        let norm = 1.0 + 0.25 + 1.0 / 9.0 + 1.0 / 16.0;
        assert!((s4[0] - 1.0 / norm).abs() < 1e-15);
        assert!(s4.iter().sum::<f64>() < 1.0);
    }

    #[test]
    fn too_few_rows() {
        let x = vec![vec![0.0; 6]];
        let y = vec![0.0; 6];
        let c: Vec<u32> = (0..6).collect();
        let input = ForestInput {
            covariates: &x,
            clusters: &c,
            n_clusters: 6,
        };
        assert!(grow_forest(&input, &Target(&y), &TreeParams::default()).is_err());
    }
}
