use serde::{Deserialize, Serialize};

use super::{grow_forest, ForestInput, ForestModel, InBagIndex, SplitRule, TreeParams};
use crate::error::{Error, Result};

struct MeanSplit<'a>(&'a [f64]);

impl SplitRule for MeanSplit<'_> {
    fn pseudo_outcomes(&self, rows: &[u32], out: &mut Vec<f64>) -> bool {
        out.clear();
        out.extend(rows.iter().map(|&r| self.0[r as usize]));
        true
    }
}

/// A conditional-mean forest used for nuisance regressions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressionForest {
    pub model: ForestModel,
    /// Mean target of each leaf, per tree (unused for split nodes).
    leaf_means: Vec<Vec<f64>>,
    /// Out-of-bag prediction for every training row.
    pub oob_predictions: Vec<f64>,
    /// Set when the target was constant and no forest was grown.
    pub constant: Option<f64>,
}

/// Grows a regression forest of `target` on the covariates.
pub fn grow_regression_forest(
    input: &ForestInput<'_>,
    target: &[f64],
    params: &TreeParams,
) -> Result<RegressionForest> {
    let n = input.n_rows();
    if target.len() != n {
        return Err(Error::InvalidData("target length differs from covariates".into()));
    }
    if n < 2 * params.min_node_size {
        return Err(Error::InvalidData(format!(
            "{n} rows is fewer than twice min_node_size ({})",
            params.min_node_size
        )));
    }
    if target.iter().all(|&v| v == target[0]) {
        params.validate(input.n_features())?;
        return Ok(RegressionForest {
            model: ForestModel {
                trees: Vec::new(),
                params: params.clone(),
                covariate_names: Vec::new(),
                fingerprint: String::new(),
                n_train: n,
                n_features: input.n_features(),
                split_counts: Vec::new(),
            },
            leaf_means: Vec::new(),
            oob_predictions: vec![target[0]; n],
            constant: Some(target[0]),
        });
    }

    let model = grow_forest(input, &MeanSplit(target), params)?;
    let leaf_means: Vec<Vec<f64>> = model
        .trees
        .iter()
        .map(|tree| {
            tree.nodes
                .iter()
                .enumerate()
                .map(|(id, _)| {
                    let s = tree.leaf_samples(id);
                    if s.is_empty() {
                        f64::NAN
                    } else {
                        s.iter().map(|&i| target[i as usize]).sum::<f64>() / s.len() as f64
                    }
                })
                .collect()
        })
        .collect();

    let in_bag = InBagIndex::new(&model);
    let oob_predictions = model.map_leaves(
        n,
        |row, j| input.covariates[j][row],
        Some(&in_bag),
        |t, node| leaf_means[t][node],
        |_, means| means.iter().sum::<f64>() / means.len() as f64,
    );

    Ok(RegressionForest {
        model,
        leaf_means,
        oob_predictions,
        constant: None,
    })
}

impl RegressionForest {
    /// Forest prediction at a new point (all trees).
    pub fn predict(&self, x: &[f64]) -> f64 {
        if let Some(c) = self.constant {
            return c;
        }
        let total: f64 = self
            .model
            .trees
            .iter()
            .zip(&self.leaf_means)
            .map(|(tree, means)| means[tree.leaf_for(x)])
            .sum();
        total / self.model.trees.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::forest_weights;

    fn input(x: &[Vec<f64>], c: &'static [u32]) -> ForestInput<'static> {
        let x: &'static [Vec<f64>] = Box::leak(x.to_vec().into_boxed_slice());
        ForestInput {
            covariates: x,
            clusters: c,
            n_clusters: c.len(),
        }
    }

    fn singletons(n: usize) -> &'static [u32] {
        Box::leak((0..n as u32).collect::<Vec<_>>().into_boxed_slice())
    }

    #[test]
    fn constant_target_is_flagged() {
        let x = vec![(0..40).map(f64::from).collect::<Vec<_>>()];
        let y = vec![3.5; 40];
        let f = grow_regression_forest(&input(&x, singletons(40)), &y, &TreeParams::default()).unwrap();
        assert_eq!(f.constant, Some(3.5));
        assert!(f.oob_predictions.iter().all(|&v| v == 3.5));
        assert_eq!(f.predict(&[100.0]), 3.5);
    }

    #[test]
    fn unsplittable_single_tree_predicts_leaf_mean() {
        let n = 60;
        let x = vec![(0..n).map(|i| f64::from(i as u32)).collect::<Vec<_>>()];
        let y: Vec<f64> = (0..n).map(|i| (i % 7) as f64).collect();
        let params = TreeParams {
            n_trees: 1,
            min_node_size: n / 2,
            bag_size: 1,
            ..Default::default()
        };
        let f = grow_regression_forest(&input(&x, singletons(n)), &y, &params).unwrap();
        let est = &f.model.trees[0].estimation_rows;
        let mean = est.iter().map(|&i| y[i as usize]).sum::<f64>() / est.len() as f64;
        for probe in [-5.0, 10.0, 80.0] {
            assert!((f.predict(&[probe]) - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn prediction_equals_weighted_mean() {
        let n = 200;
        let x = vec![(0..n).map(|i| ((i * 37) % 101) as f64).collect::<Vec<_>>()];
        let y: Vec<f64> = x[0].iter().map(|v| (v / 10.0).sin()).collect();
        let f = grow_regression_forest(&input(&x, singletons(n)), &y, &TreeParams { n_trees: 30, ..Default::default() })
            .unwrap();
        let alpha = forest_weights(&f.model, &[42.0]).unwrap();
        let weighted: f64 = alpha.iter().zip(&y).map(|(a, v)| a * v).sum();
        assert!((weighted - f.predict(&[42.0])).abs() < 1e-12);
    }

    #[test]
    fn too_small_input_is_rejected() {
        let x = vec![vec![0.0, 1.0, 2.0]];
        assert!(grow_regression_forest(&input(&x, singletons(3)), &[0.0, 1.0, 0.0], &TreeParams::default()).is_err());
    }
}
