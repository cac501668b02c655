use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tuning parameters shared by every forest in the crate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeParams {
    pub n_trees: usize,
    /// Share of sampling units drawn (without replacement) for each tree.
    pub subsample_fraction: f64,
    /// Share of a tree's subsample used to choose splits; the rest
    /// populates the leaves.
    pub honesty_fraction: f64,
    /// Candidate features per split. `None` uses `min(ceil(sqrt(p)) + 20, p)`.
    pub mtry: Option<usize>,
    /// Minimum number of split-sample and estimation-sample rows in a leaf.
    pub min_node_size: usize,
    /// Each child of a split keeps at least this share of the parent's
    /// split-sample rows.
    pub alpha: f64,
    pub seed: u64,
    /// Sample whole households rather than individual rows.
    pub cluster_sampling: bool,
    /// Trees per little bag. `1` disables the bag structure and with it
    /// variance estimation.
    pub bag_size: usize,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            n_trees: 2000,
            subsample_fraction: 0.5,
            honesty_fraction: 0.5,
            mtry: None,
            min_node_size: 5,
            alpha: 0.05,
            seed: 42,
            cluster_sampling: true,
            bag_size: 4,
        }
    }
}

impl TreeParams {
    /// Tree count of the large-scale profile.
    pub const PAPER_SCALE_TREES: usize = 100_000;

    pub fn validate(&self, n_features: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.n_trees == 0 {
            return bad("n_trees must be positive".into());
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return bad(format!("subsample_fraction {} not in (0, 1]", self.subsample_fraction));
        }
        if !(self.honesty_fraction > 0.0 && self.honesty_fraction < 1.0) {
            return bad(format!("honesty_fraction {} not in (0, 1)", self.honesty_fraction));
        }
        if self.min_node_size == 0 {
            return bad("min_node_size must be positive".into());
        }
        if !(0.0..=0.25).contains(&self.alpha) {
            return bad(format!("alpha {} not in [0, 0.25]", self.alpha));
        }
        if self.bag_size == 0 {
            return bad("bag_size must be positive".into());
        }
        if n_features == 0 {
            return bad("at least one covariate is required".into());
        }
        if let Some(m) = self.mtry {
            if m == 0 || m > n_features {
                return bad(format!("mtry {m} not in 1..={n_features}"));
            }
        }
        Ok(())
    }

    pub fn resolved_mtry(&self, n_features: usize) -> usize {
        self.mtry.unwrap_or_else(|| default_mtry(n_features))
    }

    /// `n_trees` rounded up to a whole number of bags.
    pub fn effective_n_trees(&self) -> usize {
        self.n_trees.div_ceil(self.bag_size) * self.bag_size
    }

    /// Profile used for nuisance regressions: a quarter of the trees (at
    /// least 50) and no bag structure.
    pub fn nuisance(&self) -> Self {
        Self {
            n_trees: (self.n_trees / 4).max(50),
            bag_size: 1,
            ..self.clone()
        }
    }
}

/// `min(ceil(sqrt(p)) + 20, p)`.
pub fn default_mtry(n_features: usize) -> usize {
    ((n_features as f64).sqrt().ceil() as usize + 20).min(n_features)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mtry_rule_of_thumb() {
        assert_eq!(default_mtry(5), 5);
        assert_eq!(default_mtry(44), 27);
        assert_eq!(default_mtry(400), 40);
    }

    #[test]
    fn trees_round_up_to_bags() {
        let p = TreeParams { n_trees: 10, ..Default::default() };
        assert_eq!(p.effective_n_trees(), 12);
        assert_eq!(TreeParams { bag_size: 1, ..p }.effective_n_trees(), 10);
    }

    #[test]
    fn validation() {
        let ok = TreeParams::default();
        assert!(ok.validate(3).is_ok());
        assert!(TreeParams { mtry: Some(4), ..ok.clone() }.validate(3).is_err());
        assert!(TreeParams { honesty_fraction: 1.0, ..ok.clone() }.validate(3).is_err());
        assert!(TreeParams { subsample_fraction: 0.0, ..ok.clone() }.validate(3).is_err());
        assert!(TreeParams { alpha: 0.3, ..ok.clone() }.validate(3).is_err());
        assert!(TreeParams { n_trees: 0, ..ok }.validate(3).is_err());
    }
}
