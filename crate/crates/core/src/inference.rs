//! Variance estimation and significance classification.
//!
//! Forest predictions get their variance from the bootstrap of little
//! bags: trees are grown in bags of `ℓ` that share a half-sample, and the
//! spread of bag-level averages, minus the within-bag noise it contains,
//! estimates the sampling variance of the forest average. Linear fits and
//! averages of scores use cluster-robust sandwiches at the household level.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cluster_sandwich, QrLeastSquares};
use crate::stats::{two_sided_p, Z_975};

/// Reported variances never fall below this value.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Bag structure for forest variance estimation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LittleBagsConfig {
    pub bag_size: usize,
}

impl Default for LittleBagsConfig {
    fn default() -> Self {
        Self { bag_size: 4 }
    }
}

impl LittleBagsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bag_size < 2 {
            return Err(Error::InvalidParameter(
                "bag_size must be at least 2 for a within-bag correction".into(),
            ));
        }
        Ok(())
    }
}

/// A debiased little-bags variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceEstimate {
    pub variance: f64,
    /// The debiased value was below [`VARIANCE_FLOOR`] and was floored.
    pub floored: bool,
    /// Bags with every tree contributing.
    pub complete_bags: usize,
}

/// Little-bags variance of a forest average.
///
/// `tree_scores` holds `(bag, score)` for every contributing tree, where
/// the score is the tree's average of the linearised estimating equation at
/// the forest solution; `scale` converts the variance of the average score
/// into the variance of the estimate (for a ratio estimator, the inverse
/// squared denominator). Only bags whose `bag_size` trees all contribute
/// are used. With fewer than two such bags the variance is infinite.
pub fn little_bags_variance(
    tree_scores: &[(u32, f64)],
    bag_size: usize,
    scale: f64,
) -> Result<VarianceEstimate> {
    if bag_size < 2 {
        return Err(Error::InvalidParameter(
            "forest was grown without little bags; refit with bag_size >= 2".into(),
        ));
    }
    let n_bags = tree_scores.iter().map(|&(b, _)| b as usize + 1).max().unwrap_or(0);
    let mut sums = vec![0.0; n_bags];
    let mut counts = vec![0usize; n_bags];
    for &(b, s) in tree_scores {
        sums[b as usize] += s;
        counts[b as usize] += 1;
    }
    let mut between = 0.0;
    let mut within = 0.0;
    let mut complete = 0usize;
    let mut bag_mean = vec![f64::NAN; n_bags];
    for b in 0..n_bags {
        if counts[b] == bag_size {
            let m = sums[b] / bag_size as f64;
            bag_mean[b] = m;
            between += m * m;
            complete += 1;
        }
    }
    for &(b, s) in tree_scores {
        let m = bag_mean[b as usize];
        if !m.is_nan() {
            within += (s - m) * (s - m);
        }
    }
    if complete < 2 {
        return Ok(VarianceEstimate {
            variance: f64::INFINITY,
            floored: false,
            complete_bags: complete,
        });
    }
    let g = complete as f64;
    let between = between / g;
    let within = within / (g * (bag_size as f64 - 1.0));
    let debiased = scale * (between - within / bag_size as f64);
    let floored = !(debiased >= VARIANCE_FLOOR);
    Ok(VarianceEstimate {
        variance: if floored { VARIANCE_FLOOR } else { debiased },
        floored,
        complete_bags: complete,
    })
}

/// Streaming form of [`little_bags_variance`] for scores that arrive
/// grouped by bag.
#[derive(Debug, Clone, Copy, Default)]
pub struct LittleBagsAccumulator {
    bag: u32,
    n: usize,
    mean: f64,
    m2: f64,
    between: f64,
    within: f64,
    complete: usize,
}

impl LittleBagsAccumulator {
    /// Adds a tree score. A bag must not reappear once another has started.
    pub fn push(&mut self, bag: u32, score: f64, bag_size: usize) {
        if self.n > 0 && bag != self.bag {
            self.close(bag_size);
        }
        self.bag = bag;
        self.n += 1;
        let delta = score - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (score - self.mean);
    }

    fn close(&mut self, bag_size: usize) {
        if self.n == bag_size {
            self.between += self.mean * self.mean;
            self.within += self.m2;
            self.complete += 1;
        }
        self.n = 0;
        self.mean = 0.0;
        self.m2 = 0.0;
    }

    pub fn finish(mut self, bag_size: usize, scale: f64) -> Result<VarianceEstimate> {
        if bag_size < 2 {
            return Err(Error::InvalidParameter(
                "forest was grown without little bags; refit with bag_size >= 2".into(),
            ));
        }
        self.close(bag_size);
        if self.complete < 2 {
            return Ok(VarianceEstimate {
                variance: f64::INFINITY,
                floored: false,
                complete_bags: self.complete,
            });
        }
        let g = self.complete as f64;
        let between = self.between / g;
        let within = self.within / (g * (bag_size as f64 - 1.0));
        let debiased = scale * (between - within / bag_size as f64);
        let floored = !(debiased >= VARIANCE_FLOOR);
        Ok(VarianceEstimate {
            variance: if floored { VARIANCE_FLOOR } else { debiased },
            floored,
            complete_bags: self.complete,
        })
    }
}

/// Point estimate with normal-approximation inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub estimate: f64,
    pub variance: f64,
    pub se: f64,
    pub p_value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl EffectEstimate {
    pub fn from_variance(estimate: f64, variance: f64) -> Self {
        let se = variance.max(0.0).sqrt();
        let p_value = if se > 0.0 {
            two_sided_p(estimate / se)
        } else if estimate == 0.0 {
            1.0
        } else {
            0.0
        };
        Self {
            estimate,
            variance,
            se,
            p_value,
            ci_low: estimate - Z_975 * se,
            ci_high: estimate + Z_975 * se,
        }
    }

    pub fn from_se(estimate: f64, se: f64) -> Self {
        Self::from_variance(estimate, se * se)
    }
}

/// Share of estimates in each significance class at one level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignificanceSummary {
    pub level: f64,
    pub share_positive_sig: f64,
    pub share_negative_sig: f64,
    pub share_null: f64,
}

/// Two-sided z-test classification at each level.
#[derive(Debug, Clone, PartialEq)]
pub struct Significance {
    /// `flags[k][i]`: estimate `i` is significant at `levels[k]`.
    pub flags: Vec<Vec<bool>>,
    pub summaries: Vec<SignificanceSummary>,
}

/// Classifies `(estimate, se)` pairs as positive-significant,
/// negative-significant or null at each level.
pub fn classify_significance(estimates: &[(f64, f64)], levels: &[f64]) -> Significance {
    let n = estimates.len().max(1) as f64;
    let mut flags = Vec::with_capacity(levels.len());
    let mut summaries = Vec::with_capacity(levels.len());
    for &level in levels {
        let mut pos = 0usize;
        let mut neg = 0usize;
        let f: Vec<bool> = estimates
            .iter()
            .map(|&(est, se)| {
                let p = EffectEstimate::from_se(est, se).p_value;
                let sig = p < level;
                if sig && est > 0.0 {
                    pos += 1;
                } else if sig && est < 0.0 {
                    neg += 1;
                }
                sig
            })
            .collect();
        summaries.push(SignificanceSummary {
            level,
            share_positive_sig: pos as f64 / n,
            share_negative_sig: neg as f64 / n,
            share_null: (estimates.len() - pos - neg) as f64 / n,
        });
        flags.push(f);
    }
    Significance { flags, summaries }
}

/// Cluster-robust (CR0) standard errors of OLS-type coefficients with
/// regressors `x` and residuals `residuals`. Singleton clusters give the
/// HC0 standard errors.
pub fn cluster_robust_se(x: &DMatrix<f64>, residuals: &[f64], clusters: &[u32]) -> Result<Vec<f64>> {
    if residuals.len() != x.nrows() || clusters.len() != x.nrows() {
        return Err(Error::InvalidData("residuals and clusters must match the design rows".into()));
    }
    let bread = QrLeastSquares::new(x)?.xtx_inverse();
    let dense = crate::linalg::densify(clusters.iter().copied());
    let resid = nalgebra::DVector::from_column_slice(residuals);
    let cov = cluster_sandwich(x, &bread, &resid, &dense)?;
    Ok((0..cov.ncols()).map(|j| cov[(j, j)].max(0.0).sqrt()).collect())
}

/// Household-clustered standard errors of a 2SLS fit on `frame`, built
/// from its second-stage regressors and structural residuals.
pub fn cluster_robust_se_2sls(frame: &crate::dataset::ObservationFrame, fit: &crate::linear::TwoSlsFit) -> Result<Vec<f64>> {
    if frame.n_rows() != fit.residuals.len() {
        return Err(Error::ModelMismatch("fit and frame differ in row count".into()));
    }
    cluster_robust_se(&fit.regressors, &fit.residuals, frame.cluster_ids())
}

/// Heteroskedasticity-robust (HC0) standard errors.
pub fn hc0_se(x: &DMatrix<f64>, residuals: &[f64]) -> Result<Vec<f64>> {
    let singletons: Vec<u32> = (0..x.nrows() as u32).collect();
    cluster_robust_se(x, residuals, &singletons)
}

/// Mean of `values` with a household-clustered standard error
/// `sqrt(sum_g (sum_{i in g} (v_i - mean))^2) / n`.
pub fn clustered_mean(values: &[f64], clusters: &[u32]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Empty("cannot average zero values".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let dense = crate::linalg::densify(clusters.iter().copied());
    let g = dense.iter().map(|&c| c as usize + 1).max().unwrap_or(0);
    let mut sums = vec![0.0; g];
    for (v, &c) in values.iter().zip(&dense) {
        sums[c as usize] += v - mean;
    }
    let ss: f64 = sums.iter().map(|s| s * s).sum();
    Ok((mean, ss.sqrt() / n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn z_arithmetic() {
        let e = EffectEstimate::from_se(0.10, 0.04);
        assert!(((e.estimate / e.se) - 2.5).abs() < 1e-12);
        let s = classify_significance(&[(0.10, 0.04)], &[0.05, 0.10]);
        assert_eq!(s.flags, vec![vec![true], vec![true]]);
        let s = classify_significance(&[(0.0, 0.3)], &[0.05, 0.10]);
        assert_eq!(s.flags, vec![vec![false], vec![false]]);
        assert_eq!(s.summaries[0].share_null, 1.0);
    }

    #[test]
    fn shares_sum_to_one() {
        let est = [(0.3, 0.1), (-0.3, 0.1), (0.01, 0.1), (0.17, 0.1)];
        let s = classify_significance(&est, &[0.05, 0.10]);
        // 0.17/0.1 = 1.7: significant at 10% only
        assert_eq!(s.flags[0], [true, true, false, false]);
        assert_eq!(s.flags[1], [true, true, false, true]);
        for sum in &s.summaries {
            let total = sum.share_positive_sig + sum.share_negative_sig + sum.share_null;
            assert!((total - 1.0).abs() < 1e-15);
        }
        assert_eq!(s.summaries[1].share_positive_sig, 0.5);
        assert_eq!(s.summaries[1].share_negative_sig, 0.25);
    }

    #[test]
    fn intervals_bracket_the_estimate() {
        let e = EffectEstimate::from_variance(-0.2, 0.01);
        assert!(e.ci_low <= e.estimate && e.estimate <= e.ci_high);
        assert!((e.se - 0.1).abs() < 1e-15);
        let inf = EffectEstimate::from_variance(0.5, f64::INFINITY);
        assert_eq!(inf.p_value, 1.0);
        assert!(inf.ci_low < 0.5 && inf.ci_high > 0.5);
    }

    #[test]
    fn identical_trees_have_zero_variance() {
        let scores: Vec<(u32, f64)> = (0..40).map(|t| (t / 4, 0.0)).collect();
        let v = little_bags_variance(&scores, 4, 1.0).unwrap();
        assert!(v.variance <= 1e-10);
        assert!(v.floored);
        assert_eq!(v.complete_bags, 10);
    }

    #[test]
    fn between_minus_within_over_bag_size() {
        // two bags of two: means 1 and -1, within deviations ±0.5
        let scores = [(0, 1.5), (0, 0.5), (1, -0.5), (1, -1.5)];
        let v = little_bags_variance(&scores, 2, 2.0).unwrap();
        // between = (1 + 1)/2 = 1; within = 4 * 0.25 / (2 * 1) = 0.5
        assert!((v.variance - 2.0 * (1.0 - 0.25)).abs() < 1e-15);
        // an incomplete bag is ignored
        let mut more = scores.to_vec();
        more.push((2, 100.0));
        assert_eq!(little_bags_variance(&more, 2, 2.0).unwrap(), v);
        assert!(little_bags_variance(&scores, 1, 1.0).is_err());
        let single = little_bags_variance(&scores[..2], 2, 1.0).unwrap();
        assert!(single.variance.is_infinite());
    }

    #[test]
    fn permuting_within_bags_is_harmless() {
        let scores: Vec<(u32, f64)> = (0..24).map(|t| (t / 4, ((t * 7919) % 13) as f64 - 6.0)).collect();
        let mut perm = scores.clone();
        for chunk in perm.chunks_mut(4) {
            chunk.reverse();
        }
        let a = little_bags_variance(&scores, 4, 1.0).unwrap().variance;
        let b = little_bags_variance(&perm, 4, 1.0).unwrap().variance;
        assert!((a - b).abs() <= 1e-12 * a.abs());
    }

    #[test]
    fn streaming_matches_batch() {
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // bag 3 is incomplete and bag 5 has a single tree
        let mut scores = Vec::new();
        for bag in 0..8u32 {
            let k = match bag {
                3 => 2,
                5 => 1,
                _ => 4,
            };
            for _ in 0..k {
                scores.push((bag, rng.random_range(-2.0..3.0)));
            }
        }
        let batch = little_bags_variance(&scores, 4, 0.7).unwrap();
        let mut acc = LittleBagsAccumulator::default();
        for &(b, s) in &scores {
            acc.push(b, s, 4);
        }
        let streamed = acc.finish(4, 0.7).unwrap();
        assert_eq!(streamed.complete_bags, batch.complete_bags);
        assert!((streamed.variance - batch.variance).abs() < 1e-12 * batch.variance.abs().max(1.0));
        assert!(LittleBagsAccumulator::default().finish(4, 1.0).unwrap().variance.is_infinite());
    }

    #[test]
    fn clustered_mean_se() {
        let (m, se) = clustered_mean(&[1.0, 3.0, 5.0, 7.0], &[0, 0, 1, 1]).unwrap();
        assert_eq!(m, 4.0);
        // cluster sums of deviations: -4, 4
        assert!((se - (32.0f64).sqrt() / 4.0).abs() < 1e-15);
        assert!(clustered_mean(&[], &[]).is_err());
    }

    #[test]
    fn singleton_clusters_match_hc0() {
        let x = DMatrix::from_row_slice(4, 2, &[1., 0., 1., 1., 1., 2., 1., 3.]);
        let r = [0.5, -0.2, 0.1, -0.4];
        let a = cluster_robust_se(&x, &r, &[9, 8, 7, 6]).unwrap();
        let b = hc0_se(&x, &r).unwrap();
        assert_eq!(a, b);
        assert!(cluster_robust_se(&x, &r, &[1, 1, 1, 1]).is_err());
    }
}
