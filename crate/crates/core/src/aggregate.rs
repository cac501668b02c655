//! Doubly robust aggregation of forest output, and descriptive summaries
//! of the estimated effect distribution.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{ObservationFrame, SubgroupSpec};
use crate::error::{Error, Result};
use crate::inference::{clustered_mean, EffectEstimate};
use crate::ivforest::{IteEstimate, IvForestModel};
use crate::linalg::clustered_mean_difference;
use crate::stats::{quantile_sorted, sorted_copy};

/// Propensities are clipped to this band before being used as divisors.
pub const PROPENSITY_CLIP: (f64, f64) = (0.01, 0.99);

/// Smallest mean compliance accepted by the LATE scores.
pub const MIN_COMPLIANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimand {
    Late,
    Itt,
}

/// Per-unit doubly robust scores; their mean is the point estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoublyRobustScores {
    pub estimand: Estimand,
    pub scores: Vec<f64>,
    pub estimate: f64,
    /// Household-clustered standard error of the mean score.
    pub se: f64,
    pub propensity: Vec<f64>,
    /// Rows whose propensity had to be clipped.
    pub clipped: usize,
    /// Mean compliance used to normalise LATE scores.
    pub compliance: Option<f64>,
    pub clusters: Vec<u32>,
}

impl DoublyRobustScores {
    fn new(
        estimand: Estimand,
        scores: Vec<f64>,
        propensity: Vec<f64>,
        clipped: usize,
        compliance: Option<f64>,
        clusters: &[u32],
    ) -> Result<Self> {
        if let Some(i) = scores.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!("doubly robust score of row {i} is not finite")));
        }
        let (estimate, se) = clustered_mean(&scores, clusters)?;
        Ok(Self {
            estimand,
            scores,
            estimate,
            se,
            propensity,
            clipped,
            compliance,
            clusters: clusters.to_vec(),
        })
    }

    pub fn summary(&self) -> EffectEstimate {
        EffectEstimate::from_se(self.estimate, self.se)
    }
}

/// Lottery rate of each row's stratum cell, clipped; also returns the
/// number of clipped rows.
pub fn stratum_propensity(frame: &ObservationFrame) -> (Vec<f64>, usize) {
    let cells = frame.stratum_cells();
    let k = cells.iter().map(|&c| c as usize + 1).max().unwrap_or(0);
    let mut wins = vec![0.0; k];
    let mut counts = vec![0.0; k];
    for (&c, &z) in cells.iter().zip(frame.instrument()) {
        wins[c as usize] += z;
        counts[c as usize] += 1.0;
    }
    clip_propensity(cells.iter().map(|&c| wins[c as usize] / counts[c as usize]).collect())
}

fn clip_propensity(raw: Vec<f64>) -> (Vec<f64>, usize) {
    let (lo, hi) = PROPENSITY_CLIP;
    let clipped = raw.iter().filter(|&&p| !(lo..=hi).contains(&p)).count();
    (raw.into_iter().map(|p| p.clamp(lo, hi)).collect(), clipped)
}

/// Intent-to-treat AIPW scores from explicit nuisances:
/// `m1 - m0 + Z/e (Y - m1) - (1-Z)/(1-e) (Y - m0)`.
pub fn itt_scores(y: &[f64], z: &[f64], propensity: &[f64], m0: &[f64], m1: &[f64]) -> Vec<f64> {
    (0..y.len())
        .map(|i| {
            let e = propensity[i];
            m1[i] - m0[i] + z[i] / e * (y[i] - m1[i]) - (1.0 - z[i]) / (1.0 - e) * (y[i] - m0[i])
        })
        .collect()
}

/// LATE scores `tau + w (Y - y_hat - tau (D - d_hat)) / delta` with
/// `w = (Z - e) / (e (1 - e))` and `delta = mean w (D - d_hat)`.
/// Returns the scores and `delta`.
pub fn late_scores(
    y: &[f64],
    d: &[f64],
    z: &[f64],
    propensity: &[f64],
    y_hat: &[f64],
    d_hat: &[f64],
    tau: &[f64],
) -> Result<(Vec<f64>, f64)> {
    let n = y.len();
    let w: Vec<f64> = (0..n)
        .map(|i| {
            let e = propensity[i];
            (z[i] - e) / (e * (1.0 - e))
        })
        .collect();
    let delta = (0..n).map(|i| w[i] * (d[i] - d_hat[i])).sum::<f64>() / n as f64;
    if !(delta >= MIN_COMPLIANCE) {
        return Err(Error::WeakIdentification(format!(
            "mean compliance {delta:.4} is below {MIN_COMPLIANCE}"
        )));
    }
    let scores = (0..n)
        .map(|i| tau[i] + w[i] * (y[i] - y_hat[i] - tau[i] * (d[i] - d_hat[i])) / delta)
        .collect();
    Ok((scores, delta))
}

fn oob_tau(model: &IvForestModel) -> Vec<f64> {
    model.oob.iter().map(|e| e.tau_hat).collect()
}

/// Intent-to-treat scores from a forest fitted on
/// [`ObservationFrame::as_intent_to_treat`] of `frame`.
///
/// The outcome model is `m(x, z) = y_hat(x) + (z - e(x)) tau_itt(x)` with
/// the stratum lottery rate as `e`.
pub fn compute_dr_scores_itt(itt_model: &IvForestModel, frame: &ObservationFrame) -> Result<DoublyRobustScores> {
    itt_model.forest.check_frame(&frame.as_intent_to_treat())?;
    let (e, clipped) = stratum_propensity(frame);
    let tau = oob_tau(itt_model);
    let y_hat = &itt_model.y_hat;
    let m0: Vec<f64> = (0..frame.n_rows()).map(|i| y_hat[i] - e[i] * tau[i]).collect();
    let m1: Vec<f64> = (0..frame.n_rows()).map(|i| y_hat[i] + (1.0 - e[i]) * tau[i]).collect();
    let scores = itt_scores(frame.outcome(), frame.instrument(), &e, &m0, &m1);
    DoublyRobustScores::new(Estimand::Itt, scores, e, clipped, None, frame.cluster_ids())
}

/// LATE scores from an instrumental forest fitted on `frame`.
pub fn compute_dr_scores_late(model: &IvForestModel, frame: &ObservationFrame) -> Result<DoublyRobustScores> {
    model.forest.check_frame(frame)?;
    let (e, clipped) = stratum_propensity(frame);
    let tau = oob_tau(model);
    let (scores, delta) = late_scores(
        frame.outcome(),
        frame.treatment()?,
        frame.instrument(),
        &e,
        &model.y_hat,
        &model.d_hat,
        &tau,
    )?;
    DoublyRobustScores::new(Estimand::Late, scores, e, clipped, Some(delta), frame.cluster_ids())
}

/// A group average effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateResult {
    pub subgroup: String,
    pub gate: f64,
    pub se: f64,
    pub p_value: f64,
    pub n: usize,
    pub share: f64,
}

/// Mean score over the rows in `mask`, with a household-clustered se.
pub fn gate(scores: &DoublyRobustScores, mask: &[bool], name: &str) -> Result<GateResult> {
    if mask.len() != scores.scores.len() {
        return Err(Error::InvalidData("mask length differs from score count".into()));
    }
    let (values, clusters): (Vec<f64>, Vec<u32>) = scores
        .scores
        .iter()
        .zip(&scores.clusters)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((&v, &c), _)| (v, c))
        .unzip();
    if values.is_empty() {
        return Err(Error::Empty(format!("subgroup `{name}` has no rows")));
    }
    let (g, se) = clustered_mean(&values, &clusters)?;
    Ok(GateResult {
        subgroup: name.to_owned(),
        gate: g,
        se,
        p_value: EffectEstimate::from_se(g, se).p_value,
        n: values.len(),
        share: values.len() as f64 / mask.len() as f64,
    })
}

/// GATEs for each subgroup and, when `with_complements` is set, for its
/// complement as well. Subgroups are evaluated in parallel.
pub fn gates_for(
    scores: &DoublyRobustScores,
    frame: &ObservationFrame,
    specs: &[SubgroupSpec],
    with_complements: bool,
) -> Result<Vec<GateResult>> {
    let mut all: Vec<SubgroupSpec> = Vec::new();
    for s in specs {
        all.push(s.clone());
        if with_complements {
            all.push(s.negated());
        }
    }
    all.par_iter()
        .map(|s| gate(scores, &s.mask(frame)?, &s.name))
        .collect()
}

/// Empirical quantiles with linear interpolation between order statistics.
pub fn ite_quantiles(values: &[f64], probs: &[f64]) -> Result<Vec<(f64, f64)>> {
    if values.is_empty() {
        return Err(Error::Empty("no effect estimates to summarise".into()));
    }
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidParameter(format!("quantile level {p} not in [0, 1]")));
    }
    let sorted = sorted_copy(values);
    Ok(probs.iter().map(|&p| (p, quantile_sorted(&sorted, p))).collect())
}

pub const DEFAULT_QUANTILES: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// How units are split into "increased" and "decreased" groups.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SignRule {
    /// `tau > 0` against `tau <= 0`.
    #[default]
    Strict,
    /// Only estimates significant at `level`, by sign.
    Significant { level: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub variable: String,
    #[serde(with = "crate::stats::lenient_f64")]
    pub mean_increase: f64,
    #[serde(with = "crate::stats::lenient_f64")]
    pub mean_decrease: f64,
    #[serde(with = "crate::stats::lenient_f64")]
    pub difference: f64,
    #[serde(with = "crate::stats::lenient_f64")]
    pub se: f64,
    #[serde(with = "crate::stats::lenient_f64")]
    pub p_value: f64,
}

/// Covariate means of units with positive against nonpositive effects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignProfile {
    pub rule: SignRule,
    pub n_increase: usize,
    pub n_decrease: usize,
    /// Set when one side is empty; its means are NaN.
    pub empty_side: Option<String>,
    pub rows: Vec<ProfileRow>,
}

/// Compares covariate means of the two groups with household-clustered
/// two-sample tests. Stratum indicators are left out.
pub fn profile_by_effect_sign(frame: &ObservationFrame, ite: &[IteEstimate], rule: SignRule) -> Result<SignProfile> {
    if ite.len() != frame.n_rows() {
        return Err(Error::InvalidData("one estimate per row is required".into()));
    }
    let (inc, dec): (Vec<bool>, Vec<bool>) = ite
        .iter()
        .map(|e| match rule {
            SignRule::Strict => (e.tau_hat > 0.0, e.tau_hat <= 0.0),
            SignRule::Significant { level } => {
                let sig = e.p_value < level;
                (sig && e.tau_hat > 0.0, sig && e.tau_hat < 0.0)
            }
        })
        .unzip();
    let names = &frame.covariate_names()[..frame.n_raw_covariates()];
    let columns = &frame.covariates()[..frame.n_raw_covariates()];
    let vars: Vec<(&str, &[f64])> = names.iter().map(String::as_str).zip(columns.iter().map(Vec::as_slice)).collect();
    comparison_table(&vars, frame.cluster_ids(), &inc, &dec, rule)
}

fn comparison_table(
    vars: &[(&str, &[f64])],
    clusters: &[u32],
    a: &[bool],
    b: &[bool],
    rule: SignRule,
) -> Result<SignProfile> {
    let na = a.iter().filter(|&&m| m).count();
    let nb = b.iter().filter(|&&m| m).count();
    let empty_side = match (na, nb) {
        (0, _) => Some("increase".to_owned()),
        (_, 0) => Some("decrease".to_owned()),
        _ => None,
    };
    let pick = |v: &[f64], m: &[bool]| -> (Vec<f64>, Vec<u32>) {
        v.iter()
            .zip(clusters)
            .zip(m)
            .filter(|(_, &k)| k)
            .map(|((&x, &c), _)| (x, c))
            .unzip()
    };
    let rows = vars
        .par_iter()
        .map(|&(name, col)| {
            let (va, ca) = pick(col, a);
            let (vb, cb) = pick(col, b);
            if empty_side.is_some() {
                let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
                return Ok(ProfileRow {
                    variable: name.to_owned(),
                    mean_increase: mean(&va),
                    mean_decrease: mean(&vb),
                    difference: f64::NAN,
                    se: f64::NAN,
                    p_value: f64::NAN,
                });
            }
            let (ma, mb, diff, se) = clustered_mean_difference(&va, &ca, &vb, &cb)?;
            Ok(ProfileRow {
                variable: name.to_owned(),
                mean_increase: ma,
                mean_decrease: mb,
                difference: diff,
                se,
                p_value: EffectEstimate::from_se(diff, se).p_value,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SignProfile {
        rule,
        n_increase: na,
        n_decrease: nb,
        empty_side,
        rows,
    })
}

/// Two-group mean comparison on arbitrary masks; shared with the policy
/// module's allocation profile.
pub(crate) fn compare_groups(
    vars: &[(&str, &[f64])],
    clusters: &[u32],
    a: &[bool],
    b: &[bool],
) -> Result<SignProfile> {
    comparison_table(vars, clusters, a, b, SignRule::Strict)
}

/// Plot-ready histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Per-bin counts of values flagged significant.
    pub sig_counts: Vec<usize>,
    pub bin_width: f64,
    pub n_retained: usize,
    pub rule: String,
}

pub const DEFAULT_TRIM: f64 = 0.005;

/// Freedman-Diaconis histogram of `values` after dropping
/// `floor(trim * n)` values from each tail.
///
/// The width is `2 IQR m^(-1/3)` where IQR and `m` refer to the retained
/// values; edges start at the smallest retained value. A zero IQR falls
/// back to Sturges' bin count, and a constant sample gets a single bin.
pub fn histogram_bins(values: &[f64], significant: Option<&[bool]>, trim: f64) -> Result<Histogram> {
    if values.is_empty() {
        return Err(Error::Empty("no values to bin".into()));
    }
    if !(0.0..0.5).contains(&trim) {
        return Err(Error::InvalidParameter(format!("trim {trim} not in [0, 0.5)")));
    }
    if let Some(s) = significant {
        if s.len() != values.len() {
            return Err(Error::InvalidData("significance flags differ in length".into()));
        }
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidData("cannot bin non-finite values".into()));
    }
    let n = values.len();
    let k = (trim * n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let kept = &order[k..n - k];
    let sorted: Vec<f64> = kept.iter().map(|&i| values[i]).collect();
    let m = sorted.len();
    let lo = sorted[0];
    let hi = sorted[m - 1];
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);

    let (bins, width, rule) = if hi == lo {
        (1, 0.0, "single")
    } else if iqr > 0.0 {
        let h = 2.0 * iqr * (m as f64).powf(-1.0 / 3.0);
        (((hi - lo) / h).ceil().max(1.0) as usize, h, "freedman-diaconis")
    } else {
        let b = (m as f64).log2().ceil() as usize + 1;
        (b, (hi - lo) / b as f64, "sturges")
    };
    let edges: Vec<f64> = (0..=bins).map(|j| lo + j as f64 * width).collect();
    let mut counts = vec![0; bins];
    let mut sig_counts = vec![0; bins];
    for &i in kept {
        let j = if width > 0.0 {
            (((values[i] - lo) / width).floor() as usize).min(bins - 1)
        } else {
            0
        };
        counts[j] += 1;
        if significant.is_some_and(|s| s[i]) {
            sig_counts[j] += 1;
        }
    }
    Ok(Histogram {
        edges,
        counts,
        sig_counts,
        bin_width: width,
        n_retained: m,
        rule: rule.to_owned(),
    })
}
