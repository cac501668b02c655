//! Synthetic experiments with known ground truth.
//!
//! Units come in households; households are assigned a stratum and, within
//! each stratum, exactly `round(rate * households)` of them win the
//! lottery. Each unit has a compliance type drawn independently of its
//! covariates (no defiers), so the first stage equals the complier share
//! and the LATE equals the average effect. Outcomes follow
//! `Y = mu(X) + tau(X) D + eps`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StudentT};
use serde::{Deserialize, Serialize};

use crate::dataset::{FrameParts, ObservationFrame};
use crate::error::{Error, Result};

/// Effect function `tau(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EffectFn {
    Constant { value: f64 },
    /// `height * 1[x1 > 0]`.
    Step { height: f64 },
    /// `value * 1[x1 <= x1_max and x2 > x2_min]`.
    Rule { value: f64, x1_max: f64, x2_min: f64 },
}

impl EffectFn {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match *self {
            EffectFn::Constant { value } => value,
            EffectFn::Step { height } => {
                if x[0] > 0.0 {
                    height
                } else {
                    0.0
                }
            }
            EffectFn::Rule { value, x1_max, x2_min } => {
                if x[0] <= x1_max && x[1] > x2_min {
                    value
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateDist {
    Uniform { low: f64, high: f64 },
    /// Integers drawn uniformly from `0..=max`.
    Count { max: u32 },
}

impl CovariateDist {
    fn draw(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            CovariateDist::Uniform { low, high } => rng.random_range(low..high),
            CovariateDist::Count { max } => f64::from(rng.random_range(0..=max)),
        }
    }

    /// `P(X > t)`.
    fn tail(&self, t: f64) -> f64 {
        match *self {
            CovariateDist::Uniform { low, high } => ((high - t) / (high - low)).clamp(0.0, 1.0),
            CovariateDist::Count { max } => {
                let above = (0..=max).filter(|&k| f64::from(k) > t).count();
                above as f64 / f64::from(max + 1)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Compliance {
    pub always_takers: f64,
    pub never_takers: f64,
    pub compliers: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComplianceType {
    AlwaysTaker,
    NeverTaker,
    Complier,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Noise {
    Gaussian { scale: f64 },
    /// Student t with 4 degrees of freedom, times `scale`.
    StudentT4 { scale: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClusterSizes {
    Singleton,
    /// Household sizes uniform on `1..=max`.
    UniformUpTo { max: u32 },
}

/// Full description of a synthetic experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub n: usize,
    pub p: usize,
    pub covariates: CovariateDist,
    pub effect: EffectFn,
    /// `mu(x) = intercept + slope * x2` (`x1` when `p == 1`).
    pub baseline_intercept: f64,
    pub baseline_slope: f64,
    pub compliance: Compliance,
    pub noise: Noise,
    pub clusters: ClusterSizes,
    /// Lottery rate per stratum; its length is the number of strata.
    pub instrument_rates: Vec<f64>,
    pub seed: u64,
}

impl Default for DgpSpec {
    fn default() -> Self {
        Self {
            n: 2000,
            p: 5,
            covariates: CovariateDist::Uniform { low: -1.0, high: 1.0 },
            effect: EffectFn::Step { height: 0.5 },
            baseline_intercept: 0.0,
            baseline_slope: 0.0,
            compliance: Compliance {
                always_takers: 0.1,
                never_takers: 0.5,
                compliers: 0.4,
            },
            noise: Noise::Gaussian { scale: 1.0 },
            clusters: ClusterSizes::Singleton,
            instrument_rates: vec![0.5],
            seed: 1,
        }
    }
}

/// What the estimators are trying to recover.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub tau: Vec<f64>,
    pub compliance: Vec<ComplianceType>,
    /// `E[Y | X, Z = 0]` and `E[Y | X, Z = 1]`.
    pub m0: Vec<f64>,
    pub m1: Vec<f64>,
    /// Lottery propensity of each unit's stratum.
    pub propensity: Vec<f64>,
    /// Population LATE (equal to the average effect).
    pub late: f64,
    /// Population ITT (`late * complier share`).
    pub itt: f64,
    pub first_stage: f64,
    /// Average effect over the realised compliers.
    pub sample_late: f64,
}

impl GroundTruth {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }
}

pub struct SyntheticData {
    pub frame: ObservationFrame,
    pub truth: GroundTruth,
}

impl DgpSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        let c = &self.compliance;
        let shares = [c.always_takers, c.never_takers, c.compliers];
        if shares.iter().any(|&s| !(0.0..=1.0).contains(&s)) || (shares.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("compliance shares must lie in [0, 1] and sum to 1".into());
        }
        if c.compliers < 0.2 {
            return bad(format!("complier share {} is below 0.2", c.compliers));
        }
        if self.n < 2 {
            return bad("n must be at least 2".into());
        }
        if self.p == 0 || (matches!(self.effect, EffectFn::Rule { .. }) && self.p < 2) {
            return bad("too few covariates for the effect function".into());
        }
        if self.instrument_rates.is_empty() || self.instrument_rates.iter().any(|&r| !(r > 0.0 && r < 1.0)) {
            return bad("instrument rates must lie in (0, 1)".into());
        }
        if let CovariateDist::Uniform { low, high } = self.covariates {
            if !(low < high) {
                return bad("covariate range is empty".into());
            }
        }
        let scale = match self.noise {
            Noise::Gaussian { scale } | Noise::StudentT4 { scale } => scale,
        };
        if !(scale >= 0.0) {
            return bad("noise scale must be nonnegative".into());
        }
        if let ClusterSizes::UniformUpTo { max: 0 } = self.clusters {
            return bad("household size bound must be positive".into());
        }
        Ok(())
    }

    fn baseline(&self, x: &[f64]) -> f64 {
        let k = if self.p > 1 { 1 } else { 0 };
        self.baseline_intercept + self.baseline_slope * x[k]
    }

    /// Population average of `tau(X)`.
    pub fn average_effect(&self) -> f64 {
        match self.effect {
            EffectFn::Constant { value } => value,
            EffectFn::Step { height } => height * self.covariates.tail(0.0),
            EffectFn::Rule { value, x1_max, x2_min } => {
                value * (1.0 - self.covariates.tail(x1_max)) * self.covariates.tail(x2_min)
            }
        }
    }
}

/// Draws one experiment. Identical specs give bit-identical output.
pub fn generate(spec: &DgpSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n;

    let mut household = Vec::with_capacity(n);
    let mut n_households = 0u32;
    while household.len() < n {
        let size = match spec.clusters {
            ClusterSizes::Singleton => 1,
            ClusterSizes::UniformUpTo { max } => rng.random_range(1..=max) as usize,
        };
        let take = size.min(n - household.len());
        household.extend(std::iter::repeat_n(n_households, take));
        n_households += 1;
    }

    let n_strata = spec.instrument_rates.len();
    let stratum_of: Vec<usize> = (0..n_households).map(|_| rng.random_range(0..n_strata)).collect();
    let mut won = vec![false; n_households as usize];
    let mut propensity_of = vec![0.0; n_strata];
    for (s, &rate) in spec.instrument_rates.iter().enumerate() {
        let mut members: Vec<usize> = (0..n_households as usize).filter(|&h| stratum_of[h] == s).collect();
        let k = (rate * members.len() as f64).round() as usize;
        members.shuffle(&mut rng);
        for &h in &members[..k] {
            won[h] = true;
        }
        propensity_of[s] = if members.is_empty() {
            rate
        } else {
            k as f64 / members.len() as f64
        };
    }

    let x: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..spec.p).map(|_| spec.covariates.draw(&mut rng)).collect())
        .collect();

    let c = spec.compliance;
    let compliance: Vec<ComplianceType> = (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            if u < c.always_takers {
                ComplianceType::AlwaysTaker
            } else if u < c.always_takers + c.never_takers {
                ComplianceType::NeverTaker
            } else {
                ComplianceType::Complier
            }
        })
        .collect();

    let noise: Vec<f64> = match spec.noise {
        Noise::Gaussian { scale } => {
            let dist = Normal::new(0.0, 1.0).expect("unit normal");
            (0..n).map(|_| scale * dist.sample(&mut rng)).collect()
        }
        Noise::StudentT4 { scale } => {
            let dist = StudentT::new(4.0).expect("t(4)");
            (0..n).map(|_| scale * dist.sample(&mut rng)).collect()
        }
    };

    let z: Vec<f64> = household.iter().map(|&h| f64::from(won[h as usize])).collect();
    let d: Vec<f64> = compliance
        .iter()
        .zip(&z)
        .map(|(t, &zi)| match t {
            ComplianceType::AlwaysTaker => 1.0,
            ComplianceType::NeverTaker => 0.0,
            ComplianceType::Complier => zi,
        })
        .collect();
    let tau: Vec<f64> = x.iter().map(|xi| spec.effect.eval(xi)).collect();
    let mu: Vec<f64> = x.iter().map(|xi| spec.baseline(xi)).collect();
    let y: Vec<f64> = (0..n).map(|i| mu[i] + tau[i] * d[i] + noise[i]).collect();

    let take0 = c.always_takers;
    let take1 = c.always_takers + c.compliers;
    let m0: Vec<f64> = (0..n).map(|i| mu[i] + tau[i] * take0).collect();
    let m1: Vec<f64> = (0..n).map(|i| mu[i] + tau[i] * take1).collect();
    let propensity: Vec<f64> = household
        .iter()
        .map(|&h| propensity_of[stratum_of[h as usize]])
        .collect();

    let complier_tau: Vec<f64> = (0..n)
        .filter(|&i| compliance[i] == ComplianceType::Complier)
        .map(|i| tau[i])
        .collect();
    let sample_late = complier_tau.iter().sum::<f64>() / complier_tau.len().max(1) as f64;
    let late = spec.average_effect();

    let covariates: Vec<Vec<f64>> = (0..spec.p).map(|j| x.iter().map(|xi| xi[j]).collect()).collect();
    let strata = if n_strata > 1 {
        vec![(
            "stratum".to_owned(),
            household
                .iter()
                .map(|&h| stratum_of[h as usize].to_string())
                .collect(),
        )]
    } else {
        Vec::new()
    };
    let frame = ObservationFrame::from_parts(FrameParts {
        unit_ids: (0..n).map(|i| format!("u{i}")).collect(),
        cluster_labels: household.iter().map(|h| format!("h{h}")).collect(),
        outcome_name: "y".into(),
        outcome: y,
        treatment: Some(d),
        instrument: z,
        covariate_names: (1..=spec.p).map(|j| format!("x{j}")).collect(),
        covariates,
        strata,
        weights: None,
    })?;

    Ok(SyntheticData {
        frame,
        truth: GroundTruth {
            tau,
            compliance,
            m0,
            m1,
            propensity,
            late,
            itt: late * c.compliers,
            first_stage: c.compliers,
            sample_late,
        },
    })
}

/// Largest achievable `sum of rewards over treated rows` among all trees of
/// depth at most `depth`, by enumeration.
///
/// Thresholds are midpoints of consecutive distinct values plus the two
/// infinite cuts; a row goes left when its value is `<=` the threshold.
/// The objective decomposes over the root's children, so each child's best
/// subtree is enumerated separately. The returned value is recomputed by
/// summing the treated rewards in row order.
pub fn brute_force_policy_oracle(covariates: &[Vec<f64>], rewards: &[f64], depth: usize) -> Result<f64> {
    let n = rewards.len();
    let p = covariates.len();
    if n > 500 || p > 4 || depth > 2 {
        return Err(Error::InvalidParameter(
            "brute force is limited to n <= 500, p <= 4, depth <= 2".into(),
        ));
    }
    if covariates.iter().any(|c| c.len() != n) {
        return Err(Error::InvalidData("covariates and rewards differ in length".into()));
    }
    let rows: Vec<usize> = (0..n).collect();
    let (_, treated) = best_subtree(covariates, rewards, &rows, depth);
    let mut treated = treated;
    treated.sort_unstable();
    Ok(treated.iter().map(|&i| rewards[i]).sum())
}

fn thresholds(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    let mut t = vec![f64::NEG_INFINITY];
    t.extend(v.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    t.push(f64::INFINITY);
    t
}

/// Best objective over `rows` and the rows it treats.
fn best_subtree(x: &[Vec<f64>], r: &[f64], rows: &[usize], depth: usize) -> (f64, Vec<usize>) {
    let all: f64 = rows.iter().map(|&i| r[i]).sum();
    let mut best = if all > 0.0 { (all, rows.to_vec()) } else { (0.0, Vec::new()) };
    if depth == 0 {
        return best;
    }
    for col in x {
        for t in thresholds(rows.iter().map(|&i| col[i])) {
            let (left, right): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| col[i] <= t);
            let (lv, mut lt) = best_subtree(x, r, &left, depth - 1);
            let (rv, rt) = best_subtree(x, r, &right, depth - 1);
            if lv + rv > best.0 {
                lt.extend(rt);
                best = (lv + rv, lt);
            }
        }
    }
    best
}
