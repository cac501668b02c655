//! The instrumental forest.
//!
//! Trees split on gradient pseudo-outcomes of the just-identified moment
//! `E[(Y - mu - tau D)(1, Z)'] = 0` so that children differ as much as
//! possible in their local effect. A prediction at `x` solves the same
//! moment with forest weights. Because every tree spreads its weight
//! uniformly over one leaf, the weighted means needed by the solution are
//! plain averages of per-leaf means, which are cached per tree.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::ObservationFrame;
use crate::error::{Error, Result};
use crate::forest::{
    grow_forest, grow_regression_forest, ForestInput, ForestModel, InBagIndex, SplitRule, TreeParams,
};
use crate::inference::{EffectEstimate, LittleBagsAccumulator, LittleBagsConfig};

/// Smallest `|Cov(Z, D)|` accepted as identifying.
pub const WEAK_IDENTIFICATION_TOL: f64 = 1e-10;

/// Solves the forest-weighted moment equations.
///
/// Returns `(tau, mu)` with `tau = Cov_a(Z, Y) / Cov_a(Z, D)` and
/// `mu = E_a[Y] - tau E_a[D]`. Weights are normalised internally.
pub fn solve_local_moment(alpha: &[f64], y: &[f64], d: &[f64], z: &[f64]) -> Result<(f64, f64)> {
    let n = alpha.len();
    if y.len() != n || d.len() != n || z.len() != n {
        return Err(Error::InvalidData("weights and data differ in length".into()));
    }
    if alpha.iter().any(|&a| !(a >= 0.0)) {
        return Err(Error::InvalidParameter("weights must be nonnegative".into()));
    }
    let total: f64 = alpha.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidParameter("weights sum to zero".into()));
    }
    let mut m = [0.0; 3];
    for i in 0..n {
        let a = alpha[i] / total;
        m[0] += a * y[i];
        m[1] += a * d[i];
        m[2] += a * z[i];
    }
    let (mut czy, mut czd) = (0.0, 0.0);
    for i in 0..n {
        let a = alpha[i] / total;
        let zc = z[i] - m[2];
        czy += a * zc * (y[i] - m[0]);
        czd += a * zc * (d[i] - m[1]);
    }
    if !(czd.abs() >= WEAK_IDENTIFICATION_TOL) {
        return Err(Error::WeakIdentification(format!(
            "weighted Cov(Z, D) = {czd:.3e} is below {WEAK_IDENTIFICATION_TOL:e}"
        )));
    }
    let tau = czy / czd;
    Ok((tau, m[0] - tau * m[1]))
}

/// Gradient pseudo-outcomes of the local IV moment, centred in the parent.
pub struct IvSplit<'a> {
    pub y: &'a [f64],
    pub d: &'a [f64],
    pub z: &'a [f64],
}

impl SplitRule for IvSplit<'_> {
    fn pseudo_outcomes(&self, rows: &[u32], out: &mut Vec<f64>) -> bool {
        let n = rows.len() as f64;
        let (mut my, mut md, mut mz) = (0.0, 0.0, 0.0);
        for &r in rows {
            let r = r as usize;
            my += self.y[r];
            md += self.d[r];
            mz += self.z[r];
        }
        my /= n;
        md /= n;
        mz /= n;
        let (mut czy, mut czd) = (0.0, 0.0);
        for &r in rows {
            let r = r as usize;
            let zc = self.z[r] - mz;
            czy += zc * (self.y[r] - my);
            czd += zc * (self.d[r] - md);
        }
        czy /= n;
        czd /= n;
        if czd.abs() < WEAK_IDENTIFICATION_TOL {
            return false;
        }
        let tau = czy / czd;
        out.clear();
        out.extend(rows.iter().map(|&r| {
            let r = r as usize;
            (self.z[r] - mz) * ((self.y[r] - my) - tau * (self.d[r] - md)) / czd
        }));
        true
    }
}

/// Per-leaf means of `(y, d, z, zy, zd)`.
type LeafStats = [f64; 5];

/// A fitted instrumental forest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IvForestModel {
    pub forest: ForestModel,
    /// Whether `y`, `d`, `z` were residualised on the nuisance forests.
    pub centered: bool,
    /// Out-of-bag nuisance predictions on the training rows.
    pub y_hat: Vec<f64>,
    pub d_hat: Vec<f64>,
    pub z_hat: Vec<f64>,
    /// Values the leaves average over (residuals when centred).
    y_fit: Vec<f64>,
    d_fit: Vec<f64>,
    z_fit: Vec<f64>,
    /// Uniform-weight solution, the fallback for weakly identified points.
    pub global_tau: f64,
    global_stats: LeafStats,
    /// Out-of-bag estimate for every training row.
    pub oob: Vec<IteEstimate>,
    #[serde(skip)]
    leaf_stats: Vec<Vec<LeafStats>>,
}

/// An effect estimate at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IteEstimate {
    pub tau_hat: f64,
    #[serde(with = "crate::stats::lenient_f64")]
    pub variance: f64,
    #[serde(with = "crate::stats::lenient_f64")]
    pub se: f64,
    pub p_value: f64,
    #[serde(with = "crate::stats::lenient_f64")]
    pub ci_low: f64,
    #[serde(with = "crate::stats::lenient_f64")]
    pub ci_high: f64,
    pub sig10: bool,
    pub sig05: bool,
    /// The local first stage was too weak; the estimate is the global one.
    pub fallback: bool,
    /// The debiased variance was floored.
    pub variance_floored: bool,
}

impl IteEstimate {
    fn new(tau_hat: f64, variance: f64, fallback: bool, variance_floored: bool) -> Self {
        let e = EffectEstimate::from_variance(tau_hat, variance);
        Self {
            tau_hat,
            variance: e.variance,
            se: e.se,
            p_value: e.p_value,
            ci_low: e.ci_low,
            ci_high: e.ci_high,
            sig10: e.p_value < 0.10,
            sig05: e.p_value < 0.05,
            fallback,
            variance_floored,
        }
    }
}

const MODEL_FORMAT: &str = "ivcf-iv-forest";
const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope<M> {
    format: String,
    version: u32,
    model: M,
}

/// Fits an instrumental forest of the frame's outcome on its treatment,
/// instrumented by its instrument.
///
/// Nuisance regressions of `y`, `d` and `z` are always grown (their
/// out-of-bag predictions feed the doubly robust scores); `center`
/// controls whether the forest is grown on their residuals.
pub fn fit_iv_forest(frame: &ObservationFrame, params: &TreeParams, center: bool) -> Result<IvForestModel> {
    LittleBagsConfig {
        bag_size: params.bag_size,
    }
    .validate()?;
    let y = frame.outcome();
    let d = frame.treatment()?;
    let z = frame.instrument();
    if z.iter().all(|&v| v == z[0]) {
        return Err(Error::InvalidData("the instrument is constant".into()));
    }
    let all: Vec<u32> = (0..frame.n_rows() as u32).collect();
    let mut probe = Vec::new();
    if !(IvSplit { y, d, z }).pseudo_outcomes(&all, &mut probe) {
        return Err(Error::WeakIdentification(
            "the instrument does not move the treatment in the full sample".into(),
        ));
    }

    let input = ForestInput::from_frame(frame);
    let nuisance = params.nuisance();
    let y_hat = grow_regression_forest(&input, y, &nuisance)?.oob_predictions;
    let d_hat = grow_regression_forest(&input, d, &nuisance)?.oob_predictions;
    let z_hat = grow_regression_forest(&input, z, &nuisance)?.oob_predictions;

    let resid = |v: &[f64], hat: &[f64]| -> Vec<f64> {
        if center {
            v.iter().zip(hat).map(|(a, b)| a - b).collect()
        } else {
            v.to_vec()
        }
    };
    let (y_fit, d_fit, z_fit) = (resid(y, &y_hat), resid(d, &d_hat), resid(z, &z_hat));
    if center
        && !(IvSplit {
            y: &y_fit,
            d: &d_fit,
            z: &z_fit,
        })
        .pseudo_outcomes(&all, &mut probe)
    {
        return Err(Error::WeakIdentification(
            "no first stage remains after centering on the covariates".into(),
        ));
    }

    let forest = grow_forest(
        &input,
        &IvSplit {
            y: &y_fit,
            d: &d_fit,
            z: &z_fit,
        },
        params,
    )?
    .with_metadata(frame);

    let global_stats = stats_of(&all, &y_fit, &d_fit, &z_fit);
    let mut model = IvForestModel {
        forest,
        centered: center,
        y_hat,
        d_hat,
        z_hat,
        y_fit,
        d_fit,
        z_fit,
        global_tau: 0.0,
        global_stats,
        oob: Vec::new(),
        leaf_stats: Vec::new(),
    };
    model.global_tau = solve_from_means(&global_stats).ok_or_else(|| {
        Error::WeakIdentification("the full-sample first stage is degenerate".into())
    })?;
    model.rebuild_cache();
    model.oob = model.compute_oob(frame.covariates())?;
    Ok(model)
}

fn stats_of(rows: &[u32], y: &[f64], d: &[f64], z: &[f64]) -> LeafStats {
    let mut s = [0.0; 5];
    for &r in rows {
        let r = r as usize;
        s[0] += y[r];
        s[1] += d[r];
        s[2] += z[r];
        s[3] += z[r] * y[r];
        s[4] += z[r] * d[r];
    }
    let n = rows.len().max(1) as f64;
    s.map(|v| v / n)
}

fn covariances(m: &LeafStats) -> (f64, f64) {
    (m[3] - m[2] * m[0], m[4] - m[2] * m[1])
}

fn solve_from_means(m: &LeafStats) -> Option<f64> {
    let (czy, czd) = covariances(m);
    (czd.abs() >= WEAK_IDENTIFICATION_TOL).then(|| czy / czd)
}

impl IvForestModel {
    fn rebuild_cache(&mut self) {
        let (y, d, z) = (&self.y_fit, &self.d_fit, &self.z_fit);
        self.leaf_stats = self
            .forest
            .trees
            .par_iter()
            .map(|tree| {
                (0..tree.nodes.len())
                    .map(|id| stats_of(tree.leaf_samples(id), y, d, z))
                    .collect()
            })
            .collect();
    }

    pub fn n_features(&self) -> usize {
        self.forest.n_features
    }

    /// Estimates at `n_rows` query points, where `value(i, j)` is feature
    /// `j` of point `i`. With `in_bag`, each training row uses only the
    /// trees that did not sample it (all trees if there are none).
    ///
    /// Blocks of points go through one tree at a time, twice: the first
    /// pass averages leaf statistics into the local solution, the second
    /// scores each tree against it. Trees of a bag are consecutive, so the
    /// little-bags moments stream per point.
    fn estimate_many(
        &self,
        n_rows: usize,
        value: impl Fn(usize, usize) -> f64 + Sync,
        in_bag: Option<&InBagIndex>,
    ) -> Result<Vec<IteEstimate>> {
        const BLOCK: usize = 2048;
        const SKIP: u32 = u32::MAX;
        let trees = &self.forest.trees;
        let bag_size = self.forest.params.bag_size;
        let blocks: Vec<Vec<Result<IteEstimate>>> = (0..n_rows.div_ceil(BLOCK))
            .into_par_iter()
            .map(|b| {
                let rows = b * BLOCK..((b + 1) * BLOCK).min(n_rows);
                let width = rows.len();
                let mut leaf_ids = vec![SKIP; trees.len() * width];
                let mut sums = vec![[0.0; 5]; width];
                let mut counts = vec![0usize; width];
                let mut visit = |t: usize, k: usize, row: usize, counts: &mut [usize]| {
                    let node = trees[t].leaf_by(|j| value(row, j));
                    leaf_ids[t * width + k] = node as u32;
                    let s = &self.leaf_stats[t][node];
                    for (acc, v) in sums[k].iter_mut().zip(s) {
                        *acc += v;
                    }
                    counts[k] += 1;
                };
                for t in 0..trees.len() {
                    for (k, row) in rows.clone().enumerate() {
                        if !in_bag.is_some_and(|ib| ib.contains(t, row)) {
                            visit(t, k, row, &mut counts);
                        }
                    }
                }
                for (k, row) in rows.clone().enumerate() {
                    if counts[k] == 0 {
                        (0..trees.len()).for_each(|t| visit(t, k, row, &mut counts));
                    }
                }

                let solved: Vec<Option<(f64, LeafStats)>> = sums
                    .iter()
                    .zip(&counts)
                    .map(|(sum, &c)| {
                        let m = sum.map(|v| v / c as f64);
                        solve_from_means(&m).map(|tau| (tau, m))
                    })
                    .collect();
                let mut moments = vec![LittleBagsAccumulator::default(); width];
                for (t, tree) in trees.iter().enumerate() {
                    let ids = &leaf_ids[t * width..(t + 1) * width];
                    for ((&id, sol), acc) in ids.iter().zip(&solved).zip(moments.iter_mut()) {
                        if let (true, Some((tau, m))) = (id != SKIP, sol) {
                            let s = &self.leaf_stats[t][id as usize];
                            let a = s[3] - m[2] * s[0] - m[0] * s[2] + m[2] * m[0];
                            let c = s[4] - m[2] * s[1] - m[1] * s[2] + m[2] * m[1];
                            acc.push(tree.bag, a - tau * c, bag_size);
                        }
                    }
                }
                solved
                    .iter()
                    .zip(moments)
                    .map(|(sol, acc)| match sol {
                        Some((tau, m)) => {
                            let (_, czd) = covariances(m);
                            let v = acc.finish(bag_size, 1.0 / (czd * czd))?;
                            Ok(IteEstimate::new(*tau, v.variance, false, v.floored))
                        }
                        // weakly identified: global solution, no variance
                        None => {
                            let v = acc.finish(bag_size, 1.0)?;
                            Ok(IteEstimate::new(self.global_tau, v.variance, true, v.floored))
                        }
                    })
                    .collect()
            })
            .collect();
        blocks.into_iter().flatten().collect()
    }

    fn compute_oob(&self, covariates: &[Vec<f64>]) -> Result<Vec<IteEstimate>> {
        let in_bag = InBagIndex::new(&self.forest);
        self.estimate_many(self.forest.n_train, |row, j| covariates[j][row], Some(&in_bag))
    }

    /// Estimates at new covariate vectors using every tree.
    pub fn predict_points(&self, points: &[Vec<f64>]) -> Result<Vec<IteEstimate>> {
        for x in points {
            self.forest.check_point(x, self.n_features())?;
        }
        self.estimate_many(points.len(), |i, j| points[i][j], None)
    }

    /// Writes the model; a `.json` extension selects JSON, anything else
    /// a compact binary encoding.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let envelope = Envelope {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            model: self,
        };
        let writer = BufWriter::new(file);
        if is_json(path) {
            serde_json::to_writer(writer, &envelope)?;
        } else {
            bincode::serialize_into(writer, &envelope).map_err(|e| Error::Encoding(e.to_string()))?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let reader = BufReader::new(file);
        let envelope: Envelope<IvForestModel> = if is_json(path) {
            serde_json::from_reader(reader)?
        } else {
            bincode::deserialize_from(reader).map_err(|e| Error::Encoding(e.to_string()))?
        };
        if envelope.format != MODEL_FORMAT || envelope.version != MODEL_VERSION {
            return Err(Error::ModelMismatch(format!(
                "expected {MODEL_FORMAT} v{MODEL_VERSION}, found {} v{}",
                envelope.format, envelope.version
            )));
        }
        let mut model = envelope.model;
        model.forest.rebuild_index();
        model.rebuild_cache();
        Ok(model)
    }
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

/// One estimate per row of `frame`.
///
/// On the training frame (same fingerprint) each row gets its out-of-bag
/// estimate; any other frame is treated as new test points, matched to the
/// model's covariates by name.
pub fn predict_ite(model: &IvForestModel, frame: &ObservationFrame) -> Result<Vec<IteEstimate>> {
    if frame.n_rows() == model.forest.n_train && frame.fingerprint() == model.forest.fingerprint {
        return Ok(model.oob.clone());
    }
    let names = &model.forest.covariate_names;
    if frame.covariate_names() != names.as_slice() {
        return Err(Error::ModelMismatch(
            "frame covariates differ from the model's training covariates".into(),
        ));
    }
    let points: Vec<Vec<f64>> = (0..frame.n_rows()).map(|i| frame.row(i)).collect();
    model.predict_points(&points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, Compliance, DgpSpec, EffectFn};
    use proptest::prelude::*;

    #[test]
    fn six_row_fixture() {
        let z = [1., 1., 1., 0., 0., 0.];
        let d = [1., 1., 0., 0., 0., 0.];
        let y = [3., 3., 1., 1., 1., 1.];
        let (tau, mu) = solve_local_moment(&[1.0; 6], &y, &d, &z).unwrap();
        assert!((tau - 2.0).abs() < 1e-12);
        // E[Y] - 2 E[D] = 10/6 - 4/6
        assert!((mu - 1.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_compliance_is_a_difference_in_means() {
        let z = [1., 0., 1., 0., 1.];
        let y = [2.0, 0.5, 1.0, -1.0, 4.0];
        let a = [0.1, 0.3, 0.2, 0.25, 0.15];
        let (tau, _) = solve_local_moment(&a, &y, &z, &z).unwrap();
        let m1 = (0.1 * 2.0 + 0.2 * 1.0 + 0.15 * 4.0) / 0.45;
        let m0 = (0.3 * 0.5 - 0.25 * 1.0) / 0.55;
        assert!((tau - (m1 - m0)).abs() < 1e-12);
    }

    #[test]
    fn degenerate_weights_fail() {
        let z = [1., 0., 1.];
        let err = solve_local_moment(&[0.0, 1.0, 0.0], &[1., 2., 3.], &z, &z).unwrap_err();
        assert!(matches!(err, Error::WeakIdentification(_)));
        assert!(solve_local_moment(&[0.0; 3], &[1., 2., 3.], &z, &z).is_err());
    }

    proptest! {
        #[test]
        fn location_and_scale(
            y in prop::collection::vec(-5.0f64..5.0, 8),
            a in prop::collection::vec(0.05f64..1.0, 8),
            c in -10.0f64..10.0,
            k in 0.1f64..10.0,
        ) {
            let z = [1., 1., 1., 1., 0., 0., 0., 0.];
            let d = [1., 1., 1., 0., 0., 0., 0., 1.];
            let (tau, mu) = solve_local_moment(&a, &y, &d, &z).unwrap();
            let shifted: Vec<f64> = y.iter().map(|v| v + c).collect();
            let (tau_s, mu_s) = solve_local_moment(&a, &shifted, &d, &z).unwrap();
            prop_assert!((tau_s - tau).abs() <= 1e-12 * (1.0 + tau.abs()) * 10.0);
            prop_assert!((mu_s - mu - c).abs() <= 1e-10);
            let scaled: Vec<f64> = y.iter().map(|v| v * k).collect();
            let (tau_k, _) = solve_local_moment(&a, &scaled, &d, &z).unwrap();
            prop_assert!((tau_k - k * tau).abs() <= 1e-10 * (1.0 + (k * tau).abs()));
        }
    }

    fn step_data(n: usize, seed: u64) -> crate::synth::SyntheticData {
        generate(&DgpSpec {
            n,
            p: 2,
            compliance: Compliance {
                always_takers: 0.0,
                never_takers: 0.0,
                compliers: 1.0,
            },
            noise: crate::synth::Noise::Gaussian { scale: 0.5 },
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    fn small_params() -> TreeParams {
        TreeParams {
            n_trees: 200,
            ..Default::default()
        }
    }

    #[test]
    fn recovers_a_step_effect() {
        let data = step_data(3000, 11);
        let model = fit_iv_forest(&data.frame, &small_params(), true).unwrap();
        assert_eq!(model.oob.len(), 3000);
        let x1 = data.frame.covariate("x1").unwrap();
        let region = |pos: bool| {
            let v: Vec<f64> = model
                .oob
                .iter()
                .zip(x1)
                .filter(|(_, &x)| (x > 0.0) == pos)
                .map(|(e, _)| e.tau_hat)
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(region(false).abs() < 0.1, "{}", region(false));
        assert!((region(true) - 0.5).abs() < 0.1, "{}", region(true));
        for e in &model.oob {
            assert!(e.ci_low <= e.tau_hat && e.tau_hat <= e.ci_high);
            assert!((e.se * e.se - e.variance).abs() <= 1e-12 * e.variance.max(1.0));
            assert!(e.variance >= crate::inference::VARIANCE_FLOOR);
        }
        let far = model.predict_points(&[vec![0.8, 0.0], vec![-0.8, 0.0]]).unwrap();
        assert!((far[0].tau_hat - 0.5).abs() < 0.15);
        assert!(far[1].tau_hat.abs() < 0.15);
    }

    #[test]
    fn model_round_trips_through_both_encodings() {
        let data = step_data(400, 3);
        let params = TreeParams {
            n_trees: 20,
            ..Default::default()
        };
        let model = fit_iv_forest(&data.frame, &params, false).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let points = vec![vec![0.3, -0.2], vec![-0.6, 0.9]];
        let expected = model.predict_points(&points).unwrap();
        for name in ["m.bin", "m.json"] {
            let path = dir.path().join(name);
            model.save(&path).unwrap();
            let back = IvForestModel::load(&path).unwrap();
            assert_eq!(back.predict_points(&points).unwrap(), expected);
            assert_eq!(predict_ite(&back, &data.frame).unwrap(), model.oob);
        }
        std::fs::write(dir.path().join("bad.json"), br#"{"format":"other","version":1,"model":null}"#).unwrap();
        assert!(IvForestModel::load(dir.path().join("bad.json")).is_err());
    }

    #[test]
    fn unidentified_inputs_fail() {
        let data = step_data(200, 5);
        let f = &data.frame;
        let ones = f.with_outcome("y", f.outcome().to_vec()).unwrap();
        let constant_z = crate::dataset::FrameParts {
            unit_ids: f.unit_ids().to_vec(),
            cluster_labels: f.unit_ids().to_vec(),
            outcome_name: "y".into(),
            outcome: f.outcome().to_vec(),
            treatment: Some(f.treatment().unwrap().to_vec()),
            instrument: vec![1.0; 200],
            covariate_names: vec!["x1".into()],
            covariates: vec![f.covariate("x1").unwrap().to_vec()],
            strata: vec![],
            weights: None,
        };
        let frame = ObservationFrame::from_parts(constant_z.clone()).unwrap();
        assert!(fit_iv_forest(&frame, &small_params(), true).is_err());
        let mut no_first_stage = constant_z;
        no_first_stage.instrument = f.instrument().to_vec();
        no_first_stage.treatment = Some(vec![0.0; 200]);
        let frame = ObservationFrame::from_parts(no_first_stage).unwrap();
        let err = fit_iv_forest(&frame, &small_params(), true).unwrap_err();
        assert!(matches!(err, Error::WeakIdentification(_)));
        let no_bags = TreeParams {
            bag_size: 1,
            ..small_params()
        };
        assert!(fit_iv_forest(&ones, &no_bags, true).is_err());
    }

    #[test]
    fn null_effect_averages_near_zero() {
        let data = generate(&DgpSpec {
            n: 2000,
            p: 3,
            effect: EffectFn::Constant { value: 0.0 },
            seed: 8,
            ..Default::default()
        })
        .unwrap();
        let model = fit_iv_forest(&data.frame, &small_params(), true).unwrap();
        let taus: Vec<f64> = model.oob.iter().map(|e| e.tau_hat).collect();
        let mean = taus.iter().sum::<f64>() / taus.len() as f64;
        // compliance 0.4 and unit noise: the full-sample IV se is about 0.11
        assert!(mean.abs() < 0.25, "{mean}");
    }
}
