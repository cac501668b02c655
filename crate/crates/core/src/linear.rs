//! Linear two-stage least squares with stratum controls.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::ObservationFrame;
use crate::error::{Error, Result};
use crate::inference::{cluster_robust_se, EffectEstimate};
use crate::linalg::QrLeastSquares;

/// Exogenous regressors besides the intercept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Controls {
    /// Indicators for every stratum level except each stratum's first.
    #[default]
    Strata,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoSlsFit {
    pub outcome: String,
    /// Coefficient on the treatment.
    pub coefficient: f64,
    pub se: f64,
    pub p_value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
    pub n_clusters: usize,
    /// Squared t-statistic of the instrument in the first stage.
    pub first_stage_f: f64,
    pub first_stage_coefficient: f64,
    /// `(name, coefficient, se)` for the intercept and each control.
    pub controls: Vec<(String, f64, f64)>,
    /// Second-stage regressors (treatment replaced by its first-stage
    /// fit), weighted.
    #[serde(skip)]
    pub regressors: DMatrix<f64>,
    /// Structural residuals `Y - X b` with the actual treatment, weighted.
    #[serde(skip)]
    pub residuals: Vec<f64>,
    #[serde(skip)]
    pub clusters: Vec<u32>,
}

/// Intercept plus control columns, with their names.
fn exogenous(frame: &ObservationFrame, controls: Controls) -> (Vec<String>, Vec<Vec<f64>>) {
    let n = frame.n_rows();
    let mut names = vec!["(intercept)".to_owned()];
    let mut cols = vec![vec![1.0; n]];
    if controls == Controls::Strata {
        for s in frame.strata() {
            for (k, level) in s.levels.iter().enumerate().skip(1) {
                names.push(format!("{}={level}", s.name));
                cols.push(s.codes.iter().map(|&c| f64::from(c == k as u32)).collect());
            }
        }
    }
    (names, cols)
}

fn design(first: &[f64], rest: &[Vec<f64>], sqrt_w: &[f64]) -> DMatrix<f64> {
    let n = first.len();
    DMatrix::from_fn(n, rest.len() + 1, |i, j| {
        sqrt_w[i] * if j == 0 { first[i] } else { rest[j - 1][i] }
    })
}

/// 2SLS of the frame's outcome on its treatment, instrumented by its
/// instrument, with household-clustered standard errors. Frame weights
/// are applied to both stages.
pub fn fit_2sls(frame: &ObservationFrame, controls: Controls) -> Result<TwoSlsFit> {
    let n = frame.n_rows();
    let y = frame.outcome();
    let d = frame.treatment()?;
    let z = frame.instrument();
    let sqrt_w: Vec<f64> = frame.weights().iter().map(|w| w.sqrt()).collect();
    let (names, exog) = exogenous(frame, controls);
    let k = exog.len() + 1;
    if n <= k {
        return Err(Error::InvalidData(format!("{n} rows cannot identify {k} coefficients")));
    }

    let xz = design(z, &exog, &sqrt_w);
    let dw = DVector::from_iterator(n, d.iter().zip(&sqrt_w).map(|(a, s)| a * s));
    let first = QrLeastSquares::new(&xz)?;
    let pi = first.solve(&dw);
    let fitted = &xz * &pi;
    let ssr: f64 = (&dw - &fitted).iter().map(|e| e * e).sum();
    let sigma2 = ssr / (n - k) as f64;
    let f_stat = if sigma2 > 0.0 {
        pi[0] * pi[0] / (sigma2 * first.xtx_inverse()[(0, 0)])
    } else if pi[0] != 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    if !(f_stat >= 1.0) {
        return Err(Error::WeakIdentification(format!("first-stage F = {f_stat:.3} is below 1")));
    }

    // fitted values are already weighted; divide out to rebuild the design
    let d_hat: Vec<f64> = fitted
        .iter()
        .zip(&sqrt_w)
        .map(|(f, s)| if *s > 0.0 { f / s } else { 0.0 })
        .collect();
    let x_hat = design(&d_hat, &exog, &sqrt_w);
    let yw = DVector::from_iterator(n, y.iter().zip(&sqrt_w).map(|(a, s)| a * s));
    let beta = QrLeastSquares::new(&x_hat)?.solve(&yw);
    let x_actual = design(d, &exog, &sqrt_w);
    let residuals: Vec<f64> = (&yw - &x_actual * &beta).iter().copied().collect();
    let se = cluster_robust_se(&x_hat, &residuals, frame.cluster_ids())?;

    let e = EffectEstimate::from_se(beta[0], se[0]);
    Ok(TwoSlsFit {
        outcome: frame.outcome_name().to_owned(),
        coefficient: beta[0],
        se: se[0],
        p_value: e.p_value,
        ci_low: e.ci_low,
        ci_high: e.ci_high,
        n,
        n_clusters: frame.n_clusters(),
        first_stage_f: f_stat,
        first_stage_coefficient: pi[0],
        controls: names
            .into_iter()
            .enumerate()
            .map(|(j, name)| (name, beta[j + 1], se[j + 1]))
            .collect(),
        regressors: x_hat,
        residuals,
        clusters: frame.cluster_ids().to_vec(),
    })
}

/// 2SLS on the rows selected by `mask`.
pub fn fit_2sls_subgroup(frame: &ObservationFrame, mask: &[bool], controls: Controls) -> Result<TwoSlsFit> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::Empty("subgroup mask selects no rows".into()));
    }
    fit_2sls(&frame.subset(mask)?, controls)
}
