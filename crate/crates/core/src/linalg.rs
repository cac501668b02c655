//! Dense least squares and cluster-robust sandwich covariances.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative tolerance on the diagonal of `R` below which a design is
/// treated as rank deficient.
const RANK_TOL: f64 = 1e-10;

/// QR factorisation of a tall design matrix, kept for reuse between the
/// coefficient solve and the bread of the sandwich.
pub(crate) struct QrLeastSquares {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl QrLeastSquares {
    pub(crate) fn new(x: &DMatrix<f64>) -> Result<Self> {
        let (n, k) = x.shape();
        if n < k {
            return Err(Error::RankDeficient(format!(
                "{n} observations for {k} regressors"
            )));
        }
        let qr = x.clone().qr();
        let q = qr.q();
        let r = qr.r();
        let scale = (0..k).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
        for j in 0..k {
            if r[(j, j)].abs() <= RANK_TOL * scale.max(1.0) {
                return Err(Error::RankDeficient(format!(
                    "column {j} is (nearly) collinear with earlier columns"
                )));
            }
        }
        Ok(Self { q, r })
    }

    pub(crate) fn solve(&self, y: &DVector<f64>) -> DVector<f64> {
        let qty = self.q.transpose() * y;
        self.r
            .solve_upper_triangular(&qty)
            .expect("diagonal checked at construction")
    }

    /// `(X'X)^{-1}` computed as `R^{-1} R^{-T}`.
    pub(crate) fn xtx_inverse(&self) -> DMatrix<f64> {
        let k = self.r.ncols();
        let r_inv = self
            .r
            .solve_upper_triangular(&DMatrix::identity(k, k))
            .expect("diagonal checked at construction");
        &r_inv * r_inv.transpose()
    }
}

/// Cluster-robust (CR0) covariance `B M B` with `B = (X'X)^{-1}` and
/// `M = sum_g (X_g' u_g)(X_g' u_g)'`. `clusters` holds dense ids.
pub(crate) fn cluster_sandwich(
    x: &DMatrix<f64>,
    bread: &DMatrix<f64>,
    residuals: &DVector<f64>,
    clusters: &[u32],
) -> Result<DMatrix<f64>> {
    let (n, k) = x.shape();
    debug_assert_eq!(residuals.len(), n);
    debug_assert_eq!(clusters.len(), n);
    let n_clusters = clusters.iter().map(|&c| c as usize + 1).max().unwrap_or(0);
    let mut scores = DMatrix::<f64>::zeros(n_clusters, k);
    for i in 0..n {
        let g = clusters[i] as usize;
        let u = residuals[i];
        for j in 0..k {
            scores[(g, j)] += x[(i, j)] * u;
        }
    }
    let present = {
        let mut seen = vec![false; n_clusters];
        clusters.iter().for_each(|&c| seen[c as usize] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if present < k {
        return Err(Error::InvalidData(format!(
            "{present} clusters is fewer than the {k} regressors"
        )));
    }
    let meat = scores.transpose() * &scores;
    Ok(bread * meat * bread)
}

/// Relabels arbitrary cluster ids to `0..G` in order of first appearance.
pub(crate) fn densify(ids: impl IntoIterator<Item = u32>) -> Vec<u32> {
    let mut map = std::collections::HashMap::new();
    ids.into_iter()
        .map(|id| {
            let next = map.len() as u32;
            *map.entry(id).or_insert(next)
        })
        .collect()
}

/// Difference in means between two groups of observations with a
/// cluster-robust standard error, computed as the OLS slope on a group
/// indicator. Returns `(mean_a, mean_b, diff, se)`.
pub(crate) fn clustered_mean_difference(
    values_a: &[f64],
    clusters_a: &[u32],
    values_b: &[f64],
    clusters_b: &[u32],
) -> Result<(f64, f64, f64, f64)> {
    let na = values_a.len();
    let nb = values_b.len();
    if na == 0 || nb == 0 {
        return Err(Error::Empty("both groups must be nonempty".into()));
    }
    let mean_a = values_a.iter().sum::<f64>() / na as f64;
    let mean_b = values_b.iter().sum::<f64>() / nb as f64;
    let n = na + nb;
    let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 || i < na { 1.0 } else { 0.0 });
    let resid = DVector::from_iterator(
        n,
        values_a
            .iter()
            .map(|v| v - mean_a)
            .chain(values_b.iter().map(|v| v - mean_b)),
    );
    let clusters = densify(clusters_a.iter().chain(clusters_b).copied());
    let bread = QrLeastSquares::new(&x)?.xtx_inverse();
    let cov = cluster_sandwich(&x, &bread, &resid, &clusters)?;
    Ok((mean_a, mean_b, mean_a - mean_b, cov[(1, 1)].max(0.0).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qr_matches_normal_equations() {
        let x = DMatrix::from_row_slice(5, 2, &[1., 0., 1., 1., 1., 2., 1., 3., 1., 4.]);
        let y = DVector::from_vec(vec![1., 3., 5., 7., 9.]);
        let beta = QrLeastSquares::new(&x).unwrap().solve(&y);
        assert!((beta[0] - 1.0).abs() < 1e-12);
        assert!((beta[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn collinear_design_is_rejected() {
        let x = DMatrix::from_row_slice(3, 2, &[1., 2., 2., 4., 3., 6.]);
        assert!(matches!(
            QrLeastSquares::new(&x),
            Err(Error::RankDeficient(_))
        ));
    }

    #[test]
    fn mean_difference_with_singleton_clusters() {
        let a = [1.0, 2.0, 3.0];
        let b = [0.0, 0.0, 1.0, 1.0];
        let (ma, mb, d, se) =
            clustered_mean_difference(&a, &[0, 1, 2], &b, &[3, 4, 5, 6]).unwrap();
        assert!((ma - 2.0).abs() < 1e-12 && (mb - 0.5).abs() < 1e-12);
        assert!((d - 1.5).abs() < 1e-12);
        // HC0 slope variance on a binary regressor: sum e_a^2/na^2 + sum e_b^2/nb^2
        let expected = (2.0 / 9.0 + 1.0 / 16.0f64).sqrt();
        assert!((se - expected).abs() < 1e-12);
    }
}
