use serde::{Deserialize, Serialize};

use super::matrix::{dot, norm};
use super::Matrix;
use crate::error::{Error, Result};

/// Eigenvalues below this are clamped before taking the log in [`logdet_psd`].
pub const EIGEN_FLOOR: f64 = 1e-12;

const SYMMETRY_TOL: f64 = 1e-9;

/// Max-shifted softmax.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine of vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 {
        return Err(Error::ZeroNorm("first cosine argument".into()));
    }
    if nb == 0.0 {
        return Err(Error::ZeroNorm("second cosine argument".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSummary {
    /// Unbiased (n − 1) sample covariance, d×d.
    pub cov: Matrix,
    pub mean: Vec<f64>,
    pub n: usize,
}

impl CovarianceSummary {
    pub fn trace(&self) -> f64 {
        (0..self.cov.rows()).map(|i| self.cov.get(i, i)).sum()
    }
}

/// Sample covariance of the rows of `x` with the `n − 1` denominator.
pub fn covariance_matrix(x: &Matrix) -> Result<CovarianceSummary> {
    let (n, d) = x.shape();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "covariance needs at least 2 rows, got {n}"
        )));
    }
    let mut mean = vec![0.0; d];
    for r in x.iter_rows() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut centered = x.clone();
    for r in 0..n {
        for (v, m) in centered.row_mut(r).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let mut cov = centered.t_matmul(&centered);
    cov.scale(1.0 / (n as f64 - 1.0));
    // Mirror the upper triangle so the result is symmetric bit-for-bit.
    for i in 0..d {
        for j in i + 1..d {
            let v = cov.get(i, j);
            cov.set(j, i, v);
        }
    }
    Ok(CovarianceSummary { cov, mean, n })
}

/// `Σ log max(λ_i, 1e-12)` over the eigenvalues of a symmetric matrix.
pub fn logdet_psd(cov: &Matrix) -> Result<f64> {
    let (r, c) = cov.shape();
    if r != c {
        return Err(Error::Shape(format!("logdet of non-square {r}x{c} matrix")));
    }
    let scale = cov.max_abs().max(1.0);
    for i in 0..r {
        for j in i + 1..r {
            if (cov.get(i, j) - cov.get(j, i)).abs() > SYMMETRY_TOL * scale {
                return Err(Error::InvalidArgument(format!(
                    "logdet_psd: matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    let m = nalgebra::DMatrix::from_row_slice(r, c, cov.as_slice());
    let eig = m.symmetric_eigenvalues();
    Ok(eig.iter().map(|&l| l.max(EIGEN_FLOOR).ln()).sum())
}

/// 1-based ranks with ties assigned their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::InvalidArgument(
            "rank correlation of a constant vector is undefined".into(),
        ));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "rank correlation of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument(
            "rank correlation needs at least 2 observations".into(),
        ));
    }
    Ok(())
}

/// Spearman's ρ: Pearson correlation of average ranks.
pub fn spearman_rank_corr(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Kendall's τ-b (tie-corrected).
pub fn kendall_tau_b(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.len();
    let (mut concordant, mut discordant, mut ties_a, mut ties_b) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let sa = (a[i] - a[j]).partial_cmp(&0.0).map_or(0, |o| o as i64);
            let sb = (b[i] - b[j]).partial_cmp(&0.0).map_or(0, |o| o as i64);
            match (sa, sb) {
                (0, 0) => {}
                (0, _) => ties_a += 1,
                (_, 0) => ties_b += 1,
                _ if sa == sb => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let n0 = (concordant + discordant) as f64;
    let denom = ((n0 + ties_a as f64) * (n0 + ties_b as f64)).sqrt();
    if denom == 0.0 || n0 + ties_a as f64 == 0.0 || n0 + ties_b as f64 == 0.0 {
        return Err(Error::InvalidArgument(
            "rank correlation of a constant vector is undefined".into(),
        ));
    }
    Ok((concordant - discordant) as f64 / denom)
}

/// Which rank correlation coefficient a consistency metric uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankCorrelation {
    #[default]
    Spearman,
    Kendall,
}

impl RankCorrelation {
    pub fn compute(self, a: &[f64], b: &[f64]) -> Result<f64> {
        match self {
            RankCorrelation::Spearman => spearman_rank_corr(a, b),
            RankCorrelation::Kendall => kendall_tau_b(a, b),
        }
    }
}
