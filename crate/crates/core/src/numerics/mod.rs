//! Dense linear algebra, seeded randomness, statistics and gradient checking.

mod gradcheck;
mod matrix;
mod rng;
mod stats;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, DEFAULT_EPS, REL_FLOOR};
pub use matrix::{dot, norm, Matrix};
pub use rng::{gaussian_sample, SeededRng};
pub use stats::{
    average_ranks, cosine_similarity, covariance_matrix, kendall_tau_b, logdet_psd, softmax,
    softmax_in_place, spearman_rank_corr, CovarianceSummary, RankCorrelation, EIGEN_FLOOR,
};
