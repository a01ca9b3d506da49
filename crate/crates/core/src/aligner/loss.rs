use crate::error::{Error, Result};
use crate::numerics::{dot, norm, softmax_in_place, Matrix};

use super::AlignConfig;

/// Scalar loss and its gradient w.r.t. the student embeddings `Zv`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Matrix,
}

fn check_shapes(zv: &Matrix, zt: &Matrix) -> Result<()> {
    if zv.shape() != zt.shape() {
        return Err(Error::Shape(format!(
            "student embeddings {:?} vs teacher embeddings {:?}",
            zv.shape(),
            zt.shape()
        )));
    }
    if zv.rows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    Ok(())
}

/// `(1/B)·Σ‖zv_i − zt_i‖²`, gradient `(2/B)(zv_i − zt_i)`.
pub fn mse_align_loss(zv: &Matrix, zt: &Matrix) -> Result<LossOutput> {
    check_shapes(zv, zt)?;
    let b = zv.rows() as f64;
    let diff = zv.sub(zt);
    Ok(LossOutput {
        loss: diff.sum_sq() / b,
        grad: diff.scaled(2.0 / b),
    })
}

/// InfoNCE over cosine similarities, teacher rows as the candidate set for each student row.
pub fn infonce_loss(zv: &Matrix, zt: &Matrix, tau: f64) -> Result<LossOutput> {
    check_shapes(zv, zt)?;
    let bsz = zv.rows();
    if bsz < 2 {
        return Err(Error::InvalidArgument("InfoNCE needs a batch of at least 2".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let nv: Vec<f64> = zv.iter_rows().map(norm).collect();
    let nt: Vec<f64> = zt.iter_rows().map(norm).collect();
    if let Some(i) = nv.iter().position(|&n| n == 0.0) {
        return Err(Error::ZeroNorm(format!("student embedding row {i}")));
    }
    if let Some(i) = nt.iter().position(|&n| n == 0.0) {
        return Err(Error::ZeroNorm(format!("teacher embedding row {i}")));
    }

    let b = bsz as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(bsz, zv.cols());
    for i in 0..bsz {
        let vi = zv.row(i);
        let sims: Vec<f64> = (0..bsz)
            .map(|j| dot(vi, zt.row(j)) / (nv[i] * nt[j]))
            .collect();
        let mut p: Vec<f64> = sims.iter().map(|s| s / tau).collect();
        let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + p.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        loss += lse - sims[i] / tau;
        softmax_in_place(&mut p);

        // ∂L/∂s_ij = (p_ij − δ_ij) / (B·τ); chain through the cosine.
        let g = grad.row_mut(i);
        for j in 0..bsz {
            let ds = (p[j] - if i == j { 1.0 } else { 0.0 }) / (b * tau);
            if ds == 0.0 {
                continue;
            }
            let tj = zt.row(j);
            let a = ds / (nv[i] * nt[j]);
            let c = ds * sims[j] / (nv[i] * nv[i]);
            for ((gk, &tk), &vk) in g.iter_mut().zip(tj).zip(vi) {
                *gk += a * tk - c * vk;
            }
        }
    }
    Ok(LossOutput { loss: loss / b, grad })
}

/// `mse + λ·infonce`; with `λ = 0` the contrastive term is never evaluated.
pub fn combined_loss(zv: &Matrix, zt: &Matrix, cfg: &AlignConfig) -> Result<LossOutput> {
    let mut out = mse_align_loss(zv, zt)?;
    if cfg.lambda_con != 0.0 {
        let con = infonce_loss(zv, zt, cfg.tau)?;
        out.loss += cfg.lambda_con * con.loss;
        out.grad.axpy(cfg.lambda_con, &con.grad);
    }
    Ok(out)
}
