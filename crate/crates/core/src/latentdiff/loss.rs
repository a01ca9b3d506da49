use super::model::{contextualize_backward, contextualize_traced, denoise_batch, denoise_backward};
use super::schedule::NoiseSchedule;
use super::sequence::DiffusionItem;
use super::{TwoTowerConfig, TwoTowerParams};
use crate::error::{Error, Result};
use crate::nn::Parameters;
use crate::numerics::{norm, Matrix, SeededRng};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossStats {
    /// Summed over the batch.
    pub loss: f64,
    pub items: usize,
    /// Items whose context was replaced by the null context.
    pub dropped: usize,
}

/// Per-row `‖x0 − x̂0‖` (or its square), summed; returns the gradient w.r.t. `x̂0`.
///
/// A row with zero error contributes a zero gradient.
pub fn reconstruction_loss(x0: &Matrix, x0_hat: &Matrix, squared: bool) -> (f64, Matrix) {
    assert_eq!(x0.shape(), x0_hat.shape());
    let diff = x0_hat.sub(x0);
    let mut grad = Matrix::zeros(diff.rows(), diff.cols());
    let mut loss = 0.0;
    for (i, r) in diff.iter_rows().enumerate() {
        let n = norm(r);
        let (l, scale) = if squared {
            (n * n, 2.0)
        } else if n > 0.0 {
            (n, 1.0 / n)
        } else {
            (0.0, 0.0)
        };
        loss += l;
        for (g, &v) in grad.row_mut(i).iter_mut().zip(r) {
            *g = scale * v;
        }
    }
    (loss, grad)
}

/// Noises each target at a uniformly drawn step, drops its context with
/// probability `guidance_p`, and scores the denoiser's reconstruction.
///
/// Draw order per item: timestep, noise vector, drop decision.
pub fn diffusion_loss(
    params: &TwoTowerParams,
    cfg: &TwoTowerConfig,
    batch: &[DiffusionItem],
    schedule: &NoiseSchedule,
    guidance_p: f64,
    squared: bool,
    rng: &mut SeededRng,
) -> Result<(LossStats, TwoTowerParams)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty diffusion batch".into()));
    }
    let (b, d) = (batch.len(), cfg.concept_dim);
    let mut x0 = Matrix::zeros(b, d);
    let mut xt = Matrix::zeros(b, d);
    let mut ctx = Matrix::zeros(b, cfg.ctx_width);
    let mut log_snr = Vec::with_capacity(b);
    let mut traces = Vec::with_capacity(b);
    let mut dropped = 0;
    for (i, item) in batch.iter().enumerate() {
        if item.target.len() != d {
            return Err(Error::Shape(format!(
                "target of width {} vs concept_dim {d}",
                item.target.len()
            )));
        }
        let t = rng.below(schedule.steps);
        let eps = rng.gaussian_vec(d);
        let drop = rng.bernoulli(guidance_p);
        let (a, s) = (schedule.alpha[t], schedule.sigma[t]);
        x0.row_mut(i).copy_from_slice(&item.target);
        for ((o, &x), &e) in xt.row_mut(i).iter_mut().zip(&item.target).zip(&eps) {
            *o = a * x + s * e;
        }
        log_snr.push(schedule.log_snr[t]);
        if drop {
            dropped += 1;
            ctx.row_mut(i).copy_from_slice(params.null_ctx.row(0));
            traces.push(None);
        } else {
            let (c, tr) = contextualize_traced(params, cfg, &item.prefix)?;
            ctx.row_mut(i).copy_from_slice(c.row(c.rows() - 1));
            traces.push(Some(tr));
        }
    }
    let (x0_hat, dtrace) = denoise_batch(params, cfg, &xt, &log_snr, &ctx);
    let (loss, d_out) = reconstruction_loss(&x0, &x0_hat, squared);
    let mut grads = params.zeros_like();
    let d_ctx = denoise_backward(params, cfg, &dtrace, &d_out, &mut grads);
    for (i, (item, tr)) in batch.iter().zip(&traces).enumerate() {
        match tr {
            None => {
                for (g, &v) in grads.null_ctx.row_mut(0).iter_mut().zip(d_ctx.row(i)) {
                    *g += v;
                }
            }
            Some(tr) => {
                let n = item.prefix.len();
                let mut dc = Matrix::zeros(n, cfg.ctx_width);
                dc.row_mut(n - 1).copy_from_slice(d_ctx.row(i));
                contextualize_backward(params, tr, &dc, &mut grads);
            }
        }
    }
    Ok((
        LossStats {
            loss,
            items: b,
            dropped,
        },
        grads,
    ))
}
