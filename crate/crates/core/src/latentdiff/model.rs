use serde::{Deserialize, Serialize};

use super::sequence::{EmbeddingSequence, Modality};
use crate::error::{ensure, Error, Result};
use crate::nn::{
    silu, silu_grad, sinusoidal_encoding, AttentionCache, Linear, LinearGrads, MultiHeadAttention, Parameters,
};
use crate::numerics::{gaussian_sample, Matrix, SeededRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct TwoTowerConfig {
    pub concept_dim: usize,
    pub ctx_layers: usize,
    pub ctx_width: usize,
    pub ctx_heads: usize,
    /// Hidden width of the contextualizer feed-forward block, as a multiple of `ctx_width`.
    pub ff_mult: usize,
    pub den_depth: usize,
    pub den_width: usize,
    /// Width of the sinusoidal log-SNR embedding.
    pub time_dim: usize,
    pub modality_tags: bool,
}

impl Default for TwoTowerConfig {
    fn default() -> Self {
        Self {
            concept_dim: 1024,
            ctx_layers: 2,
            ctx_width: 256,
            ctx_heads: 4,
            ff_mult: 2,
            den_depth: 3,
            den_width: 512,
            time_dim: 32,
            modality_tags: false,
        }
    }
}

impl TwoTowerConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.concept_dim > 0, || "concept_dim must be positive".into())?;
        ensure(self.ctx_width > 0 && self.ctx_width % 2 == 0, || {
            format!("ctx_width must be positive and even, got {}", self.ctx_width)
        })?;
        ensure(self.ctx_heads > 0 && self.ctx_width % self.ctx_heads == 0, || {
            format!("ctx_width {} is not divisible by {} heads", self.ctx_width, self.ctx_heads)
        })?;
        ensure(self.ff_mult > 0 && self.den_width > 0, || "widths must be positive".into())?;
        ensure(self.time_dim > 0 && self.time_dim % 2 == 0, || {
            format!("time_dim must be positive and even, got {}", self.time_dim)
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextLayer {
    pub attn: MultiHeadAttention,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwoTowerParams {
    pub ctx_in: Linear,
    /// Modality×width tag embeddings, present when the config enables tags.
    pub tags: Option<Matrix>,
    pub layers: Vec<ContextLayer>,
    pub den_in: Linear,
    pub den_blocks: Vec<Linear>,
    pub den_out: Linear,
    /// Stand-in context for the unconditional branch.
    pub null_ctx: Matrix,
}

impl Parameters for TwoTowerParams {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = self.ctx_in.tensors("ctx.in");
        if let Some(t) = &self.tags {
            out.push(("ctx.tags".into(), t));
        }
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(l.attn.tensors(&format!("ctx.layers.{i}.attn")));
            out.extend(l.ff_in.tensors(&format!("ctx.layers.{i}.ff_in")));
            out.extend(l.ff_out.tensors(&format!("ctx.layers.{i}.ff_out")));
        }
        out.extend(self.den_in.tensors("den.in"));
        for (i, b) in self.den_blocks.iter().enumerate() {
            out.extend(b.tensors(&format!("den.blocks.{i}")));
        }
        out.extend(self.den_out.tensors("den.out"));
        out.push(("den.null_ctx".into(), &self.null_ctx));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = self.ctx_in.tensors_mut("ctx.in");
        if let Some(t) = &mut self.tags {
            out.push(("ctx.tags".into(), t));
        }
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.extend(l.attn.tensors_mut(&format!("ctx.layers.{i}.attn")));
            out.extend(l.ff_in.tensors_mut(&format!("ctx.layers.{i}.ff_in")));
            out.extend(l.ff_out.tensors_mut(&format!("ctx.layers.{i}.ff_out")));
        }
        out.extend(self.den_in.tensors_mut("den.in"));
        for (i, b) in self.den_blocks.iter_mut().enumerate() {
            out.extend(b.tensors_mut(&format!("den.blocks.{i}")));
        }
        out.extend(self.den_out.tensors_mut("den.out"));
        out.push(("den.null_ctx".into(), &mut self.null_ctx));
        out
    }
}

impl TwoTowerParams {
    pub fn zeros(cfg: &TwoTowerConfig) -> Self {
        let (d, h, w) = (cfg.concept_dim, cfg.ctx_width, cfg.den_width);
        let f = h * cfg.ff_mult;
        Self {
            ctx_in: Linear::zeros(d, h),
            tags: cfg.modality_tags.then(|| Matrix::zeros(Modality::COUNT, h)),
            layers: (0..cfg.ctx_layers)
                .map(|_| ContextLayer {
                    attn: MultiHeadAttention::zeros(h),
                    ff_in: Linear::zeros(h, f),
                    ff_out: Linear::zeros(f, h),
                })
                .collect(),
            den_in: Linear::zeros(d + cfg.time_dim + h, w),
            den_blocks: (0..cfg.den_depth).map(|_| Linear::zeros(w, w)).collect(),
            den_out: Linear::zeros(w, d),
            null_ctx: Matrix::zeros(1, h),
        }
    }

    /// Context-tower tensor names start with `ctx.`.
    pub fn is_context_tensor(name: &str) -> bool {
        name.starts_with("ctx.")
    }
}

/// Gaussian weights scaled by fan-in, zero biases; residual branches start smaller.
pub fn init_two_tower(cfg: &TwoTowerConfig, rng: &mut SeededRng) -> Result<TwoTowerParams> {
    cfg.validate()?;
    let (d, h, w) = (cfg.concept_dim, cfg.ctx_width, cfg.den_width);
    let f = h * cfg.ff_mult;
    let res_gain = 1.0 / ((2 * cfg.ctx_layers.max(1)) as f64).sqrt();
    let den_gain = 1.0 / (cfg.den_depth.max(1) as f64).sqrt();
    Ok(TwoTowerParams {
        ctx_in: Linear::scaled_gaussian(d, h, 1.0, rng),
        tags: cfg
            .modality_tags
            .then(|| gaussian_sample(rng, Modality::COUNT, h, 0.0, 0.1)),
        layers: (0..cfg.ctx_layers)
            .map(|_| {
                let mut attn = MultiHeadAttention::gaussian(h, 1.0 / (h as f64).sqrt(), rng);
                attn.wo.scale(res_gain);
                ContextLayer {
                    attn,
                    ff_in: Linear::scaled_gaussian(h, f, 1.0, rng),
                    ff_out: Linear::scaled_gaussian(f, h, res_gain, rng),
                }
            })
            .collect(),
        den_in: Linear::scaled_gaussian(d + cfg.time_dim + h, w, 1.0, rng),
        den_blocks: (0..cfg.den_depth)
            .map(|_| Linear::scaled_gaussian(w, w, den_gain, rng))
            .collect(),
        den_out: Linear::scaled_gaussian(w, d, 1.0, rng),
        null_ctx: Matrix::zeros(1, h),
    })
}

/// Sinusoidal features of the log-SNR: `sin(λ·f_i)`, `cos(λ·f_i)` with `f_i` log-spaced in `[0.05, 5]`.
pub fn lambda_embedding(lambda: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let frac = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
        let f = 0.05 * 100f64.powf(frac);
        out[2 * i] = (lambda * f).sin();
        out[2 * i + 1] = (lambda * f).cos();
    }
    out
}

struct LayerTrace {
    h_in: Matrix,
    cache: AttentionCache,
    h_mid: Matrix,
    pre: Matrix,
    act: Matrix,
}

/// Intermediate values of one contextualizer pass.
pub struct ContextTrace {
    x: Matrix,
    tags: Vec<usize>,
    layers: Vec<LayerTrace>,
}

fn check_sequence(cfg: &TwoTowerConfig, seq: &EmbeddingSequence) -> Result<()> {
    if seq.is_empty() {
        return Err(Error::InvalidArgument("empty prefix".into()));
    }
    if seq.dim() != cfg.concept_dim {
        return Err(Error::Shape(format!(
            "sequence width {} vs model concept_dim {}",
            seq.dim(),
            cfg.concept_dim
        )));
    }
    Ok(())
}

/// Causal context vectors, one row per prefix position (n×width).
pub fn contextualize(params: &TwoTowerParams, cfg: &TwoTowerConfig, prefix: &EmbeddingSequence) -> Result<Matrix> {
    contextualize_traced(params, cfg, prefix).map(|(c, _)| c)
}

pub(crate) fn contextualize_traced(
    params: &TwoTowerParams,
    cfg: &TwoTowerConfig,
    prefix: &EmbeddingSequence,
) -> Result<(Matrix, ContextTrace)> {
    check_sequence(cfg, prefix)?;
    let n = prefix.len();
    let mut h = params.ctx_in.forward(&prefix.embeddings);
    h.add_assign(&sinusoidal_encoding(n, cfg.ctx_width));
    let tags: Vec<usize> = prefix.modalities.iter().map(|m| m.index()).collect();
    if let Some(tag_emb) = &params.tags {
        for (i, &t) in tags.iter().enumerate() {
            for (a, b) in h.row_mut(i).iter_mut().zip(tag_emb.row(t)) {
                *a += b;
            }
        }
    }
    let mut layers = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (a, cache) = layer.attn.forward(&h, &h, cfg.ctx_heads, true, None);
        let h_mid = h.add(&a);
        let pre = layer.ff_in.forward(&h_mid);
        let act = pre.map(silu);
        let mut h_out = layer.ff_out.forward(&act);
        h_out.add_assign(&h_mid);
        layers.push(LayerTrace {
            h_in: std::mem::replace(&mut h, h_out),
            cache,
            h_mid,
            pre,
            act,
        });
    }
    Ok((
        h,
        ContextTrace {
            x: prefix.embeddings.clone(),
            tags,
            layers,
        },
    ))
}

fn add_linear(dst: &mut Linear, g: &LinearGrads) {
    dst.weight.add_assign(&g.weight);
    dst.bias.add_assign(&g.bias);
}

/// Accumulates contextualizer gradients for upstream `d_ctx` (n×width) into `grads`.
pub(crate) fn contextualize_backward(
    params: &TwoTowerParams,
    trace: &ContextTrace,
    d_ctx: &Matrix,
    grads: &mut TwoTowerParams,
) {
    let mut d = d_ctx.clone();
    for (i, (layer, lt)) in params.layers.iter().zip(&trace.layers).enumerate().rev() {
        let g = &mut grads.layers[i];
        let go = layer.ff_out.backward(&lt.act, &d);
        add_linear(&mut g.ff_out, &go);
        let mut d_pre = go.input;
        for (dp, &p) in d_pre.as_mut_slice().iter_mut().zip(lt.pre.as_slice()) {
            *dp *= silu_grad(p);
        }
        let gi = layer.ff_in.backward(&lt.h_mid, &d_pre);
        add_linear(&mut g.ff_in, &gi);
        let mut d_mid = d;
        d_mid.add_assign(&gi.input);
        let ga = layer.attn.backward(&lt.cache, &d_mid);
        g.attn.wq.add_assign(&ga.wq);
        g.attn.wk.add_assign(&ga.wk);
        g.attn.wv.add_assign(&ga.wv);
        g.attn.wo.add_assign(&ga.wo);
        d_mid.add_assign(&ga.q_in);
        d_mid.add_assign(&ga.kv_in);
        debug_assert_eq!(lt.h_in.shape(), d_mid.shape());
        d = d_mid;
    }
    if let Some(tg) = &mut grads.tags {
        for (i, &t) in trace.tags.iter().enumerate() {
            for (a, b) in tg.row_mut(t).iter_mut().zip(d.row(i)) {
                *a += b;
            }
        }
    }
    let gin = params.ctx_in.backward(&trace.x, &d);
    add_linear(&mut grads.ctx_in, &gin);
}

/// Intermediate values of one batched denoiser pass.
pub struct DenoiseTrace {
    inp: Matrix,
    /// Pre-activation input of each residual block, then the head input.
    us: Vec<Matrix>,
    acts: Vec<Matrix>,
}

/// Batched denoiser: rows of `xt` (B×d), one log-SNR per row, context rows (B×width).
pub(crate) fn denoise_batch(
    params: &TwoTowerParams,
    cfg: &TwoTowerConfig,
    xt: &Matrix,
    log_snr: &[f64],
    ctx: &Matrix,
) -> (Matrix, DenoiseTrace) {
    let b = xt.rows();
    let mut temb = Matrix::zeros(b, cfg.time_dim);
    for (i, &l) in log_snr.iter().enumerate() {
        temb.row_mut(i).copy_from_slice(&lambda_embedding(l, cfg.time_dim));
    }
    let inp = Matrix::hstack(&[xt, &temb, ctx]);
    let mut u = params.den_in.forward(&inp);
    let mut us = Vec::with_capacity(params.den_blocks.len() + 1);
    let mut acts = Vec::with_capacity(params.den_blocks.len());
    for blk in &params.den_blocks {
        let a = u.map(silu);
        let mut next = blk.forward(&a);
        next.add_assign(&u);
        us.push(std::mem::replace(&mut u, next));
        acts.push(a);
    }
    let out = params.den_out.forward(&u);
    us.push(u);
    (out, DenoiseTrace { inp, us, acts })
}

/// Accumulates denoiser gradients into `grads`; returns the gradient w.r.t. the context rows.
pub(crate) fn denoise_backward(
    params: &TwoTowerParams,
    cfg: &TwoTowerConfig,
    trace: &DenoiseTrace,
    d_out: &Matrix,
    grads: &mut TwoTowerParams,
) -> Matrix {
    let head_in = trace.us.last().expect("head input");
    let go = params.den_out.backward(head_in, d_out);
    add_linear(&mut grads.den_out, &go);
    let mut du = go.input;
    for (k, blk) in params.den_blocks.iter().enumerate().rev() {
        let gb = blk.backward(&trace.acts[k], &du);
        add_linear(&mut grads.den_blocks[k], &gb);
        let mut da = gb.input;
        for (x, &u) in da.as_mut_slice().iter_mut().zip(trace.us[k].as_slice()) {
            *x *= silu_grad(u);
        }
        du.add_assign(&da);
    }
    let gi = params.den_in.backward(&trace.inp, &du);
    add_linear(&mut grads.den_in, &gi);
    gi.input.col_block(cfg.concept_dim + cfg.time_dim, cfg.ctx_width)
}

/// Predicted clean embedding for one noised input at log-SNR `log_snr`.
///
/// With `conditioned = false` the learned null context replaces `c`.
pub fn denoise(
    params: &TwoTowerParams,
    cfg: &TwoTowerConfig,
    xt: &[f64],
    log_snr: f64,
    c: &[f64],
    conditioned: bool,
) -> Result<Vec<f64>> {
    if xt.len() != cfg.concept_dim || c.len() != cfg.ctx_width {
        return Err(Error::Shape(format!(
            "denoise got xt of {} and context of {}, model wants {} and {}",
            xt.len(),
            c.len(),
            cfg.concept_dim,
            cfg.ctx_width
        )));
    }
    let ctx = if conditioned {
        Matrix::row_vector(c)
    } else {
        params.null_ctx.clone()
    };
    let (out, _) = denoise_batch(params, cfg, &Matrix::row_vector(xt), &[log_snr], &ctx);
    Ok(out.into_vec())
}
