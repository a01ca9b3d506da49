//! The vision-to-concept connector.
//!
//! `frames (T×D) → [adapter] → + positional encoding → x + MHA(x) → pool → W·p + b`
//!
//! Pooling is attention (a learnable CLS query attending over the frames),
//! mean or max. Every step has an explicit backward pass in
//! [`project_backward`].

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::nn::{sinusoidal_encoding, AttentionCache, MultiHeadAttention, Parameters};
use crate::numerics::{gaussian_sample, Matrix, SeededRng};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Attention,
    Mean,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectorConfig {
    /// Frame feature width `D`.
    pub frame_dim: usize,
    /// Concept width `d`.
    pub concept_dim: usize,
    pub heads: usize,
    /// Dropout on attention weights, training only.
    pub dropout_p: f64,
    pub pooling: Pooling,
    pub init_sigma: f64,
    /// Residual temporal self-attention over frames; off gives the pooling-only baseline.
    pub temporal_attention: bool,
    pub positional_encoding: bool,
    /// Trainable D×D map on the raw frames, standing in for fine-tuning the backbone.
    pub encoder_adapter: bool,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self {
            frame_dim: 1536,
            concept_dim: 1024,
            heads: 8,
            dropout_p: 0.1,
            pooling: Pooling::Attention,
            init_sigma: 1e-5,
            temporal_attention: true,
            positional_encoding: true,
            encoder_adapter: false,
        }
    }
}

impl ProjectorConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.frame_dim > 0 && self.concept_dim > 0, || "dimensions must be positive".into())?;
        ensure(self.heads >= 1 && self.frame_dim % self.heads == 0, || {
            format!("frame_dim {} is not divisible by {} heads", self.frame_dim, self.heads)
        })?;
        ensure((0.0..1.0).contains(&self.dropout_p), || {
            format!("dropout_p must be in [0, 1), got {}", self.dropout_p)
        })?;
        ensure(self.init_sigma >= 0.0, || "init_sigma must be non-negative".into())?;
        ensure(!self.positional_encoding || self.frame_dim % 2 == 0, || {
            "sinusoidal positional encoding needs an even frame_dim".into()
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionPool {
    /// 1×D query token.
    pub cls: Matrix,
    pub attn: MultiHeadAttention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectorParams {
    pub adapter: Option<Matrix>,
    pub temporal: Option<MultiHeadAttention>,
    pub pool: Option<AttentionPool>,
    /// d×D
    pub out_weight: Matrix,
    /// 1×d
    pub out_bias: Matrix,
}

impl Parameters for ProjectorParams {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut v = Vec::new();
        if let Some(a) = &self.adapter {
            v.push(("adapter".to_string(), a));
        }
        if let Some(t) = &self.temporal {
            v.extend(t.tensors("temporal"));
        }
        if let Some(p) = &self.pool {
            v.push(("pool.cls".to_string(), &p.cls));
            v.extend(p.attn.tensors("pool"));
        }
        v.push(("out.weight".to_string(), &self.out_weight));
        v.push(("out.bias".to_string(), &self.out_bias));
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut v = Vec::new();
        if let Some(a) = &mut self.adapter {
            v.push(("adapter".to_string(), a));
        }
        if let Some(t) = &mut self.temporal {
            v.extend(t.tensors_mut("temporal"));
        }
        if let Some(p) = &mut self.pool {
            v.push(("pool.cls".to_string(), &mut p.cls));
            v.extend(p.attn.tensors_mut("pool"));
        }
        v.push(("out.weight".to_string(), &mut self.out_weight));
        v.push(("out.bias".to_string(), &mut self.out_bias));
        v
    }
}

impl ProjectorParams {
    /// All-zero parameters with the layout `cfg` implies (adapter = identity).
    pub fn zeros(cfg: &ProjectorConfig) -> Self {
        let dd = cfg.frame_dim;
        Self {
            adapter: cfg.encoder_adapter.then(|| Matrix::identity(dd)),
            temporal: cfg.temporal_attention.then(|| MultiHeadAttention::zeros(dd)),
            pool: (cfg.pooling == Pooling::Attention).then(|| AttentionPool {
                cls: Matrix::zeros(1, dd),
                attn: MultiHeadAttention::zeros(dd),
            }),
            out_weight: Matrix::zeros(cfg.concept_dim, dd),
            out_bias: Matrix::zeros(1, cfg.concept_dim),
        }
    }

    /// True for tensors that belong to the (optional) encoder adapter.
    pub fn is_encoder_tensor(name: &str) -> bool {
        name == "adapter"
    }
}

/// Weights and the CLS token ~ N(0, init_sigma²); biases zero; adapter identity.
pub fn init_projector(cfg: &ProjectorConfig, rng: &mut SeededRng) -> Result<ProjectorParams> {
    cfg.validate()?;
    let (dd, d, s) = (cfg.frame_dim, cfg.concept_dim, cfg.init_sigma);
    let temporal = cfg
        .temporal_attention
        .then(|| MultiHeadAttention::gaussian(dd, s, rng));
    let pool = (cfg.pooling == Pooling::Attention).then(|| AttentionPool {
        cls: gaussian_sample(rng, 1, dd, 0.0, s),
        attn: MultiHeadAttention::gaussian(dd, s, rng),
    });
    let out_weight = gaussian_sample(rng, d, dd, 0.0, s);
    Ok(ProjectorParams {
        adapter: cfg.encoder_adapter.then(|| Matrix::identity(dd)),
        temporal,
        pool,
        out_weight,
        out_bias: Matrix::zeros(1, d),
    })
}

/// `PE[t, 2i] = sin(t/10000^(2i/D))`, `PE[t, 2i+1] = cos(t/10000^(2i/D))`.
pub fn sinusoidal_pe(len: usize, dim: usize) -> Result<Matrix> {
    if dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "sinusoidal encoding needs an even width, got {dim}"
        )));
    }
    Ok(sinusoidal_encoding(len, dim))
}

/// `X + MHA(X)` over frame positions. Dropout on attention weights only when `rng` is given.
pub fn temporal_attention(
    attn: &MultiHeadAttention,
    x: &Matrix,
    heads: usize,
    dropout: Option<(f64, &mut SeededRng)>,
) -> (Matrix, AttentionCache) {
    let (a, cache) = attn.forward(x, x, heads, false, dropout);
    (x.add(&a), cache)
}

/// Single-query attention from the CLS token over the rows of `x`; returns a 1×D row.
pub fn attention_pool(pool: &AttentionPool, x: &Matrix, heads: usize) -> (Matrix, AttentionCache) {
    pool.attn.forward(&pool.cls, x, heads, false, None)
}

pub fn mean_pool(x: &Matrix) -> Matrix {
    x.col_sums().scaled(1.0 / x.rows() as f64)
}

/// Coordinate-wise max and, per coordinate, the first row attaining it.
pub fn max_pool(x: &Matrix) -> (Matrix, Vec<usize>) {
    let mut out = Matrix::row_vector(x.row(0));
    let mut arg = vec![0; x.cols()];
    for r in 1..x.rows() {
        for (c, &v) in x.row(r).iter().enumerate() {
            if v > out.get(0, c) {
                out.set(0, c, v);
                arg[c] = r;
            }
        }
    }
    (out, arg)
}

#[derive(Clone, Debug)]
enum PoolTrace {
    Attention(AttentionCache),
    Mean,
    Max(Vec<usize>),
}

/// Activations of one [`project`] call.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    fingerprint: u64,
    frames: Matrix,
    temporal: Option<AttentionCache>,
    pool: PoolTrace,
    pooled: Matrix,
}

impl ForwardTrace {
    pub fn pooled(&self) -> &[f64] {
        self.pooled.as_slice()
    }
}

/// Maps one video's frames to a concept embedding.
///
/// With `train_mode` and `dropout_p > 0`, dropout masks are drawn from `rng`
/// and recorded in the trace.
pub fn project(
    params: &ProjectorParams,
    cfg: &ProjectorConfig,
    frames: &Matrix,
    train_mode: bool,
    rng: Option<&mut SeededRng>,
) -> Result<(Vec<f64>, ForwardTrace)> {
    if frames.rows() == 0 || frames.cols() != cfg.frame_dim {
        return Err(Error::Shape(format!(
            "frames are {:?}, expected T×{} with T >= 1",
            frames.shape(),
            cfg.frame_dim
        )));
    }
    let mut x = match &params.adapter {
        Some(a) => frames.matmul_t(a),
        None => frames.clone(),
    };
    if cfg.positional_encoding {
        x.add_assign(&sinusoidal_pe(x.rows(), x.cols())?);
    }
    let dropout = match (train_mode && cfg.dropout_p > 0.0, rng) {
        (true, Some(r)) => Some((cfg.dropout_p, r)),
        (true, None) => {
            return Err(Error::InvalidArgument(
                "training-mode dropout needs a random stream".into(),
            ))
        }
        _ => None,
    };
    let (x, temporal) = match &params.temporal {
        Some(attn) => {
            let (y, cache) = temporal_attention(attn, &x, cfg.heads, dropout);
            (y, Some(cache))
        }
        None => (x, None),
    };
    let (pooled, pool) = match cfg.pooling {
        Pooling::Attention => {
            let p = params
                .pool
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("attention pooling without pool parameters".into()))?;
            let (y, cache) = attention_pool(p, &x, cfg.heads);
            (y, PoolTrace::Attention(cache))
        }
        Pooling::Mean => (mean_pool(&x), PoolTrace::Mean),
        Pooling::Max => {
            let (y, arg) = max_pool(&x);
            (y, PoolTrace::Max(arg))
        }
    };
    let mut z = pooled.matmul_t(&params.out_weight);
    z.add_assign(&params.out_bias);
    let trace = ForwardTrace {
        fingerprint: params.fingerprint(),
        frames: frames.clone(),
        temporal,
        pool,
        pooled,
    };
    Ok((z.into_vec(), trace))
}

/// Gradients of `⟨upstream, project(frames)⟩` w.r.t. every parameter and the frames.
pub fn project_backward(
    params: &ProjectorParams,
    trace: &ForwardTrace,
    upstream: &[f64],
) -> Result<(ProjectorParams, Matrix)> {
    if trace.fingerprint != params.fingerprint() {
        return Err(Error::StaleTrace);
    }
    if upstream.len() != params.out_bias.cols() {
        return Err(Error::Shape(format!(
            "upstream gradient has {} entries, expected {}",
            upstream.len(),
            params.out_bias.cols()
        )));
    }
    let mut grads = params.zeros_like();
    let dz = Matrix::row_vector(upstream);
    grads.out_weight = dz.t_matmul(&trace.pooled);
    grads.out_bias = dz.clone();
    let dp = dz.matmul(&params.out_weight);

    let (t, dd) = trace.frames.shape();
    let mut dx = match &trace.pool {
        PoolTrace::Attention(cache) => {
            let pool = params.pool.as_ref().ok_or(Error::StaleTrace)?;
            let g = pool.attn.backward(cache, &dp);
            let gp = grads.pool.as_mut().expect("layout mirrors params");
            gp.cls = g.q_in;
            gp.attn.wq = g.wq;
            gp.attn.wk = g.wk;
            gp.attn.wv = g.wv;
            gp.attn.wo = g.wo;
            g.kv_in
        }
        PoolTrace::Mean => {
            let mut dx = Matrix::zeros(t, dd);
            let row = dp.scaled(1.0 / t as f64);
            for r in 0..t {
                dx.row_mut(r).copy_from_slice(row.as_slice());
            }
            dx
        }
        PoolTrace::Max(arg) => {
            let mut dx = Matrix::zeros(t, dd);
            for (c, &r) in arg.iter().enumerate() {
                dx.set(r, c, dp.get(0, c));
            }
            dx
        }
    };

    if let (Some(attn), Some(cache)) = (&params.temporal, &trace.temporal) {
        let g = attn.backward(cache, &dx);
        dx.add_assign(&g.q_in);
        dx.add_assign(&g.kv_in);
        let gt = grads.temporal.as_mut().expect("layout mirrors params");
        gt.wq = g.wq;
        gt.wk = g.wk;
        gt.wv = g.wv;
        gt.wo = g.wo;
    }

    let d_frames = match &params.adapter {
        Some(a) => {
            grads.adapter = Some(dx.t_matmul(&trace.frames));
            dx.matmul(a)
        }
        None => dx,
    };
    Ok((grads, d_frames))
}
