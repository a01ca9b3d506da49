//! Layers with explicit backward passes, parameter containers and the optimizer.

mod attention;
mod dense;
mod optim;
mod params;

pub use attention::{AttentionCache, AttentionGrads, MultiHeadAttention};
pub use dense::{silu, silu_grad, Linear, LinearGrads};
pub use optim::{AdamW, Moments};
pub use params::{clip_grad_norm, Parameters};

/// Sinusoidal encoding `PE[t, 2i] = sin(t / 10000^(2i/D))`, `PE[t, 2i+1] = cos(…)`.
pub fn sinusoidal_encoding(len: usize, dim: usize) -> crate::numerics::Matrix {
    let mut pe = crate::numerics::Matrix::zeros(len, dim);
    for t in 0..len {
        for i in 0..dim / 2 {
            let angle = t as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            pe.set(t, 2 * i, angle.sin());
            pe.set(t, 2 * i + 1, angle.cos());
        }
    }
    pe
}
