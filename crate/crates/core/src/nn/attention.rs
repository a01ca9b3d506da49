//! Multi-head scaled dot-product attention with a hand-derived backward pass.
//!
//! Row-vector convention throughout: an input sequence is a `T×D` matrix and a
//! weight `W` (D×D) is applied as `X·Wᵀ`.

use serde::{Deserialize, Serialize};

use crate::numerics::{dot, gaussian_sample, softmax_in_place, Matrix, SeededRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
}

/// Activations saved by [`MultiHeadAttention::forward`].
#[derive(Clone, Debug)]
pub struct AttentionCache {
    q_in: Matrix,
    kv_in: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Per-head softmax output before dropout, `Tq×Tk`.
    probs: Vec<Matrix>,
    /// Per-head keep mask already divided by `1 − p`; `None` when dropout was off.
    dropout: Option<Vec<Matrix>>,
    concat: Matrix,
    heads: usize,
    causal: bool,
}

impl AttentionCache {
    /// Attention weights actually applied to the values, per head.
    pub fn weights(&self) -> Vec<Matrix> {
        match &self.dropout {
            None => self.probs.clone(),
            Some(masks) => self
                .probs
                .iter()
                .zip(masks)
                .map(|(p, m)| {
                    let mut w = p.clone();
                    for (a, b) in w.as_mut_slice().iter_mut().zip(m.as_slice()) {
                        *a *= b;
                    }
                    w
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttentionGrads {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub q_in: Matrix,
    pub kv_in: Matrix,
}

impl MultiHeadAttention {
    pub fn zeros(dim: usize) -> Self {
        Self {
            wq: Matrix::zeros(dim, dim),
            wk: Matrix::zeros(dim, dim),
            wv: Matrix::zeros(dim, dim),
            wo: Matrix::zeros(dim, dim),
        }
    }

    pub fn gaussian(dim: usize, sigma: f64, rng: &mut SeededRng) -> Self {
        Self {
            wq: gaussian_sample(rng, dim, dim, 0.0, sigma),
            wk: gaussian_sample(rng, dim, dim, 0.0, sigma),
            wv: gaussian_sample(rng, dim, dim, 0.0, sigma),
            wo: gaussian_sample(rng, dim, dim, 0.0, sigma),
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.rows()
    }

    pub fn tensors<'a>(&'a self, prefix: &str) -> Vec<(String, &'a Matrix)> {
        vec![
            (format!("{prefix}.wq"), &self.wq),
            (format!("{prefix}.wk"), &self.wk),
            (format!("{prefix}.wv"), &self.wv),
            (format!("{prefix}.wo"), &self.wo),
        ]
    }

    pub fn tensors_mut<'a>(&'a mut self, prefix: &str) -> Vec<(String, &'a mut Matrix)> {
        vec![
            (format!("{prefix}.wq"), &mut self.wq),
            (format!("{prefix}.wk"), &mut self.wk),
            (format!("{prefix}.wv"), &mut self.wv),
            (format!("{prefix}.wo"), &mut self.wo),
        ]
    }

    /// Attends from `q_in` (Tq×D) over `kv_in` (Tk×D).
    ///
    /// With `causal`, query `i` only sees keys `j ≤ i` (requires Tq = Tk).
    /// `dropout = Some((p, rng))` drops attention weights with probability `p`
    /// and rescales the survivors by `1/(1 − p)`.
    pub fn forward(
        &self,
        q_in: &Matrix,
        kv_in: &Matrix,
        heads: usize,
        causal: bool,
        dropout: Option<(f64, &mut SeededRng)>,
    ) -> (Matrix, AttentionCache) {
        let dim = self.dim();
        assert_eq!(dim % heads, 0, "model dim {dim} not divisible by {heads} heads");
        assert_eq!(q_in.cols(), dim);
        assert_eq!(kv_in.cols(), dim);
        if causal {
            assert_eq!(q_in.rows(), kv_in.rows(), "causal attention needs Tq = Tk");
        }
        let hd = dim / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (tq, tk) = (q_in.rows(), kv_in.rows());

        let q = q_in.matmul_t(&self.wq);
        let k = kv_in.matmul_t(&self.wk);
        let v = kv_in.matmul_t(&self.wv);

        let mut probs = Vec::with_capacity(heads);
        let mut masks = dropout.as_ref().map(|_| Vec::with_capacity(heads));
        let mut dropout = dropout;
        let mut concat = Matrix::zeros(tq, dim);
        for h in 0..heads {
            let off = h * hd;
            let mut p = Matrix::zeros(tq, tk);
            for i in 0..tq {
                let qi = &q.row(i)[off..off + hd];
                let visible = if causal { i + 1 } else { tk };
                let row = &mut p.row_mut(i)[..visible];
                for (j, s) in row.iter_mut().enumerate() {
                    *s = dot(qi, &k.row(j)[off..off + hd]) * scale;
                }
                softmax_in_place(row);
            }
            let applied = match (&mut dropout, &mut masks) {
                (Some((rate, rng)), Some(masks)) => {
                    let keep = 1.0 / (1.0 - *rate);
                    let mut mask = Matrix::zeros(tq, tk);
                    for m in mask.as_mut_slice() {
                        *m = if rng.bernoulli(*rate) { 0.0 } else { keep };
                    }
                    let mut w = p.clone();
                    for (a, b) in w.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                        *a *= b;
                    }
                    masks.push(mask);
                    w
                }
                _ => p.clone(),
            };
            for i in 0..tq {
                let out = &mut concat.row_mut(i)[off..off + hd];
                for (j, &a) in applied.row(i).iter().enumerate() {
                    if a == 0.0 {
                        continue;
                    }
                    for (o, &vv) in out.iter_mut().zip(&v.row(j)[off..off + hd]) {
                        *o += a * vv;
                    }
                }
            }
            probs.push(p);
        }
        let out = concat.matmul_t(&self.wo);
        let cache = AttentionCache {
            q_in: q_in.clone(),
            kv_in: kv_in.clone(),
            q,
            k,
            v,
            probs,
            dropout: masks,
            concat,
            heads,
            causal,
        };
        (out, cache)
    }

    pub fn backward(&self, cache: &AttentionCache, d_out: &Matrix) -> AttentionGrads {
        let dim = self.dim();
        let heads = cache.heads;
        let hd = dim / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (tq, tk) = (cache.q_in.rows(), cache.kv_in.rows());

        let wo = d_out.t_matmul(&cache.concat);
        let d_concat = d_out.matmul(&self.wo);

        let mut dq = Matrix::zeros(tq, dim);
        let mut dk = Matrix::zeros(tk, dim);
        let mut dv = Matrix::zeros(tk, dim);
        let weights = cache.weights();
        for h in 0..heads {
            let off = h * hd;
            let p = &cache.probs[h];
            let w = &weights[h];
            for i in 0..tq {
                let go = &d_concat.row(i)[off..off + hd];
                let visible = if cache.causal { i + 1 } else { tk };
                // dV += wᵀ · dO and dW = dO · Vᵀ for this query row.
                let mut dw = vec![0.0; visible];
                for j in 0..visible {
                    let a = w.get(i, j);
                    if a != 0.0 {
                        for (d, &g) in dv.row_mut(j)[off..off + hd].iter_mut().zip(go) {
                            *d += a * g;
                        }
                    }
                    dw[j] = dot(go, &cache.v.row(j)[off..off + hd]);
                }
                if let Some(masks) = &cache.dropout {
                    for (j, x) in dw.iter_mut().enumerate() {
                        *x *= masks[h].get(i, j);
                    }
                }
                // Softmax backward: ds = p ⊙ (dp − Σ dp·p).
                let inner: f64 = (0..visible).map(|j| dw[j] * p.get(i, j)).sum();
                let qi: Vec<f64> = cache.q.row(i)[off..off + hd].to_vec();
                for j in 0..visible {
                    let ds = p.get(i, j) * (dw[j] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &cache.k.row(j)[off..off + hd];
                    for (d, &kk) in dq.row_mut(i)[off..off + hd].iter_mut().zip(kj) {
                        *d += ds * kk;
                    }
                    for (d, &qq) in dk.row_mut(j)[off..off + hd].iter_mut().zip(&qi) {
                        *d += ds * qq;
                    }
                }
            }
        }

        let mut kv_in = dk.matmul(&self.wk);
        kv_in.add_assign(&dv.matmul(&self.wv));
        AttentionGrads {
            wq: dq.t_matmul(&cache.q_in),
            wk: dk.t_matmul(&cache.kv_in),
            wv: dv.t_matmul(&cache.kv_in),
            wo,
            q_in: dq.matmul(&self.wq),
            kv_in,
        }
    }
}
