use serde::{Deserialize, Serialize};

use crate::numerics::{gaussian_sample, Matrix, SeededRng};

/// `y = x·Wᵀ + b` over a batch of row vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// out×in
    pub weight: Matrix,
    /// 1×out
    pub bias: Matrix,
}

#[derive(Clone, Debug)]
pub struct LinearGrads {
    pub weight: Matrix,
    pub bias: Matrix,
    pub input: Matrix,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(output, input),
            bias: Matrix::zeros(1, output),
        }
    }

    /// Gaussian weights with standard deviation `gain / √in`, zero bias.
    pub fn scaled_gaussian(input: usize, output: usize, gain: f64, rng: &mut SeededRng) -> Self {
        Self {
            weight: gaussian_sample(rng, output, input, 0.0, gain / (input as f64).sqrt()),
            bias: Matrix::zeros(1, output),
        }
    }

    pub fn tensors<'a>(&'a self, prefix: &str) -> Vec<(String, &'a Matrix)> {
        vec![
            (format!("{prefix}.weight"), &self.weight),
            (format!("{prefix}.bias"), &self.bias),
        ]
    }

    pub fn tensors_mut<'a>(&'a mut self, prefix: &str) -> Vec<(String, &'a mut Matrix)> {
        vec![
            (format!("{prefix}.weight"), &mut self.weight),
            (format!("{prefix}.bias"), &mut self.bias),
        ]
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut y = x.matmul_t(&self.weight);
        y.add_row_broadcast(self.bias.as_slice());
        y
    }

    pub fn backward(&self, x: &Matrix, d_out: &Matrix) -> LinearGrads {
        LinearGrads {
            weight: d_out.t_matmul(x),
            bias: d_out.col_sums(),
            input: d_out.matmul(&self.weight),
        }
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}
