use crate::numerics::Matrix;

/// A fixed, ordered collection of named trainable tensors.
///
/// The same type doubles as its own gradient container: `zeros_like` gives a
/// gradient buffer whose tensors line up one-to-one with the parameters.
pub trait Parameters: Clone {
    fn tensors(&self) -> Vec<(String, &Matrix)>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, t) in self.tensors() {
            out.extend_from_slice(t.as_slice());
        }
        out
    }

    fn set_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for (_, t) in self.tensors_mut() {
            let n = t.len();
            t.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len(), "flat parameter vector length");
    }

    /// `self += alpha · other`, tensor by tensor.
    fn axpy(&mut self, alpha: f64, other: &Self) {
        let src = other.tensors();
        for ((_, dst), (_, s)) in self.tensors_mut().into_iter().zip(src) {
            dst.axpy(alpha, s);
        }
    }

    fn global_norm(&self) -> f64 {
        self.tensors().iter().map(|(_, t)| t.sum_sq()).sum::<f64>().sqrt()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// FNV-1a over the names, shapes and bit patterns of every tensor.
    fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |x: u64| {
            h ^= x;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for (name, t) in self.tensors() {
            name.bytes().for_each(|b| mix(b as u64));
            mix(t.rows() as u64);
            mix(t.cols() as u64);
            t.as_slice().iter().for_each(|v| mix(v.to_bits()));
        }
        h
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before and after clipping.
pub fn clip_grad_norm<P: Parameters>(grads: &mut P, max_norm: f64) -> (f64, f64) {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        let mut s = max_norm / norm;
        let mut clipped = norm;
        // Rounding can leave the rescaled norm an ulp above the bound.
        while clipped > max_norm {
            for (_, t) in grads.tensors_mut() {
                t.scale(s);
            }
            clipped = grads.global_norm();
            s = (max_norm / clipped) * (1.0 - f64::EPSILON);
        }
        (norm, clipped)
    } else {
        (norm, norm)
    }
}
