//! Codebook: nearest-entry quantization and EMA maintenance.

use crate::error::{Error, Result};
use crate::nn::{fs, Scalar, Tensor};
use crate::TokenId;

/// Per-feature quantization outcome: assigned token ids and the attained
/// squared distances, which downstream modules use as difficulty scores.
#[derive(Clone, Debug)]
pub struct QuantizationResult {
    pub tokens: Vec<TokenId>,
    pub errors: Vec<f32>,
}

pub struct Codebook<T: Scalar> {
    pub entries: Tensor<T>,
    ema_size: Vec<f64>,
    ema_sum: Vec<f64>,
    pub decay: f64,
}

const EMA_EPS: f64 = 1e-5;

impl<T: Scalar> Codebook<T> {
    /// Fresh codebook with zeroed EMA accumulators.
    pub fn new(entries: Tensor<T>, decay: f64) -> Self {
        assert_eq!(entries.shape().len(), 2, "codebook entries must be [K, d]");
        let k = entries.shape()[0];
        let d = entries.shape()[1];
        Codebook { entries, ema_size: vec![0.0; k], ema_sum: vec![0.0; k * d], decay }
    }

    /// Codebook whose accumulators already reflect the entries (size 1,
    /// sum = entry), so entries that miss a batch stay put instead of being
    /// pulled to zero. Training warm-starts use this.
    pub fn with_primed_accumulators(entries: Tensor<T>, decay: f64) -> Self {
        let mut cb = Codebook::new(entries, decay);
        let d = cb.dim();
        for k in 0..cb.len() {
            cb.ema_size[k] = 1.0;
            for j in 0..d {
                cb.ema_sum[k * d + j] = cb.entries.data()[k * d + j].to_f64_c();
            }
        }
        cb
    }

    pub fn len(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.entries.shape()[1]
    }

    /// Fraction of entries assigned at least once in the given assignment set.
    pub fn usage(&self, assignments: &[TokenId]) -> f64 {
        let mut used = vec![false; self.len()];
        for &t in assignments {
            used[t as usize] = true;
        }
        used.iter().filter(|&&u| u).count() as f64 / self.len() as f64
    }

    /// Decays the accumulators and folds in this batch, then rebuilds every
    /// entry as sum / (size + eps). Counts and sums use f64 regardless of the
    /// training precision.
    pub fn ema_update(&mut self, features: &[T], assignments: &[TokenId]) {
        let d = self.dim();
        assert_eq!(features.len(), assignments.len() * d, "feature/assignment count mismatch");
        for s in &mut self.ema_size {
            *s *= self.decay;
        }
        for s in &mut self.ema_sum {
            *s *= self.decay;
        }
        for (i, &tok) in assignments.iter().enumerate() {
            let k = tok as usize;
            self.ema_size[k] += 1.0;
            for j in 0..d {
                self.ema_sum[k * d + j] += features[i * d + j].to_f64_c();
            }
        }
        let data = self.entries.data_mut();
        for k in 0..self.ema_size.len() {
            let denom = self.ema_size[k] + EMA_EPS;
            for j in 0..d {
                data[k * d + j] = fs(self.ema_sum[k * d + j] / denom);
            }
        }
    }
}

/// Nearest-entry assignment for a flat [n, d] feature block.
///
/// Distances are computed directly as sums of squared differences (never via
/// the norm expansion), so the reported error is exactly the attained
/// minimum, non-negative, and zero only on an exact hit. Ties break toward
/// the smallest entry index.
pub fn quantize<T: Scalar>(features: &[T], dim: usize, entries: &Tensor<T>) -> Result<QuantizationResult> {
    if entries.shape()[0] == 0 {
        return Err(Error::EmptyCodebook);
    }
    if entries.shape()[1] != dim {
        return Err(Error::shape(
            format!("codebook dim {}", entries.shape()[1]),
            format!("feature dim {dim}"),
        ));
    }
    assert_eq!(features.len() % dim, 0, "feature block not a multiple of dim");
    let n = features.len() / dim;
    let k = entries.shape()[0];
    let cb = entries.data();
    let mut tokens = Vec::with_capacity(n);
    let mut errors = Vec::with_capacity(n);
    for i in 0..n {
        let f = &features[i * dim..(i + 1) * dim];
        let mut best_k = 0usize;
        let mut best_d = T::infinity();
        for e in 0..k {
            let row = &cb[e * dim..(e + 1) * dim];
            let mut dist = T::zero();
            for (&a, &b) in f.iter().zip(row) {
                let diff = a - b;
                dist += diff * diff;
            }
            if dist < best_d {
                best_d = dist;
                best_k = e;
            }
        }
        tokens.push(best_k as TokenId);
        errors.push(best_d.to_f64_c() as f32);
    }
    Ok(QuantizationResult { tokens, errors })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cb2() -> Tensor<f64> {
        Tensor::from_f64s(vec![2, 2], &[0.0, 0.0, 1.0, 1.0])
    }

    #[test]
    fn exact_hit_has_zero_error() {
        let entries = Tensor::from_f64s(
            vec![4, 2],
            &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
        );
        let q = quantize(&[0.7, 0.8], 2, &entries).unwrap();
        assert_eq!(q.tokens, vec![3]);
        assert_eq!(q.errors, vec![0.0]);
    }

    #[test]
    fn nearest_entry_with_expected_error() {
        let q = quantize(&[0.9, 0.9], 2, &cb2()).unwrap();
        assert_eq!(q.tokens, vec![1]);
        assert!((q.errors[0] - 0.02).abs() < 1e-7);
    }

    #[test]
    fn equidistant_tie_breaks_low() {
        let q = quantize(&[0.5, 0.5], 2, &cb2()).unwrap();
        assert_eq!(q.tokens, vec![0]);
    }

    #[test]
    fn empty_codebook_rejected() {
        // A [0, d] tensor cannot be constructed (zero extent), so model the
        // empty case through the shape-0 guard directly.
        let entries = Tensor::<f64>::zeros(vec![1, 2]);
        assert!(quantize(&[0.0, 0.0], 2, &entries).is_ok());
        let bad = quantize(&[0.0, 0.0, 0.0], 3, &entries);
        assert!(bad.is_err(), "dim mismatch must be rejected");
    }

    #[test]
    fn quantizing_entries_is_idempotent() {
        let entries = Tensor::<f64>::randn(vec![16, 4], 1.0, &mut crate::nn::rng::seeded(3));
        let q = quantize(entries.data(), 4, &entries).unwrap();
        for (k, (&tok, &err)) in q.tokens.iter().zip(&q.errors).enumerate() {
            assert_eq!(tok as usize, k);
            assert_eq!(err, 0.0);
        }
    }

    #[test]
    fn ema_with_zero_decay_lands_on_batch_mean() {
        let mut cb = Codebook::new(Tensor::<f64>::from_f64s(vec![1, 2], &[5.0, 5.0]), 0.0);
        let features = [1.0, 2.0, 3.0, 4.0];
        cb.ema_update(&features, &[0, 0]);
        let e = cb.entries.data();
        assert!((e[0] - 2.0).abs() < 1e-4, "got {}", e[0]);
        assert!((e[1] - 3.0).abs() < 1e-4);
    }

    #[test]
    fn unassigned_entry_barely_moves() {
        // sum and size decay together, so sum*g / (size*g + eps) stays where
        // it was (up to the epsilon).
        let mut cb =
            Codebook::with_primed_accumulators(Tensor::<f64>::from_f64s(vec![2, 1], &[1.0, -4.0]), 0.9);
        cb.ema_update(&[1.1], &[0]);
        let e1 = cb.entries.data()[1];
        assert!((e1 - -4.0).abs() < 1e-3, "unassigned entry moved to {e1}");
    }

    #[test]
    fn repeated_fixed_assignments_converge_to_mean() {
        let mut cb = Codebook::new(Tensor::<f64>::from_f64s(vec![1, 1], &[0.0]), 0.99);
        let features = [2.0, 4.0];
        for _ in 0..200 {
            cb.ema_update(&features, &[0, 0]);
        }
        let e = cb.entries.data()[0];
        assert!((e - 3.0).abs() < 1e-6, "converged to {e}");
    }

    #[test]
    fn ema_stays_finite() {
        let mut cb = Codebook::new(Tensor::<f64>::from_f64s(vec![2, 1], &[0.0, 1.0]), 0.99);
        for i in 0..1000 {
            cb.ema_update(&[(i % 7) as f64], &[(i % 2) as TokenId]);
        }
        assert!(cb.entries.is_finite());
    }
}
