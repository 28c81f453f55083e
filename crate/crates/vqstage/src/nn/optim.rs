//! AdamW with decoupled weight decay, plus the cosine learning-rate schedule.

use crate::error::{Error, Result};

use super::layers::ParamSet;
use super::scalar::{fs, Scalar};

/// Decoupled-weight-decay Adam. Moment buffers mirror the parameter layout;
/// the step counter advances only on accepted updates.
pub struct AdamW<T: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamSet<T>, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        let m = params.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        let v = params.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        AdamW { beta1, beta2, eps: 1e-8, weight_decay, step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over all parameters. A non-finite gradient anywhere rejects
    /// the whole step: parameters, moments, and the counter stay untouched.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Vec<T>], lr: f64) -> Result<()> {
        assert_eq!(grads.len(), self.m.len(), "gradient count mismatch");
        for (i, g) in grads.iter().enumerate() {
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of parameter #{i}")));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let b1 = fs::<T>(self.beta1);
        let b2 = fs::<T>(self.beta2);
        let one_m_b1 = fs::<T>(1.0 - self.beta1);
        let one_m_b2 = fs::<T>(1.0 - self.beta2);
        let bc1 = fs::<T>(1.0 / (1.0 - self.beta1.powf(t)));
        let bc2 = fs::<T>(1.0 / (1.0 - self.beta2.powf(t)));
        let eps = fs::<T>(self.eps);
        let lr_t = fs::<T>(lr);
        let decay = fs::<T>(lr * self.weight_decay);
        for (idx, g) in grads.iter().enumerate() {
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let data = params.tensor_mut(crate::nn::ParamId(idx)).data_mut();
            debug_assert_eq!(g.len(), data.len());
            for i in 0..g.len() {
                m[i] = b1 * m[i] + one_m_b1 * g[i];
                v[i] = b2 * v[i] + one_m_b2 * g[i] * g[i];
                let m_hat = m[i] * bc1;
                let v_hat = v[i] * bc2;
                data[i] = data[i] - lr_t * m_hat / (v_hat.sqrt() + eps) - decay * data[i];
            }
        }
        Ok(())
    }
}

/// Cosine decay from an initial rate to zero over a fixed horizon.
#[derive(Clone, Copy, Debug)]
pub struct LrSchedule {
    pub initial: f64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn cosine(initial: f64, total_steps: u64) -> Self {
        assert!(total_steps > 0, "schedule needs a positive horizon");
        LrSchedule { initial, total_steps }
    }

    pub fn rate(&self, step: u64) -> f64 {
        if step >= self.total_steps {
            return 0.0;
        }
        let frac = step as f64 / self.total_steps as f64;
        self.initial * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn single_param(value: f64) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        ps.add("p", Tensor::scalar(value));
        ps
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut ps = single_param(1.5);
        let mut opt = AdamW::new(&ps, 0.9, 0.96, 0.0);
        opt.step(&mut ps, &[vec![0.0]], 0.1).unwrap();
        assert_eq!(ps.tensor(crate::nn::ParamId(0)).item(), 1.5);
    }

    #[test]
    fn first_step_bias_correction() {
        // p=1, g=1, lr=0.1: bias-corrected m_hat = v_hat = 1, update = -0.1.
        let mut ps = single_param(1.0);
        let mut opt = AdamW::new(&ps, 0.9, 0.96, 0.0);
        opt.step(&mut ps, &[vec![1.0]], 0.1).unwrap();
        let p = ps.tensor(crate::nn::ParamId(0)).item();
        assert!((p - 0.9).abs() < 1e-7, "got {p}");
    }

    #[test]
    fn decoupled_decay_only() {
        // zero grad, decay 0.1, lr 0.1 -> multiply by (1 - 0.01).
        let mut ps = single_param(2.0);
        let mut opt = AdamW::new(&ps, 0.9, 0.96, 0.1);
        opt.step(&mut ps, &[vec![0.0]], 0.1).unwrap();
        let p = ps.tensor(crate::nn::ParamId(0)).item();
        assert!((p - 2.0 * 0.99).abs() < 1e-12, "got {p}");
    }

    #[test]
    fn non_finite_gradient_rejected_counter_unchanged() {
        let mut ps = single_param(1.0);
        let mut opt = AdamW::new(&ps, 0.9, 0.96, 0.0);
        opt.step(&mut ps, &[vec![1.0]], 0.1).unwrap();
        assert_eq!(opt.step_count(), 1);
        let err = opt.step(&mut ps, &[vec![f64::NAN]], 0.1);
        assert!(err.is_err());
        assert_eq!(opt.step_count(), 1);
        let p = ps.tensor(crate::nn::ParamId(0)).item();
        assert!((p - 0.9).abs() < 1e-7, "rejected step must not move parameters");
    }

    #[test]
    fn deterministic_given_state() {
        let run = || {
            let mut ps = single_param(0.7);
            let mut opt = AdamW::new(&ps, 0.9, 0.96, 0.01);
            for i in 0..10 {
                opt.step(&mut ps, &[vec![0.1 * (i as f64 - 4.0)]], 0.05).unwrap();
            }
            ps.tensor(crate::nn::ParamId(0)).item()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn cosine_schedule_properties() {
        let s = LrSchedule::cosine(1e-3, 1000);
        assert_eq!(s.rate(0), 1e-3);
        assert!(s.rate(1000) == 0.0);
        let mut prev = f64::INFINITY;
        for step in 0..=1000 {
            let r = s.rate(step);
            assert!(r <= prev + 1e-18, "cosine schedule must be non-increasing");
            prev = r;
        }
    }
}
