//! Central finite-difference oracle for reverse-mode gradients.

use super::layers::{ParamSet, TapeParams};
use super::scalar::{fs, Scalar};
use super::tape::{NodeId, Tape};

/// Compares analytic gradients against central differences for a scalar loss
/// built by `f` over every coordinate of every parameter.
///
/// Returns the maximum of |analytic - numeric| / max(1, |analytic|). Run this
/// in f64: the f32 ulp at h=1e-5 swamps the difference quotient.
pub fn gradient_check<T, F>(params: &ParamSet<T>, h: f64, f: F) -> f64
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &TapeParams) -> NodeId,
{
    let mut tape = Tape::new();
    let injected = params.inject(&mut tape, true);
    let loss = f(&mut tape, &injected);
    tape.backward(loss);
    let analytic = params.collect_grads(&tape, &injected);

    let eval = |ps: &ParamSet<T>| -> f64 {
        let mut tape = Tape::new();
        let injected = ps.inject(&mut tape, false);
        let loss = f(&mut tape, &injected);
        tape.value(loss).item().to_f64_c()
    };

    let mut worst = 0.0f64;
    let mut probe = clone_params(params);
    for idx in 0..params.len() {
        let id = super::layers::ParamId(idx);
        for i in 0..params.tensor(id).numel() {
            let orig = probe.tensor(id).data()[i];
            probe.tensor_mut(id).data_mut()[i] = orig + fs::<T>(h);
            let up = eval(&probe);
            probe.tensor_mut(id).data_mut()[i] = orig - fs::<T>(h);
            let down = eval(&probe);
            probe.tensor_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[idx][i].to_f64_c();
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}

fn clone_params<T: Scalar>(params: &ParamSet<T>) -> ParamSet<T> {
    let mut out = ParamSet::new();
    for (name, tensor) in params.iter() {
        out.add(name, tensor.clone());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Linear, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_has_tiny_error() {
        let mut ps = ParamSet::<f64>::new();
        ps.add("x", Tensor::scalar(3.0));
        let err = gradient_check(&ps, 1e-5, |tape, p| {
            let x = p.node(crate::nn::ParamId(0));
            let sq = tape.mul(x, x);
            tape.sum_all(sq)
        });
        assert!(err < 1e-8, "x^2 at x=3: relative error {err}");
    }

    #[test]
    fn two_layer_perceptron_under_1e4() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ps = ParamSet::<f64>::new();
        let l1 = Linear::init(&mut ps, "l1", 4, 6, 0.5, true, &mut rng);
        let l2 = Linear::init(&mut ps, "l2", 6, 3, 0.5, true, &mut rng);
        let x = Tensor::randn(vec![5, 4], 1.0, &mut rng);
        let targets: Vec<u32> = vec![0, 1, 2, 1, 0];
        let err = gradient_check(&ps, 1e-5, |tape, p| {
            let xin = tape.constant(x.clone());
            let h = l1.forward(tape, p, xin);
            let h = tape.gelu(h);
            let logits = l2.forward(tape, p, h);
            tape.cross_entropy_masked(logits, &targets, &[true; 5])
        });
        assert!(err < 1e-4, "2-layer perceptron: relative error {err}");
    }

    #[test]
    fn ignored_position_has_zero_grad_both_ways() {
        // Analytic and numeric gradients both vanish at a masked row.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamSet::<f64>::new();
        ps.add("logits", Tensor::randn(vec![2, 4], 1.0, &mut rng));
        let mask = [true, false];
        let mut tape = Tape::new();
        let injected = ps.inject(&mut tape, true);
        let loss = tape.cross_entropy_masked(injected.node(crate::nn::ParamId(0)), &[1, 2], &mask);
        tape.backward(loss);
        let g = tape.grad(injected.node(crate::nn::ParamId(0))).unwrap();
        assert!(g[4..8].iter().all(|&v| v == 0.0));

        let err = gradient_check(&ps, 1e-5, |tape, p| {
            tape.cross_entropy_masked(p.node(crate::nn::ParamId(0)), &[1, 2], &mask)
        });
        assert!(err < 1e-8, "masked CE: relative error {err}");
    }

    #[test]
    fn stop_gradient_swaps_which_side_learns() {
        // || sg(a) - b ||^2 trains b only; || a - sg(b) ||^2 trains a only.
        let mut ps = ParamSet::<f64>::new();
        ps.add("a", Tensor::from_f64s(vec![2], &[0.4, -0.2]));
        ps.add("b", Tensor::from_f64s(vec![2], &[0.1, 0.3]));
        let run = |sg_on_a: bool| -> (Vec<f64>, Vec<f64>) {
            let mut tape = Tape::new();
            let p = ps.inject(&mut tape, true);
            let a = p.node(crate::nn::ParamId(0));
            let b = p.node(crate::nn::ParamId(1));
            let (lhs, rhs) =
                if sg_on_a { (tape.stop_grad(a), b) } else { (a, tape.stop_grad(b)) };
            let loss = tape.sum_sq_diff(lhs, rhs);
            tape.backward(loss);
            let grads = ps.collect_grads(&tape, &p);
            (grads[0].clone(), grads[1].clone())
        };
        let (ga, gb) = run(true);
        assert!(ga.iter().all(|&v| v == 0.0) && gb.iter().any(|&v| v != 0.0));
        let (ga, gb) = run(false);
        assert!(ga.iter().any(|&v| v != 0.0) && gb.iter().all(|&v| v == 0.0));
    }
}
