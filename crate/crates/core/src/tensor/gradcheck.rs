//! Finite-difference gradient verification.

use super::{NodeId, Tape, Tensor};

/// Compare the tape gradient of a scalar function against central finite
/// differences. Returns the max over coordinates of
/// `|analytic - numeric| / max(1, |analytic|)`.
///
/// Panics if the function produces a non-finite value anywhere.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> f64
where
    F: Fn(&mut Tape, NodeId) -> NodeId,
{
    assert!(eps > 0.0 && eps <= 1e-2, "eps {eps} outside (0, 1e-2]");

    let mut tape = Tape::new();
    let xid = tape.leaf(x.shape().to_vec(), x.data().to_vec(), true);
    let y = f(&mut tape, xid);
    let y_val = tape.scalar_value(y);
    assert!(y_val.is_finite(), "grad_check: f returned non-finite {y_val}");
    tape.backward(y);
    let analytic: Vec<f64> = tape
        .grad(xid)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |data: Vec<f64>| -> f64 {
        let mut t = Tape::new();
        let id = t.leaf(x.shape().to_vec(), data, false);
        let out = f(&mut t, id);
        let v = t.scalar_value(out);
        assert!(v.is_finite(), "grad_check: f returned non-finite {v}");
        v
    };

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        let mut minus = x.data().to_vec();
        plus[i] += eps;
        minus[i] -= eps;
        let numeric = (eval(plus) - eval(minus)) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_is_exactly_linear() {
        let x = Tensor::from_vec(vec![2, 3], vec![0.3, -1.0, 2.5, 0.0, 4.0, -0.7]);
        let err = grad_check(|t, x| t.sum_all(x), &x, 1e-5);
        assert!(err < 1e-10, "linear op error {err}");
    }

    #[test]
    fn l2_norm_squared_hand_gradient() {
        // f = sum(x^2) at [1, 2]: analytic gradient [2, 4].
        let x = Tensor::from_vec(vec![2], vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let id = tape.leaf(vec![2], vec![1.0, 2.0], true);
        let sq = tape.mul(id, id);
        let s = tape.sum_all(sq);
        tape.backward(s);
        assert_eq!(tape.grad(id).unwrap(), &[2.0, 4.0]);

        let err = grad_check(
            |t, x| {
                let sq = t.mul(x, x);
                t.sum_all(sq)
            },
            &x,
            1e-5,
        );
        assert!(err < 1e-8, "error {err}");
    }

    #[test]
    fn mean_tanh_linear_chain_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w_data: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::from_vec(vec![4, 3], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let err = grad_check(
            move |t, x| {
                let w = t.constant(vec![3, 4], w_data.clone());
                let h = t.matmul(x, w);
                let a = t.tanh(h);
                t.mean_all(a)
            },
            &x,
            1e-5,
        );
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn layer_norm_and_softmax_paths_check_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_vec(vec![3, 4], (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let err = grad_check(
            |t, x| {
                let gamma = t.constant(vec![4], vec![1.2, 0.8, 1.0, -0.5]);
                let beta = t.constant(vec![4], vec![0.1, 0.0, -0.2, 0.3]);
                let ln = t.layer_norm(x, gamma, beta, 1e-5);
                let sm = t.softmax(ln);
                let lg = t.ln(sm);
                t.mean_all(lg)
            },
            &x,
            1e-5,
        );
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn sinusoidal_pe_gradient_checks_out() {
        let x = Tensor::from_vec(vec![3], vec![0.2, 1.7, -0.9]);
        let err = grad_check(
            |t, x| {
                let pe = t.sinusoidal_pe(x, 8, 10000.0);
                let w = t.constant(vec![3, 8], (0..24).map(|i| (i as f64 * 0.31).cos()).collect());
                let prod = t.mul(pe, w);
                t.sum_all(prod)
            },
            &x,
            1e-5,
        );
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    #[should_panic(expected = "non-finite")]
    fn non_finite_value_is_rejected() {
        let x = Tensor::from_vec(vec![1], vec![-1.0]);
        grad_check(
            |t, x| {
                let l = t.ln(x);
                t.sum_all(l)
            },
            &x,
            1e-5,
        );
    }
}
