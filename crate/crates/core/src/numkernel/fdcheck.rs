//! Central finite differences — the independent gradient oracle.
//!
//! Used by tests and acceptance checks only; it never touches the tape's
//! reverse pass, so agreement between the two is meaningful evidence.

use super::tensor::Tensor;

/// Central-difference gradient of `f` at `x`, one perturbation per coordinate.
pub fn central_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut grad = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad).expect("finite-difference gradient")
}

/// Max over coordinates of |a − b| / max(|a|, |b|, floor).
pub fn max_rel_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape(), "rel-error operands must match");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::{Graph, StreamRng};

    #[test]
    fn quadratic_gradient_recovered() {
        let x = Tensor::vector(vec![1.5, -0.5]).unwrap();
        let g = central_diff_grad(
            |t| t.data().iter().map(|v| v * v).sum::<f64>(),
            &x,
            1e-5,
        );
        assert!((g.data()[0] - 3.0).abs() < 1e-8);
        assert!((g.data()[1] + 1.0).abs() < 1e-8);
    }

    #[test]
    fn two_layer_perceptron_autodiff_matches_central_differences() {
        // random 2-layer perceptron, loss = mean-square; oracle h = 1e-5
        let mut rng = StreamRng::from_seed(101);
        let (n_in, n_hid, n_out) = (4, 6, 3);
        let w1: Vec<f64> = (0..n_in * n_hid).map(|_| 0.5 * rng.standard_normal()).collect();
        let w2: Vec<f64> = (0..n_hid * n_out).map(|_| 0.5 * rng.standard_normal()).collect();
        let x: Vec<f64> = (0..n_in).map(|_| rng.standard_normal()).collect();
        let target: Vec<f64> = (0..n_out).map(|_| rng.standard_normal()).collect();

        let loss_of = |w1t: &Tensor, w2t: &Tensor| -> (f64, Option<(Tensor, Tensor)>) {
            let mut g = Graph::new();
            let xi = g.input(Tensor::matrix(1, n_in, x.clone()).unwrap()).unwrap();
            let w1i = g.input(w1t.clone()).unwrap();
            let w2i = g.input(w2t.clone()).unwrap();
            let h1 = g.matmul(xi, w1i).unwrap();
            let h1 = g.tanh(h1).unwrap();
            let out = g.matmul(h1, w2i).unwrap();
            let ti = g.input(Tensor::matrix(1, n_out, target.clone()).unwrap()).unwrap();
            let d = g.sub(out, ti).unwrap();
            let sq = g.mul(d, d).unwrap();
            let loss = g.mean_all(sq).unwrap();
            let val = g.value(loss).item().unwrap();
            let bw = g.backward(loss).unwrap();
            let g1 = bw.grad_of(&g, w1i).unwrap();
            let g2 = bw.grad_of(&g, w2i).unwrap();
            (val, Some((g1, g2)))
        };

        let w1t = Tensor::matrix(n_in, n_hid, w1).unwrap();
        let w2t = Tensor::matrix(n_hid, n_out, w2).unwrap();
        let (_, grads) = loss_of(&w1t, &w2t);
        let (g1, g2) = grads.unwrap();

        let fd1 = central_diff_grad(|w| loss_of(w, &w2t).0, &w1t, 1e-5);
        let fd2 = central_diff_grad(|w| loss_of(&w1t, w).0, &w2t, 1e-5);
        assert!(max_rel_error(&g1, &fd1, 1e-6) < 1e-4);
        assert!(max_rel_error(&g2, &fd2, 1e-6) < 1e-4);
    }
}
