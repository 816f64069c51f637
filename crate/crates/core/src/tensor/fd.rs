//! Central-finite-difference utilities for validating analytic gradients.

use ndarray::ArrayD;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_EPS: f64 = 1e-6;

/// Central difference of a scalar function at the flat indices `at`.
pub fn central_diff_at<F>(x: &ArrayD<f64>, at: &[usize], eps: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&ArrayD<f64>) -> f64,
{
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(at.len());
    for &idx in at {
        let orig = probe.as_slice_mut().unwrap()[idx];
        probe.as_slice_mut().unwrap()[idx] = orig + eps;
        let fp = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig - eps;
        let fm = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig;
        out.push((fp - fm) / (2.0 * eps));
    }
    out
}

/// Picks up to `count` distinct flat indices of an array.
pub fn sample_indices(len: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if len <= count {
        return (0..len).collect();
    }
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut rng);
    idx.truncate(count);
    idx.sort_unstable();
    idx
}

/// Relative-error acceptance between an analytic and a numeric derivative.
pub fn grad_close(analytic: f64, numeric: f64, rtol: f64, atol: f64) -> bool {
    (analytic - numeric).abs() <= atol + rtol * analytic.abs().max(numeric.abs())
}

/// Checks the analytic gradient of `f` w.r.t. one input against central
/// differences on sampled coordinates. `f` must rebuild the computation from
/// plain arrays; `analytic` is the gradient produced by the tape for the same
/// input. Panics with context on the first mismatch.
pub fn assert_grad_matches<F>(
    name: &str,
    x: &ArrayD<f64>,
    analytic: &ArrayD<f64>,
    samples: usize,
    seed: u64,
    rtol: f64,
    atol: f64,
    f: F,
) where
    F: FnMut(&ArrayD<f64>) -> f64,
{
    assert_eq!(
        x.shape(),
        analytic.shape(),
        "{name}: gradient shape mismatch"
    );
    let at = sample_indices(x.len(), samples, seed);
    let numeric = central_diff_at(x, &at, DEFAULT_EPS, f);
    let flat = analytic.as_standard_layout();
    let flat = flat.as_slice().unwrap();
    for (&idx, &num) in at.iter().zip(numeric.iter()) {
        let ana = flat[idx];
        assert!(
            grad_close(ana, num, rtol, atol),
            "{name}: grad mismatch at flat index {idx}: analytic={ana:.9e} numeric={num:.9e}"
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{backward, ops, Tape, Var};
    use ndarray::{ArrayD, IxDyn};

    fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen::<f64>() * 2.0 - 1.0)
    }

    /// One-input scalar graph checker used across op tests.
    fn check_unary<G>(name: &str, shape: &[usize], seed: u64, build: G)
    where
        G: Fn(&std::rc::Rc<Tape>, &Var) -> Var,
    {
        let x = randn(shape, seed);
        let tape = Tape::new();
        let vx = Var::leaf(&tape, x.clone());
        let out = build(&tape, &vx);
        let grads = backward(&out);
        let analytic = grads.get(&vx).unwrap().clone();
        assert_grad_matches(name, &x, &analytic, 12, seed ^ 0xabc, 1e-5, 1e-9, |probe| {
            let t = Tape::new();
            let v = Var::leaf(&t, probe.clone());
            build(&t, &v).scalar()
        });
    }

    #[test]
    fn grad_elementwise_chain() {
        check_unary("relu_exp_sum", &[3, 4], 11, |_, v| {
            ops::sum_all(&ops::exp(&ops::scale(&ops::relu(v), 0.3)))
        });
    }

    #[test]
    fn grad_broadcast_mul_div() {
        let a = randn(&[3, 4, 5], 21);
        let b = randn(&[3, 4, 1], 22).mapv(|v| v + 3.0);
        let run = |av: &ArrayD<f64>, bv: &ArrayD<f64>| -> (f64, ArrayD<f64>, ArrayD<f64>) {
            let t = Tape::new();
            let va = Var::leaf(&t, av.clone());
            let vb = Var::leaf(&t, bv.clone());
            let out = ops::sum_all(&ops::div(&ops::mul(&va, &vb), &ops::add_scalar(&vb, 1.0)));
            let g = backward(&out);
            (
                out.scalar(),
                g.get(&va).unwrap().clone(),
                g.get(&vb).unwrap().clone(),
            )
        };
        let (_, ga, gb) = run(&a, &b);
        assert_grad_matches("bcast_a", &a, &ga, 10, 1, 1e-5, 1e-9, |p| run(p, &b).0);
        assert_grad_matches("bcast_b", &b, &gb, 10, 2, 1e-5, 1e-9, |p| run(&a, p).0);
    }

    #[test]
    fn grad_shape_ops() {
        check_unary("narrow_concat_slice", &[4, 3, 3], 31, |_, v| {
            let a = ops::narrow0(v, 0, 2);
            let b = ops::narrow0(v, 2, 2);
            let cat = ops::concat0(&[&b, &a]);
            let sl = ops::slice_index_last(&cat, 1);
            ops::sum_all(&ops::mul(&sl, &sl))
        });
    }

    #[test]
    fn grad_shift_upsample() {
        check_unary("shift_up", &[2, 4, 4], 41, |_, v| {
            let s = ops::shift2d(v, 1, -1);
            let u = ops::upsample2(&s);
            ops::sum_all(&ops::mul(&u, &u))
        });
    }

    #[test]
    fn grad_conv2d_all_inputs() {
        let x = randn(&[3, 6, 5], 51);
        let w = randn(&[4, 3, 3, 3], 52).mapv(|v| v * 0.3);
        let b = randn(&[4], 53);
        let run = |xv: &ArrayD<f64>,
                   wv: &ArrayD<f64>,
                   bv: &ArrayD<f64>|
         -> (f64, ArrayD<f64>, ArrayD<f64>, ArrayD<f64>) {
            let t = Tape::new();
            let vx = Var::leaf(&t, xv.clone());
            let vw = Var::leaf(&t, wv.clone());
            let vb = Var::leaf(&t, bv.clone());
            let out = ops::conv2d(&vx, &vw, &vb, 2, 1);
            let s = ops::sum_all(&ops::mul(&out, &out));
            let g = backward(&s);
            (
                s.scalar(),
                g.get(&vx).unwrap().clone(),
                g.get(&vw).unwrap().clone(),
                g.get(&vb).unwrap().clone(),
            )
        };
        let (_, gx, gw, gb) = run(&x, &w, &b);
        assert_grad_matches("conv_x", &x, &gx, 12, 3, 1e-5, 1e-9, |p| run(p, &w, &b).0);
        assert_grad_matches("conv_w", &w, &gw, 12, 4, 1e-5, 1e-9, |p| run(&x, p, &b).0);
        assert_grad_matches("conv_b", &b, &gb, 4, 5, 1e-5, 1e-9, |p| run(&x, &w, p).0);
    }

    #[test]
    fn grad_bilinear_sample() {
        let f = randn(&[2, 6, 6], 61);
        // keep coordinates strictly interior so clamping stays inactive
        let coords = randn(&[2, 4, 4], 62).mapv(|v| 2.5 + 1.8 * v);
        let run = |fv: &ArrayD<f64>, cv: &ArrayD<f64>| -> (f64, ArrayD<f64>, ArrayD<f64>) {
            let t = Tape::new();
            let vf = Var::leaf(&t, fv.clone());
            let vc = Var::leaf(&t, cv.clone());
            let out = ops::bilinear_sample(&vf, &vc);
            let s = ops::sum_all(&ops::mul(&out, &out));
            let g = backward(&s);
            (
                s.scalar(),
                g.get(&vf).unwrap().clone(),
                g.get(&vc).unwrap().clone(),
            )
        };
        let (_, gf, gc) = run(&f, &coords);
        assert_grad_matches("bilin_f", &f, &gf, 12, 6, 1e-5, 1e-9, |p| run(p, &coords).0);
        assert_grad_matches("bilin_c", &coords, &gc, 12, 7, 1e-4, 1e-8, |p| run(&f, p).0);
    }

    #[test]
    fn grad_cosine_volume() {
        let a = randn(&[3, 5, 4], 71);
        let b = randn(&[3, 5, 4], 72);
        let run = |av: &ArrayD<f64>, bv: &ArrayD<f64>| -> (f64, ArrayD<f64>, ArrayD<f64>) {
            let t = Tape::new();
            let va = Var::leaf(&t, av.clone());
            let vb = Var::leaf(&t, bv.clone());
            let vol = ops::cosine_volume(&va, &vb, 1);
            let s = ops::sum_all(&ops::mul(&vol, &vol));
            let g = backward(&s);
            (
                s.scalar(),
                g.get(&va).unwrap().clone(),
                g.get(&vb).unwrap().clone(),
            )
        };
        let (_, ga, gb) = run(&a, &b);
        assert_grad_matches("cosvol_a", &a, &ga, 12, 8, 1e-4, 1e-8, |p| run(p, &b).0);
        assert_grad_matches("cosvol_b", &b, &gb, 12, 9, 1e-4, 1e-8, |p| run(&a, p).0);
    }

    #[test]
    fn grad_sqdist_and_box_sum() {
        let a = randn(&[2, 5, 5], 81);
        let b = randn(&[2, 5, 5], 82);
        let run = |av: &ArrayD<f64>, bv: &ArrayD<f64>| -> (f64, ArrayD<f64>, ArrayD<f64>) {
            let t = Tape::new();
            let va = Var::leaf(&t, av.clone());
            let vb = Var::leaf(&t, bv.clone());
            let vol = ops::sqdist_volume(&va, &vb, 1);
            let agg = ops::box_sum_replicate(&vol, 1);
            let s = ops::sum_all(&ops::exp(&ops::scale(&agg, -0.1)));
            let g = backward(&s);
            (
                s.scalar(),
                g.get(&va).unwrap().clone(),
                g.get(&vb).unwrap().clone(),
            )
        };
        let (_, ga, gb) = run(&a, &b);
        assert_grad_matches("sqbox_a", &a, &ga, 12, 10, 1e-4, 1e-8, |p| run(p, &b).0);
        assert_grad_matches("sqbox_b", &b, &gb, 12, 11, 1e-4, 1e-8, |p| run(&a, p).0);
    }

    #[test]
    fn grad_reductions_and_clamps() {
        check_unary("sum_last_max", &[3, 3, 4], 91, |_, v| {
            let m = ops::max_scalar(v, 0.2);
            let s = ops::sum_last_axis(&m);
            ops::sum_all(&ops::mul(&s, &s))
        });
        check_unary("ln_sqrt", &[2, 5], 92, |_, v| {
            let pos = ops::add_scalar(&ops::mul(v, v), 0.5);
            ops::sum_all(&ops::ln(&ops::sqrt(&pos)))
        });
    }
}
