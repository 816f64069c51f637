//! Differentiable operations over [`Var`]s.
//!
//! Binary ops broadcast NumPy-style but require equal rank (insert size-1
//! axes explicitly). Backward closures capture shared handles to the values
//! they need; every op's gradient is covered by finite-difference tests.

use super::conv::{col2im, conv_out_size, im2col};
use super::tape::{Tape, Var};
use ndarray::{Array2, ArrayD, Axis, IxDyn, Slice, Zip};
use std::rc::Rc;

/// Below this, a feature vector is treated as zero-norm and scores 0.
const NORM_EPS: f64 = 1e-12;

pub fn constant(tape: &Rc<Tape>, value: ArrayD<f64>) -> Var {
    Var::leaf(tape, value)
}

pub fn scalar_const(tape: &Rc<Tape>, value: f64) -> Var {
    Var::leaf(tape, ArrayD::from_elem(IxDyn(&[]), value))
}

// ---------------------------------------------------------------------------
// broadcasting helpers

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    assert_eq!(
        a.len(),
        b.len(),
        "broadcast requires equal rank: {a:?} vs {b:?}"
    );
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            if x == y {
                x
            } else if x == 1 {
                y
            } else if y == 1 {
                x
            } else {
                panic!("incompatible broadcast dims: {a:?} vs {b:?}")
            }
        })
        .collect()
}

fn broadcast_zip(a: &ArrayD<f64>, b: &ArrayD<f64>, f: impl Fn(f64, f64) -> f64) -> ArrayD<f64> {
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).unwrap();
    let bv = b.broadcast(IxDyn(&shape)).unwrap();
    let mut out = ArrayD::<f64>::zeros(IxDyn(&shape));
    Zip::from(&mut out)
        .and(&av)
        .and(&bv)
        .for_each(|o, &x, &y| *o = f(x, y));
    out
}

/// Sums `grad` over the axes that were broadcast to reach `grad`'s shape.
fn reduce_to(grad: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut g = grad.clone();
    for ax in 0..shape.len() {
        if shape[ax] == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

// ---------------------------------------------------------------------------
// elementwise binary

pub fn add(a: &Var, b: &Var) -> Var {
    let out = broadcast_zip(a.value(), b.value(), |x, y| x + y);
    let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
    Var::from_op(
        a.tape(),
        out,
        vec![a, b],
        Box::new(move |g| vec![reduce_to(g, &sa), reduce_to(g, &sb)]),
    )
}

pub fn sub(a: &Var, b: &Var) -> Var {
    let out = broadcast_zip(a.value(), b.value(), |x, y| x - y);
    let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
    Var::from_op(
        a.tape(),
        out,
        vec![a, b],
        Box::new(move |g| vec![reduce_to(g, &sa), reduce_to(&g.mapv(|x| -x), &sb)]),
    )
}

pub fn mul(a: &Var, b: &Var) -> Var {
    let out = broadcast_zip(a.value(), b.value(), |x, y| x * y);
    let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
    let (av, bv) = (a.value_rc(), b.value_rc());
    Var::from_op(
        a.tape(),
        out,
        vec![a, b],
        Box::new(move |g| {
            let ga = broadcast_zip(g, &bv, |x, y| x * y);
            let gb = broadcast_zip(g, &av, |x, y| x * y);
            vec![reduce_to(&ga, &sa), reduce_to(&gb, &sb)]
        }),
    )
}

pub fn div(a: &Var, b: &Var) -> Var {
    let out = broadcast_zip(a.value(), b.value(), |x, y| x / y);
    let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
    let (av, bv) = (a.value_rc(), b.value_rc());
    Var::from_op(
        a.tape(),
        out,
        vec![a, b],
        Box::new(move |g| {
            let ga = broadcast_zip(g, &bv, |x, y| x / y);
            let gb_full = {
                let t = broadcast_zip(&av, &bv, |x, y| -x / (y * y));
                broadcast_zip(g, &t, |x, y| x * y)
            };
            vec![reduce_to(&ga, &sa), reduce_to(&gb_full, &sb)]
        }),
    )
}

// ---------------------------------------------------------------------------
// scalar-parameter and unary

pub fn scale(a: &Var, c: f64) -> Var {
    let out = a.value().mapv(|x| x * c);
    Var::from_op(
        a.tape(),
        out,
        vec![a],
        Box::new(move |g| vec![g.mapv(|x| x * c)]),
    )
}

pub fn add_scalar(a: &Var, c: f64) -> Var {
    let out = a.value().mapv(|x| x + c);
    Var::from_op(a.tape(), out, vec![a], Box::new(move |g| vec![g.clone()]))
}

pub fn neg(a: &Var) -> Var {
    scale(a, -1.0)
}

fn unary(a: &Var, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var {
    let out = a.value().mapv(&f);
    let av = a.value_rc();
    let ov = Rc::new(out.clone());
    Var::from_op(
        a.tape(),
        out,
        vec![a],
        Box::new(move |g| {
            let mut ga = g.clone();
            Zip::from(&mut ga)
                .and(&*av)
                .and(&*ov)
                .for_each(|gi, &x, &y| *gi *= df(x, y));
            vec![ga]
        }),
    )
}

pub fn relu(a: &Var) -> Var {
    unary(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
}

pub fn exp(a: &Var) -> Var {
    unary(a, f64::exp, |_, y| y)
}

/// Natural log; caller guarantees strictly positive input.
pub fn ln(a: &Var) -> Var {
    unary(a, f64::ln, |x, _| 1.0 / x)
}

pub fn sqrt(a: &Var) -> Var {
    unary(a, f64::sqrt, |_, y| if y > 0.0 { 0.5 / y } else { 0.0 })
}

/// Elementwise `max(x, c)`; gradient passes only where `x > c`.
pub fn max_scalar(a: &Var, c: f64) -> Var {
    unary(a, move |x| x.max(c), move |x, _| if x > c { 1.0 } else { 0.0 })
}

/// Elementwise `min(x, c)`; gradient passes only where `x < c`.
pub fn min_scalar(a: &Var, c: f64) -> Var {
    unary(a, move |x| x.min(c), move |x, _| if x < c { 1.0 } else { 0.0 })
}

/// Clamp into `[0, 1]`; gradient passes strictly inside the interval.
pub fn clamp01(a: &Var) -> Var {
    unary(
        a,
        |x| x.clamp(0.0, 1.0),
        |x, _| if x > 0.0 && x < 1.0 { 1.0 } else { 0.0 },
    )
}

// ---------------------------------------------------------------------------
// reductions

pub fn sum_all(a: &Var) -> Var {
    let s = a.value().sum();
    let shape = a.shape().to_vec();
    Var::from_op(
        a.tape(),
        ArrayD::from_elem(IxDyn(&[]), s),
        vec![a],
        Box::new(move |g| {
            let gs = *g.iter().next().unwrap();
            vec![ArrayD::from_elem(IxDyn(&shape), gs)]
        }),
    )
}

pub fn mean_all(a: &Var) -> Var {
    let n = a.value().len() as f64;
    scale(&sum_all(a), 1.0 / n)
}

/// Sums out the trailing axis: `(..., M) -> (...)`.
pub fn sum_last_axis(a: &Var) -> Var {
    let nd = a.shape().len();
    let out = a.value().sum_axis(Axis(nd - 1));
    let shape = a.shape().to_vec();
    Var::from_op(
        a.tape(),
        out,
        vec![a],
        Box::new(move |g| {
            let expanded = g.clone().insert_axis(Axis(shape.len() - 1));
            let gb = expanded
                .broadcast(IxDyn(&shape))
                .unwrap()
                .to_owned()
                .into_dyn();
            vec![gb]
        }),
    )
}

// ---------------------------------------------------------------------------
// shape ops

pub fn reshape(a: &Var, shape: &[usize]) -> Var {
    let out = a
        .value()
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order(IxDyn(shape))
        .expect("reshape: element count mismatch");
    let old = a.shape().to_vec();
    Var::from_op(
        a.tape(),
        out,
        vec![a],
        Box::new(move |g| {
            vec![g
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order(IxDyn(&old))
                .unwrap()]
        }),
    )
}

pub fn insert_last_axis(a: &Var) -> Var {
    let mut s = a.shape().to_vec();
    s.push(1);
    reshape(a, &s)
}

pub fn insert_axis0(a: &Var) -> Var {
    let mut s = vec![1];
    s.extend_from_slice(a.shape());
    reshape(a, &s)
}

/// Slice `[start, start+len)` along axis 0.
pub fn narrow0(a: &Var, start: usize, len: usize) -> Var {
    let out = a
        .value()
        .slice_axis(Axis(0), Slice::from(start..start + len))
        .to_owned();
    let shape = a.shape().to_vec();
    Var::from_op(
        a.tape(),
        out,
        vec![a],
        Box::new(move |g| {
            let mut full = ArrayD::<f64>::zeros(IxDyn(&shape));
            full.slice_axis_mut(Axis(0), Slice::from(start..start + len))
                .assign(g);
            vec![full]
        }),
    )
}

pub fn concat0(parts: &[&Var]) -> Var {
    assert!(!parts.is_empty());
    let views: Vec<_> = parts.iter().map(|p| p.value().view()).collect();
    let out = ndarray::concatenate(Axis(0), &views).expect("concat0 shape mismatch");
    let lens: Vec<usize> = parts.iter().map(|p| p.shape()[0]).collect();
    Var::from_op(
        parts[0].tape(),
        out,
        parts.to_vec(),
        Box::new(move |g| {
            let mut grads = Vec::with_capacity(lens.len());
            let mut at = 0;
            for &l in &lens {
                grads.push(
                    g.slice_axis(Axis(0), Slice::from(at..at + l))
                        .to_owned()
                        .into_dyn(),
                );
                at += l;
            }
            grads
        }),
    )
}

/// Picks index `k` of the trailing axis: `(..., M) -> (...)`.
pub fn slice_index_last(a: &Var, k: usize) -> Var {
    let nd = a.shape().len();
    let out = a.value().index_axis(Axis(nd - 1), k).to_owned();
    let shape = a.shape().to_vec();
    Var::from_op(
        a.tape(),
        out,
        vec![a],
        Box::new(move |g| {
            let mut full = ArrayD::<f64>::zeros(IxDyn(&shape));
            full.index_axis_mut(Axis(shape.len() - 1), k).assign(g);
            vec![full]
        }),
    )
}

// ---------------------------------------------------------------------------
// spatial ops

fn shifted(arr: &ArrayD<f64>, dy: isize, dx: isize) -> ArrayD<f64> {
    let nd = arr.ndim();
    assert!(nd >= 2);
    let (h, w) = (arr.shape()[nd - 2], arr.shape()[nd - 1]);
    let mut out = ArrayD::<f64>::zeros(arr.raw_dim());
    let y_lo = (-dy).max(0) as usize;
    let y_hi = ((h as isize - dy).min(h as isize)).max(0) as usize;
    let x_lo = (-dx).max(0) as usize;
    let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
    if y_lo >= y_hi || x_lo >= x_hi {
        return out;
    }
    let src = arr
        .slice_axis(Axis(nd - 2), Slice::from((y_lo as isize + dy)..(y_hi as isize + dy)))
        .slice_axis(Axis(nd - 1), Slice::from((x_lo as isize + dx)..(x_hi as isize + dx)))
        .to_owned();
    out.slice_axis_mut(Axis(nd - 2), Slice::from(y_lo..y_hi))
        .slice_axis_mut(Axis(nd - 1), Slice::from(x_lo..x_hi))
        .assign(&src);
    out
}

/// `out[..., y, x] = a[..., y+dy, x+dx]`, zero where the source leaves the
/// grid. Operates on the two trailing axes.
pub fn shift2d(a: &Var, dy: isize, dx: isize) -> Var {
    let out = shifted(a.value(), dy, dx);
    Var::from_op(
        a.tape(),
        out,
        vec![a],
        Box::new(move |g| vec![shifted(g, -dy, -dx)]),
    )
}

/// Nearest-neighbor 2x upsample of `(C, H, W)`.
pub fn upsample2(a: &Var) -> Var {
    let v = a.value();
    assert_eq!(v.ndim(), 3);
    let (c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[c, 2 * h, 2 * w]));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let val = v[[ci, y, x]];
                out[[ci, 2 * y, 2 * x]] = val;
                out[[ci, 2 * y + 1, 2 * x]] = val;
                out[[ci, 2 * y, 2 * x + 1]] = val;
                out[[ci, 2 * y + 1, 2 * x + 1]] = val;
            }
        }
    }
    Var::from_op(
        a.tape(),
        out,
        vec![a],
        Box::new(move |g| {
            let mut gin = ArrayD::<f64>::zeros(IxDyn(&[c, h, w]));
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        gin[[ci, y, x]] = g[[ci, 2 * y, 2 * x]]
                            + g[[ci, 2 * y + 1, 2 * x]]
                            + g[[ci, 2 * y, 2 * x + 1]]
                            + g[[ci, 2 * y + 1, 2 * x + 1]];
                    }
                }
            }
            vec![gin]
        }),
    )
}

/// 2x2 max pooling (stride 2) of `(C, H, W)`; gradient routes to the argmax.
pub fn maxpool2(a: &Var) -> Var {
    let v = a.value();
    assert_eq!(v.ndim(), 3);
    let (c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
    assert!(h % 2 == 0 && w % 2 == 0, "maxpool2 requires even sides");
    let (ho, wo) = (h / 2, w / 2);
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[c, ho, wo]));
    let mut argmax = vec![0u8; c * ho * wo];
    for ci in 0..c {
        for y in 0..ho {
            for x in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0u8;
                for (k, (oy, ox)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                    let val = v[[ci, 2 * y + oy, 2 * x + ox]];
                    if val > best {
                        best = val;
                        arg = k as u8;
                    }
                }
                out[[ci, y, x]] = best;
                argmax[(ci * ho + y) * wo + x] = arg;
            }
        }
    }
    Var::from_op(
        a.tape(),
        out,
        vec![a],
        Box::new(move |g| {
            let mut gin = ArrayD::<f64>::zeros(IxDyn(&[c, h, w]));
            let offs = [(0, 0), (0, 1), (1, 0), (1, 1)];
            for ci in 0..c {
                for y in 0..ho {
                    for x in 0..wo {
                        let (oy, ox) = offs[argmax[(ci * ho + y) * wo + x] as usize];
                        gin[[ci, 2 * y + oy, 2 * x + ox]] += g[[ci, y, x]];
                    }
                }
            }
            vec![gin]
        }),
    )
}

// ---------------------------------------------------------------------------
// convolution

/// 2-D convolution: input `(Cin, H, W)`, weight `(Cout, Cin, kh, kw)`,
/// bias `(Cout,)`, zero padding.
pub fn conv2d(input: &Var, weight: &Var, bias: &Var, stride: usize, pad: usize) -> Var {
    let iv = input.value();
    let wv = weight.value();
    assert_eq!(iv.ndim(), 3, "conv2d input must be (Cin,H,W)");
    assert_eq!(wv.ndim(), 4, "conv2d weight must be (Cout,Cin,kh,kw)");
    let (cin, h, w) = (iv.shape()[0], iv.shape()[1], iv.shape()[2]);
    let (cout, wcin, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
    assert_eq!(cin, wcin, "conv2d channel mismatch");
    let ho = conv_out_size(h, kh, stride, pad);
    let wo = conv_out_size(w, kw, stride, pad);

    let iv3 = iv.view().into_dimensionality::<ndarray::Ix3>().unwrap();
    let cols = im2col(&iv3, kh, kw, stride, pad);
    let wmat = wv
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((cout, cin * kh * kw))
        .unwrap();
    let mut out2: Array2<f64> = wmat.dot(&cols);
    let bv = bias.value();
    for (mut row, &b) in out2.rows_mut().into_iter().zip(bv.iter()) {
        row.mapv_inplace(|x| x + b);
    }
    let out = out2
        .into_shape_with_order((cout, ho, wo))
        .unwrap()
        .into_dyn();

    let cols_rc = Rc::new(cols);
    let wmat_rc = Rc::new(wmat);
    Var::from_op(
        input.tape(),
        out,
        vec![input, weight, bias],
        Box::new(move |g| {
            let gmat = g
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order((cout, ho * wo))
                .unwrap();
            let dw = gmat
                .dot(&cols_rc.t())
                .into_shape_with_order((cout, cin, kh, kw))
                .unwrap()
                .into_dyn();
            let db = gmat.sum_axis(Axis(1)).into_dyn();
            let dcols = wmat_rc.t().dot(&gmat);
            let dinput = col2im(&dcols, cin, h, w, kh, kw, stride, pad).into_dyn();
            vec![dinput, dw, db]
        }),
    )
}

// ---------------------------------------------------------------------------
// bilinear sampling

/// Samples `f` `(C, H, W)` at continuous positions `coords` `(2, Hc, Wc)`
/// (plane 0 = x, plane 1 = y). Positions clamp to the border; the coordinate
/// gradient is zero wherever clamping was active.
pub fn bilinear_sample(f: &Var, coords: &Var) -> Var {
    let fv = f.value();
    let cv = coords.value();
    assert_eq!(fv.ndim(), 3);
    assert_eq!(cv.ndim(), 3);
    assert_eq!(cv.shape()[0], 2, "coords must be (2,Hc,Wc)");
    let (c, h, w) = (fv.shape()[0], fv.shape()[1], fv.shape()[2]);
    let (hc, wc) = (cv.shape()[1], cv.shape()[2]);

    let sample = |fv: &ArrayD<f64>, cv: &ArrayD<f64>| -> ArrayD<f64> {
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[c, hc, wc]));
        for y in 0..hc {
            for x in 0..wc {
                let cx = cv[[0, y, x]].clamp(0.0, (w - 1) as f64);
                let cy = cv[[1, y, x]].clamp(0.0, (h - 1) as f64);
                let x0 = cx.floor() as usize;
                let y0 = cy.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                let wx = cx - x0 as f64;
                let wy = cy - y0 as f64;
                for ci in 0..c {
                    out[[ci, y, x]] = (1.0 - wy)
                        * ((1.0 - wx) * fv[[ci, y0, x0]] + wx * fv[[ci, y0, x1]])
                        + wy * ((1.0 - wx) * fv[[ci, y1, x0]] + wx * fv[[ci, y1, x1]]);
                }
            }
        }
        out
    };

    let out = sample(fv, cv);
    let f_rc = f.value_rc();
    let c_rc = coords.value_rc();
    Var::from_op(
        f.tape(),
        out,
        vec![f, coords],
        Box::new(move |g| {
            let mut gf = ArrayD::<f64>::zeros(IxDyn(&[c, h, w]));
            let mut gc = ArrayD::<f64>::zeros(IxDyn(&[2, hc, wc]));
            for y in 0..hc {
                for x in 0..wc {
                    let rx = c_rc[[0, y, x]];
                    let ry = c_rc[[1, y, x]];
                    let cx = rx.clamp(0.0, (w - 1) as f64);
                    let cy = ry.clamp(0.0, (h - 1) as f64);
                    let x0 = cx.floor() as usize;
                    let y0 = cy.floor() as usize;
                    let x1 = (x0 + 1).min(w - 1);
                    let y1 = (y0 + 1).min(h - 1);
                    let wx = cx - x0 as f64;
                    let wy = cy - y0 as f64;
                    let x_free = rx > 0.0 && rx < (w - 1) as f64;
                    let y_free = ry > 0.0 && ry < (h - 1) as f64;
                    let (mut dx_acc, mut dy_acc) = (0.0, 0.0);
                    for ci in 0..c {
                        let go = g[[ci, y, x]];
                        if go == 0.0 {
                            continue;
                        }
                        gf[[ci, y0, x0]] += go * (1.0 - wy) * (1.0 - wx);
                        gf[[ci, y0, x1]] += go * (1.0 - wy) * wx;
                        gf[[ci, y1, x0]] += go * wy * (1.0 - wx);
                        gf[[ci, y1, x1]] += go * wy * wx;
                        let f00 = f_rc[[ci, y0, x0]];
                        let f01 = f_rc[[ci, y0, x1]];
                        let f10 = f_rc[[ci, y1, x0]];
                        let f11 = f_rc[[ci, y1, x1]];
                        dx_acc += go * ((1.0 - wy) * (f01 - f00) + wy * (f11 - f10));
                        dy_acc += go * ((1.0 - wx) * (f10 - f00) + wx * (f11 - f01));
                    }
                    if x_free {
                        gc[[0, y, x]] = dx_acc;
                    }
                    if y_free {
                        gc[[1, y, x]] = dy_acc;
                    }
                }
            }
            vec![gf, gc]
        }),
    )
}

// ---------------------------------------------------------------------------
// window volumes

/// Offsets of a `(2r+1)^2` window in row-major order (dy outer, dx inner).
pub fn window_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::with_capacity((2 * radius + 1).pow(2));
    for dy in -r..=r {
        for dx in -r..=r {
            out.push((dy, dx));
        }
    }
    out
}

/// Index of the zero displacement within [`window_offsets`].
pub fn window_center(radius: usize) -> usize {
    let side = 2 * radius + 1;
    (side * side) / 2
}

/// `(H, W, M)` 0/1 mask: entry `(i, m)` is 1 iff `i + m` lies on the grid.
pub fn window_validity(h: usize, w: usize, radius: usize) -> ArrayD<f64> {
    let offs = window_offsets(radius);
    let mut mask = ArrayD::<f64>::zeros(IxDyn(&[h, w, offs.len()]));
    for y in 0..h {
        for x in 0..w {
            for (mi, &(dy, dx)) in offs.iter().enumerate() {
                let py = y as isize + dy;
                let px = x as isize + dx;
                if py >= 0 && py < h as isize && px >= 0 && px < w as isize {
                    mask[[y, x, mi]] = 1.0;
                }
            }
        }
    }
    mask
}

fn norms_hw(v: &ArrayD<f64>) -> Array2<f64> {
    let (c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for ci in 0..c {
                let e = v[[ci, y, x]];
                s += e * e;
            }
            out[[y, x]] = s.sqrt();
        }
    }
    out
}

/// Cosine-similarity window volume: `out(i, m) = cos(a_i, b_{i+m})` for every
/// displacement `m` in the `(2r+1)^2` window; out-of-grid entries and
/// zero-norm vectors score 0.
pub fn cosine_volume(a: &Var, b: &Var, radius: usize) -> Var {
    let av = a.value();
    let bv = b.value();
    assert_eq!(av.shape(), bv.shape(), "cosine_volume shape mismatch");
    let (c, h, w) = (av.shape()[0], av.shape()[1], av.shape()[2]);
    let offs = window_offsets(radius);
    let m = offs.len();
    let na = norms_hw(av);
    let nb = norms_hw(bv);

    let mut out = ArrayD::<f64>::zeros(IxDyn(&[h, w, m]));
    for y in 0..h {
        for x in 0..w {
            if na[[y, x]] <= NORM_EPS {
                continue;
            }
            for (mi, &(dy, dx)) in offs.iter().enumerate() {
                let py = y as isize + dy;
                let px = x as isize + dx;
                if py < 0 || py >= h as isize || px < 0 || px >= w as isize {
                    continue;
                }
                let (py, px) = (py as usize, px as usize);
                if nb[[py, px]] <= NORM_EPS {
                    continue;
                }
                let mut dot = 0.0;
                for ci in 0..c {
                    dot += av[[ci, y, x]] * bv[[ci, py, px]];
                }
                out[[y, x, mi]] = dot / (na[[y, x]] * nb[[py, px]]);
            }
        }
    }

    let a_rc = a.value_rc();
    let b_rc = b.value_rc();
    let out_rc = Rc::new(out.clone());
    Var::from_op(
        a.tape(),
        out,
        vec![a, b],
        Box::new(move |g| {
            let na = norms_hw(&a_rc);
            let nb = norms_hw(&b_rc);
            let mut ga = ArrayD::<f64>::zeros(IxDyn(&[c, h, w]));
            let mut gb = ArrayD::<f64>::zeros(IxDyn(&[c, h, w]));
            for y in 0..h {
                for x in 0..w {
                    let nai = na[[y, x]];
                    if nai <= NORM_EPS {
                        continue;
                    }
                    for (mi, &(dy, dx)) in offs.iter().enumerate() {
                        let go = g[[y, x, mi]];
                        if go == 0.0 {
                            continue;
                        }
                        let py = y as isize + dy;
                        let px = x as isize + dx;
                        if py < 0 || py >= h as isize || px < 0 || px >= w as isize {
                            continue;
                        }
                        let (py, px) = (py as usize, px as usize);
                        let nbp = nb[[py, px]];
                        if nbp <= NORM_EPS {
                            continue;
                        }
                        let cos = out_rc[[y, x, mi]];
                        for ci in 0..c {
                            let ai = a_rc[[ci, y, x]];
                            let bp = b_rc[[ci, py, px]];
                            ga[[ci, y, x]] += go * (bp / (nai * nbp) - cos * ai / (nai * nai));
                            gb[[ci, py, px]] += go * (ai / (nai * nbp) - cos * bp / (nbp * nbp));
                        }
                    }
                }
            }
            vec![ga, gb]
        }),
    )
}

/// Squared-distance window volume:
/// `out(i, m) = || a_i - b_{clamp(i+m)} ||^2` with border-replicate indexing.
pub fn sqdist_volume(a: &Var, b: &Var, radius: usize) -> Var {
    let av = a.value();
    let bv = b.value();
    assert_eq!(av.shape(), bv.shape(), "sqdist_volume shape mismatch");
    let (c, h, w) = (av.shape()[0], av.shape()[1], av.shape()[2]);
    let offs = window_offsets(radius);
    let m = offs.len();

    let clamp_at = |y: isize, hi: usize| -> usize { y.clamp(0, hi as isize - 1) as usize };
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[h, w, m]));
    for y in 0..h {
        for x in 0..w {
            for (mi, &(dy, dx)) in offs.iter().enumerate() {
                let py = clamp_at(y as isize + dy, h);
                let px = clamp_at(x as isize + dx, w);
                let mut s = 0.0;
                for ci in 0..c {
                    let d = av[[ci, y, x]] - bv[[ci, py, px]];
                    s += d * d;
                }
                out[[y, x, mi]] = s;
            }
        }
    }

    let a_rc = a.value_rc();
    let b_rc = b.value_rc();
    Var::from_op(
        a.tape(),
        out,
        vec![a, b],
        Box::new(move |g| {
            let mut ga = ArrayD::<f64>::zeros(IxDyn(&[c, h, w]));
            let mut gb = ArrayD::<f64>::zeros(IxDyn(&[c, h, w]));
            for y in 0..h {
                for x in 0..w {
                    for (mi, &(dy, dx)) in offs.iter().enumerate() {
                        let go = g[[y, x, mi]];
                        if go == 0.0 {
                            continue;
                        }
                        let py = clamp_at(y as isize + dy, h);
                        let px = clamp_at(x as isize + dx, w);
                        for ci in 0..c {
                            let d = a_rc[[ci, y, x]] - b_rc[[ci, py, px]];
                            ga[[ci, y, x]] += go * 2.0 * d;
                            gb[[ci, py, px]] -= go * 2.0 * d;
                        }
                    }
                }
            }
            vec![ga, gb]
        }),
    )
}

/// Spatial box sum over an `(H, W, M)` volume with border-replicate padding:
/// `out(i, m) = sum_{o in [-r,r]^2} in(clamp(i+o), m)`.
pub fn box_sum_replicate(v: &Var, radius: usize) -> Var {
    let vv = v.value();
    assert_eq!(vv.ndim(), 3);
    let (h, w, m) = (vv.shape()[0], vv.shape()[1], vv.shape()[2]);
    let offs = window_offsets(radius);
    let clamp_at = |y: isize, hi: usize| -> usize { y.clamp(0, hi as isize - 1) as usize };

    let mut out = ArrayD::<f64>::zeros(IxDyn(&[h, w, m]));
    for y in 0..h {
        for x in 0..w {
            for &(dy, dx) in &offs {
                let py = clamp_at(y as isize + dy, h);
                let px = clamp_at(x as isize + dx, w);
                for mi in 0..m {
                    out[[y, x, mi]] += vv[[py, px, mi]];
                }
            }
        }
    }
    Var::from_op(
        v.tape(),
        out,
        vec![v],
        Box::new(move |g| {
            let mut gin = ArrayD::<f64>::zeros(IxDyn(&[h, w, m]));
            for y in 0..h {
                for x in 0..w {
                    for &(dy, dx) in &offs {
                        let py = clamp_at(y as isize + dy, h);
                        let px = clamp_at(x as isize + dx, w);
                        for mi in 0..m {
                            gin[[py, px, mi]] += g[[y, x, mi]];
                        }
                    }
                }
            }
            vec![gin]
        }),
    )
}
