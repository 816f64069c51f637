//! im2col/col2im plumbing for the convolution op.

use ndarray::{Array2, Array3, ArrayView3};

pub fn conv_out_size(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Unfolds `(Cin, H, W)` into `(Cin*kh*kw, Ho*Wo)` with zero padding.
pub fn im2col(
    input: &ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let (cin, h, w) = input.dim();
    let ho = conv_out_size(h, kh, stride, pad);
    let wo = conv_out_size(w, kw, stride, pad);
    let mut cols = Array2::<f64>::zeros((cin * kh * kw, ho * wo));
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let mut out_row = cols.row_mut(row);
                for oy in 0..ho {
                    let y = (oy * stride + ky) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let x = (ox * stride + kx) as isize - pad as isize;
                        if x < 0 || x >= w as isize {
                            continue;
                        }
                        out_row[oy * wo + ox] = input[(c, y as usize, x as usize)];
                    }
                }
            }
        }
    }
    cols
}

/// Transpose of [`im2col`]: folds `(Cin*kh*kw, Ho*Wo)` gradients back onto the
/// input grid, accumulating where patches overlap.
#[allow(clippy::too_many_arguments)]
pub fn col2im(
    cols: &Array2<f64>,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let ho = conv_out_size(h, kh, stride, pad);
    let wo = conv_out_size(w, kw, stride, pad);
    let mut out = Array3::<f64>::zeros((cin, h, w));
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let in_row = cols.row(row);
                for oy in 0..ho {
                    let y = (oy * stride + ky) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let x = (ox * stride + kx) as isize - pad as isize;
                        if x < 0 || x >= w as isize {
                            continue;
                        }
                        out[(c, y as usize, x as usize)] += in_row[oy * wo + ox];
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn im2col_identity_kernel() {
        let input = Array3::from_shape_fn((2, 3, 3), |(c, y, x)| (c * 9 + y * 3 + x) as f64);
        let cols = im2col(&input.view(), 1, 1, 1, 0);
        assert_eq!(cols.dim(), (2, 9));
        assert_eq!(cols[(1, 4)], input[(1, 1, 1)]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y.
        use rand::prelude::*;
        let mut rng = StdRng::seed_from_u64(7);
        let x = Array3::from_shape_fn((2, 5, 4), |_| rng.gen::<f64>() - 0.5);
        let (kh, kw, s, p) = (3, 3, 2, 1);
        let cols = im2col(&x.view(), kh, kw, s, p);
        let y = Array2::from_shape_fn(cols.dim(), |_| rng.gen::<f64>() - 0.5);
        let lhs: f64 = (&cols * &y).sum();
        let folded = col2im(&y, 2, 5, 4, kh, kw, s, p);
        let rhs: f64 = (&x * &folded).sum();
        assert!((lhs - rhs).abs() < 1e-10, "lhs={lhs} rhs={rhs}");
    }

    use ndarray::Array2;
}
