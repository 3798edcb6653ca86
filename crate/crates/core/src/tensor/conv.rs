//! 3×3×3 convolution with zero padding 1, lowered to gemm through im2col.

use crate::scalar::Scalar;

/// Output spatial dims for a padded 3×3×3 convolution: `ceil(d / stride)`.
pub fn conv3d_output_dims(dims: [usize; 3], stride: usize) -> [usize; 3] {
    [dims[0].div_ceil(stride), dims[1].div_ceil(stride), dims[2].div_ceil(stride)]
}

/// Column matrix of shape `(c_in·27) × (h'·w'·s')`.
pub(crate) fn im2col<T: Scalar>(
    x: &[T],
    c_in: usize,
    dims: [usize; 3],
    stride: usize,
) -> Vec<T> {
    let [h, w, s] = dims;
    let [oh, ow, os] = conv3d_output_dims(dims, stride);
    let n_out = oh * ow * os;
    let mut cols = vec![T::zero(); c_in * 27 * n_out];
    for ci in 0..c_in {
        let xc = &x[ci * h * w * s..(ci + 1) * h * w * s];
        for a in 0..3 {
            for b in 0..3 {
                for c in 0..3 {
                    let row = ci * 27 + a * 9 + b * 3 + c;
                    let dst = &mut cols[row * n_out..(row + 1) * n_out];
                    for i in 0..oh {
                        let ih = (i * stride + a) as isize - 1;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for j in 0..ow {
                            let iw = (j * stride + b) as isize - 1;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let src_base = (ih as usize * w + iw as usize) * s;
                            let dst_base = (i * ow + j) * os;
                            for k in 0..os {
                                let is = (k * stride + c) as isize - 1;
                                if is >= 0 && is < s as isize {
                                    dst[dst_base + k] = xc[src_base + is as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds columns back onto the input grid.
pub(crate) fn col2im<T: Scalar>(
    cols: &[T],
    c_in: usize,
    dims: [usize; 3],
    stride: usize,
    dx: &mut [T],
) {
    let [h, w, s] = dims;
    let [oh, ow, os] = conv3d_output_dims(dims, stride);
    let n_out = oh * ow * os;
    for ci in 0..c_in {
        let xc = &mut dx[ci * h * w * s..(ci + 1) * h * w * s];
        for a in 0..3 {
            for b in 0..3 {
                for c in 0..3 {
                    let row = ci * 27 + a * 9 + b * 3 + c;
                    let src = &cols[row * n_out..(row + 1) * n_out];
                    for i in 0..oh {
                        let ih = (i * stride + a) as isize - 1;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for j in 0..ow {
                            let iw = (j * stride + b) as isize - 1;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let dst_base = (ih as usize * w + iw as usize) * s;
                            let src_base = (i * ow + j) * os;
                            for k in 0..os {
                                let is = (k * stride + c) as isize - 1;
                                if is >= 0 && is < s as isize {
                                    xc[dst_base + is as usize] += src[src_base + k];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv3d_forward<T: Scalar>(
    x: &[T],
    c_in: usize,
    dims: [usize; 3],
    kernels: &[T],
    c_out: usize,
    stride: usize,
) -> Vec<T> {
    let [oh, ow, os] = conv3d_output_dims(dims, stride);
    let n_out = oh * ow * os;
    let cols = im2col(x, c_in, dims, stride);
    let mut out = vec![T::zero(); c_out * n_out];
    T::gemm(c_out, c_in * 27, n_out, T::one(), kernels, false, &cols, false, T::zero(), &mut out);
    out
}

/// Returns `(dx, dkernels)`; either may be skipped.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3d_backward<T: Scalar>(
    x: &[T],
    c_in: usize,
    dims: [usize; 3],
    kernels: &[T],
    c_out: usize,
    stride: usize,
    dout: &[T],
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let [oh, ow, os] = conv3d_output_dims(dims, stride);
    let n_out = oh * ow * os;
    let rows = c_in * 27;
    let dk = want_dk.then(|| {
        let cols = im2col(x, c_in, dims, stride);
        let mut dk = vec![T::zero(); c_out * rows];
        T::gemm(c_out, n_out, rows, T::one(), dout, false, &cols, true, T::zero(), &mut dk);
        dk
    });
    let dx = want_dx.then(|| {
        let mut dcols = vec![T::zero(); rows * n_out];
        T::gemm(rows, c_out, n_out, T::one(), kernels, true, dout, false, T::zero(), &mut dcols);
        let mut dx = vec![T::zero(); x.len()];
        col2im(&dcols, c_in, dims, stride, &mut dx);
        dx
    });
    (dx, dk)
}
