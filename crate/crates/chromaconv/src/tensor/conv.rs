//! Planar convolution kernels: im2col patch extraction plus sgemm.
//!
//! Convolution here is cross-correlation (no kernel flip). The quadruple-loop
//! reference these kernels are tested against lives in the test suite, not
//! here, so the two never share code.

/// Output extent along one spatial axis.
pub fn out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(input + 2 * pad >= k, "kernel larger than padded input");
    (input + 2 * pad - k) / stride + 1
}

/// Row-major gemm wrapper: C = alpha * A(m x k) * B(k x n) + beta * C.
/// Strides are in elements; transposed operands swap row/col strides.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    beta: f32,
    c: &mut [f32],
    rsc: isize,
    csc: isize,
) {
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

/// Scatter one image into patch columns: cols is (c_in*k*k) x (h_out*w_out),
/// zero-filled where the window hangs over the padding border.
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    x: &[f32],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    cols: &mut [f32],
    h_out: usize,
    w_out: usize,
) {
    let hw = h_out * w_out;
    debug_assert_eq!(cols.len(), c_in * k * k * hw);
    for c in 0..c_in {
        for ki in 0..k {
            for kj in 0..k {
                let row = ((c * k + ki) * k + kj) * hw;
                for oy in 0..h_out {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let dst = &mut cols[row + oy * w_out..row + (oy + 1) * w_out];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = (c * h + iy as usize) * w;
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize { 0.0 } else { x[src + ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of im2col: accumulate patch-column gradients back into dx.
#[allow(clippy::too_many_arguments)]
pub fn col2im_add(
    dcols: &[f32],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dx: &mut [f32],
    h_out: usize,
    w_out: usize,
) {
    let hw = h_out * w_out;
    debug_assert_eq!(dcols.len(), c_in * k * k * hw);
    for c in 0..c_in {
        for ki in 0..k {
            for kj in 0..k {
                let row = ((c * k + ki) * k + kj) * hw;
                for oy in 0..h_out {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = (c * h + iy as usize) * w;
                    for ox in 0..w_out {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[dst + ix as usize] += dcols[row + oy * w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batched forward: x is [b, c_in, h, w], wgt is [c_out, c_in, k, k].
/// Returns the output buffer plus its spatial dims.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    x: &[f32],
    bsz: usize,
    c_in: usize,
    h: usize,
    w: usize,
    wgt: &[f32],
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f32>, usize, usize) {
    let h_out = out_dim(h, k, stride, pad);
    let w_out = out_dim(w, k, stride, pad);
    let ckk = c_in * k * k;
    let hw = h_out * w_out;
    debug_assert_eq!(wgt.len(), c_out * ckk);
    let mut out = vec![0.0f32; bsz * c_out * hw];
    let mut cols = vec![0.0f32; ckk * hw];
    for bi in 0..bsz {
        im2col(&x[bi * c_in * h * w..][..c_in * h * w], c_in, h, w, k, stride, pad, &mut cols, h_out, w_out);
        gemm(
            c_out,
            ckk,
            hw,
            1.0,
            wgt,
            ckk as isize,
            1,
            &cols,
            hw as isize,
            1,
            0.0,
            &mut out[bi * c_out * hw..][..c_out * hw],
            hw as isize,
            1,
        );
    }
    (out, h_out, w_out)
}

/// Batched backward. dw accumulates (caller zeroes it); dx, when requested,
/// accumulates as well so the tape can sum fan-out contributions.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f32],
    bsz: usize,
    c_in: usize,
    h: usize,
    w: usize,
    wgt: &[f32],
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dy: &[f32],
    mut dx: Option<&mut [f32]>,
    dw: Option<&mut [f32]>,
) {
    let h_out = out_dim(h, k, stride, pad);
    let w_out = out_dim(w, k, stride, pad);
    let ckk = c_in * k * k;
    let hw = h_out * w_out;
    let mut cols = vec![0.0f32; ckk * hw];
    let mut dcols = vec![0.0f32; ckk * hw];
    let mut dwbuf = dw;
    for bi in 0..bsz {
        let x_b = &x[bi * c_in * h * w..][..c_in * h * w];
        let dy_b = &dy[bi * c_out * hw..][..c_out * hw];
        if let Some(dw) = dwbuf.as_deref_mut() {
            im2col(x_b, c_in, h, w, k, stride, pad, &mut cols, h_out, w_out);
            // dw += dy_b (c_out x hw) * cols^T (hw x ckk)
            gemm(c_out, hw, ckk, 1.0, dy_b, hw as isize, 1, &cols, 1, hw as isize, 1.0, dw, ckk as isize, 1);
        }
        if let Some(dx) = dx.as_deref_mut() {
            // dcols = wgt^T (ckk x c_out) * dy_b (c_out x hw)
            gemm(ckk, c_out, hw, 1.0, wgt, 1, ckk as isize, dy_b, hw as isize, 1, 0.0, &mut dcols, hw as isize, 1);
            col2im_add(&dcols, c_in, h, w, k, stride, pad, &mut dx[bi * c_in * h * w..][..c_in * h * w], h_out, w_out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_kernel_sums_window() {
        let x = vec![1.0f32; 9];
        let w = vec![1.0f32; 9];
        let (y, ho, wo) = conv2d_forward(&x, 1, 1, 3, 3, &w, 1, 3, 1, 0);
        assert_eq!((ho, wo), (1, 1));
        assert_eq!(y, vec![9.0]);
    }

    #[test]
    fn identity_kernel_with_same_padding_is_identity() {
        let x: Vec<f32> = (0..2 * 25).map(|v| v as f32 * 0.25 - 3.0).collect();
        // center tap per in/out channel pair on the diagonal
        let mut w = vec![0.0f32; 2 * 2 * 9];
        w[0 * 18 + 0 * 9 + 4] = 1.0;
        w[1 * 18 + 1 * 9 + 4] = 1.0;
        let (y, ho, wo) = conv2d_forward(&x, 1, 2, 5, 5, &w, 2, 3, 1, 1);
        assert_eq!((ho, wo), (5, 5));
        assert_eq!(y, x);
    }

    #[test]
    fn stride_two_shrinks_output() {
        let x = vec![1.0f32; 16];
        let w = vec![1.0f32; 4 * 1]; // 2x2 kernel? k must stay odd for layers, raw kernel allows any
        let (_, ho, wo) = conv2d_forward(&x, 1, 1, 4, 4, &w, 1, 2, 2, 0);
        assert_eq!((ho, wo), (2, 2));
    }
}
