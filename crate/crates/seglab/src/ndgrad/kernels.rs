//! Flat-buffer numerical kernels behind the tape ops.
//!
//! Feature maps are `[C, H, W]` row-major, convolution kernels
//! `[Cout, Cin, K, K]`, and matrices row-major unless a stride view says
//! otherwise. Convolution is stride 1 with same padding (`K/2`), which is
//! the only form the tape exposes.

/// `C = alpha * A(m x k) * B(k x n) + beta * C`, with explicit
/// (row, column) strides so transposed views need no copies.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: a too short");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: b too short");
    assert!((m - 1) * rsc + (n - 1) * csc < c.len(), "gemm: c too short");
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Unfolds `[Cin, H, W]` into patch columns `[Cin*K*K, H*W]` with same
/// padding, so convolution becomes one matrix product.
pub fn im2col(input: &[f64], cin: usize, h: usize, w: usize, ksize: usize, cols: &mut [f64]) {
    let pad = ksize / 2;
    let hw = h * w;
    assert_eq!(input.len(), cin * hw);
    assert_eq!(cols.len(), cin * ksize * ksize * hw);
    let mut row = 0;
    for ci in 0..cin {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..ksize {
            for kx in 0..ksize {
                let out_row = &mut cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    let dst = &mut out_row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, d) in dst.iter_mut().enumerate() {
                        let sx = x as isize + kx as isize - pad as isize;
                        *d = if sx < 0 || sx >= w as isize {
                            0.0
                        } else {
                            src_row[sx as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds patch-column gradients back onto the
/// `[Cin, H, W]` input gradient.
pub fn col2im_acc(cols: &[f64], cin: usize, h: usize, w: usize, ksize: usize, grad_input: &mut [f64]) {
    let pad = ksize / 2;
    let hw = h * w;
    assert_eq!(grad_input.len(), cin * hw);
    assert_eq!(cols.len(), cin * ksize * ksize * hw);
    let mut row = 0;
    for ci in 0..cin {
        for ky in 0..ksize {
            for kx in 0..ksize {
                let col_row = &cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let base = ci * hw + sy as usize * w;
                    for x in 0..w {
                        let sx = x as isize + kx as isize - pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        grad_input[base + sx as usize] += col_row[y * w + x];
                    }
                }
                row += 1;
            }
        }
    }
}

/// Same-padding stride-1 convolution: `[Cin,H,W] -> [Cout,H,W]`.
pub fn conv2d_forward(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kernel: &[f64],
    bias: &[f64],
    cout: usize,
    ksize: usize,
) -> Vec<f64> {
    let hw = h * w;
    let patch = cin * ksize * ksize;
    assert_eq!(kernel.len(), cout * patch);
    assert_eq!(bias.len(), cout);
    let mut cols = vec![0.0; patch * hw];
    im2col(input, cin, h, w, ksize, &mut cols);
    let mut out = vec![0.0; cout * hw];
    gemm(
        cout,
        patch,
        hw,
        1.0,
        kernel,
        (patch, 1),
        &cols,
        (hw, 1),
        0.0,
        &mut out,
        (hw, 1),
    );
    for o in 0..cout {
        let b = bias[o];
        for v in &mut out[o * hw..(o + 1) * hw] {
            *v += b;
        }
    }
    out
}

/// Bias gradient of [`conv2d_forward`]: row sums of the output gradient.
pub fn conv2d_grad_bias(grad_out: &[f64], cout: usize, hw: usize) -> Vec<f64> {
    assert_eq!(grad_out.len(), cout * hw);
    (0..cout)
        .map(|o| grad_out[o * hw..(o + 1) * hw].iter().sum())
        .collect()
}

/// Kernel gradient of [`conv2d_forward`]: `dK = dOut * cols^T`. Patch
/// columns are rebuilt from the saved input rather than stored.
pub fn conv2d_grad_kernel(
    grad_out: &[f64],
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    ksize: usize,
) -> Vec<f64> {
    let hw = h * w;
    let patch = cin * ksize * ksize;
    assert_eq!(grad_out.len(), cout * hw);
    let mut cols = vec![0.0; patch * hw];
    im2col(input, cin, h, w, ksize, &mut cols);
    let mut grad_kernel = vec![0.0; cout * patch];
    gemm(
        cout,
        hw,
        patch,
        1.0,
        grad_out,
        (hw, 1),
        &cols,
        (1, hw),
        0.0,
        &mut grad_kernel,
        (patch, 1),
    );
    grad_kernel
}

/// Input gradient of [`conv2d_forward`]: `dCols = K^T * dOut` folded back
/// onto the input grid.
pub fn conv2d_grad_input(
    grad_out: &[f64],
    kernel: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    ksize: usize,
) -> Vec<f64> {
    let hw = h * w;
    let patch = cin * ksize * ksize;
    assert_eq!(grad_out.len(), cout * hw);
    assert_eq!(kernel.len(), cout * patch);
    let mut grad_cols = vec![0.0; patch * hw];
    gemm(
        patch,
        cout,
        hw,
        1.0,
        kernel,
        (1, patch),
        grad_out,
        (hw, 1),
        0.0,
        &mut grad_cols,
        (hw, 1),
    );
    let mut grad_input = vec![0.0; cin * hw];
    col2im_acc(&grad_cols, cin, h, w, ksize, &mut grad_input);
    grad_input
}

/// 2x2 stride-2 max pooling over even-sized `[C, H, W]`. Returns the pooled
/// map and the flat input index of each winner; ties go to the first element
/// in raster order so replay is deterministic.
pub fn maxpool2_forward(input: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<u32>) {
    assert!(h % 2 == 0 && w % 2 == 0, "maxpool2 needs even H and W");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    let mut arg = vec![0u32; c * oh * ow];
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = ci * h * w + (2 * oy) * w + 2 * ox;
                let mut best = input[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = ci * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                    if input[idx] > best {
                        best = input[idx];
                        best_idx = idx;
                    }
                }
                let o = ci * oh * ow + oy * ow + ox;
                out[o] = best;
                arg[o] = best_idx as u32;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward(grad_out: &[f64], argmax: &[u32], input_len: usize) -> Vec<f64> {
    let mut grad_input = vec![0.0; input_len];
    for (g, &idx) in grad_out.iter().zip(argmax) {
        grad_input[idx as usize] += g;
    }
    grad_input
}

/// Nearest-neighbour 2x upsampling of `[C, H, W]`.
pub fn upsample2_forward(input: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * oh * ow];
    for ci in 0..c {
        for y in 0..oh {
            let src = &input[ci * h * w + (y / 2) * w..][..w];
            let dst = &mut out[ci * oh * ow + y * ow..][..ow];
            for (x, d) in dst.iter_mut().enumerate() {
                *d = src[x / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(grad_out: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut grad_input = vec![0.0; c * h * w];
    for ci in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                grad_input[ci * h * w + (y / 2) * w + x / 2] +=
                    grad_out[ci * oh * ow + y * ow + x];
            }
        }
    }
    grad_input
}

/// Softmax across the channel axis of `[C, rest]`, one distribution per
/// trailing position. The per-position max is subtracted before
/// exponentiation so large activations cannot overflow.
pub fn channel_softmax_forward(input: &[f64], c: usize, rest: usize) -> Vec<f64> {
    assert_eq!(input.len(), c * rest);
    let mut out = vec![0.0; c * rest];
    for j in 0..rest {
        let mut max = f64::NEG_INFINITY;
        for ci in 0..c {
            max = max.max(input[ci * rest + j]);
        }
        let mut sum = 0.0;
        for ci in 0..c {
            let e = (input[ci * rest + j] - max).exp();
            out[ci * rest + j] = e;
            sum += e;
        }
        for ci in 0..c {
            out[ci * rest + j] /= sum;
        }
    }
    out
}

/// Backward pass of channel softmax given the forward output `p`:
/// `din_c = p_c * (g_c - sum_k g_k p_k)` per position.
pub fn channel_softmax_backward(p: &[f64], grad_out: &[f64], c: usize, rest: usize) -> Vec<f64> {
    let mut grad_input = vec![0.0; c * rest];
    for j in 0..rest {
        let mut dot = 0.0;
        for ci in 0..c {
            dot += grad_out[ci * rest + j] * p[ci * rest + j];
        }
        for ci in 0..c {
            grad_input[ci * rest + j] = p[ci * rest + j] * (grad_out[ci * rest + j] - dot);
        }
    }
    grad_input
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(
        input: &[f64],
        cin: usize,
        h: usize,
        w: usize,
        kernel: &[f64],
        bias: &[f64],
        cout: usize,
        ksize: usize,
    ) -> Vec<f64> {
        let pad = ksize as isize / 2;
        let mut out = vec![0.0; cout * h * w];
        for o in 0..cout {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = bias[o];
                    for ci in 0..cin {
                        for ky in 0..ksize {
                            for kx in 0..ksize {
                                let sy = y as isize + ky as isize - pad;
                                let sx = x as isize + kx as isize - pad;
                                if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                acc += input[ci * h * w + sy as usize * w + sx as usize]
                                    * kernel[((o * cin + ci) * ksize + ky) * ksize + kx];
                            }
                        }
                    }
                    out[o * h * w + y * w + x] = acc;
                }
            }
        }
        out
    }

    fn lcg(seed: &mut u64) -> f64 {
        // xorshift-style mixer, only used to fabricate test data
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 33) as f64 / (1u64 << 31) as f64) - 0.5
    }

    #[test]
    fn conv2d_matches_naive_loop() {
        let (cin, cout, h, w, k) = (3, 4, 6, 5, 3);
        let mut s = 7u64;
        let input: Vec<f64> = (0..cin * h * w).map(|_| lcg(&mut s)).collect();
        let kernel: Vec<f64> = (0..cout * cin * k * k).map(|_| lcg(&mut s)).collect();
        let bias: Vec<f64> = (0..cout).map(|_| lcg(&mut s)).collect();
        let fast = conv2d_forward(&input, cin, h, w, &kernel, &bias, cout, k);
        let slow = naive_conv(&input, cin, h, w, &kernel, &bias, cout, k);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn conv2d_one_by_one_is_channel_mix() {
        // 1x1 kernel reduces to a per-pixel linear map over channels.
        let input = vec![1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0];
        let kernel = vec![0.5, 0.1]; // cout=1, cin=2
        let out = conv2d_forward(&input, 2, 2, 2, &kernel, &[1.0], 1, 1);
        assert_eq!(out, vec![2.5, 4.0, 5.5, 7.0]);
    }

    #[test]
    fn maxpool_tracks_argmax_and_routes_gradient() {
        let input = vec![
            1.0, 5.0, 2.0, 0.0, //
            3.0, 4.0, 2.0, 2.0, //
            9.0, 0.0, 1.0, 1.0, //
            0.0, 0.0, 1.0, 8.0,
        ];
        let (out, arg) = maxpool2_forward(&input, 1, 4, 4);
        assert_eq!(out, vec![5.0, 2.0, 9.0, 8.0]);
        assert_eq!(arg, vec![1, 2, 8, 15]);
        // tie in the top-right window: raster-first element wins
        let g = maxpool2_backward(&[1.0, 1.0, 1.0, 1.0], &arg, 16);
        assert_eq!(g.iter().sum::<f64>(), 4.0);
        assert_eq!(g[2], 1.0);
        assert_eq!(g[3], 0.0);
    }

    #[test]
    fn upsample_round_trip_gradient_sums_children() {
        let input = vec![1.0, 2.0, 3.0, 4.0];
        let up = upsample2_forward(&input, 1, 2, 2);
        assert_eq!(
            up,
            vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        let g = upsample2_backward(&vec![1.0; 16], 1, 2, 2);
        assert_eq!(g, vec![4.0; 4]);
    }

    #[test]
    fn softmax_two_logit_example() {
        // logits 0 and ln 3 split a pixel 0.25 / 0.75
        let p = channel_softmax_forward(&[0.0, 3.0f64.ln()], 2, 1);
        assert!((p[0] - 0.25).abs() < 1e-12);
        assert!((p[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariant_and_normalized() {
        let p1 = channel_softmax_forward(&[1.0, 2.0, 3.0], 3, 1);
        let p2 = channel_softmax_forward(&[1001.0, 1002.0, 1003.0], 3, 1);
        for (a, b) in p1.iter().zip(&p2) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((p1.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
