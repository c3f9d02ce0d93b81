//! Forward and backward kernels.
//!
//! Convolutions avoid an im2col buffer: the input is zero-padded once and each
//! kernel tap becomes one strided GEMM against a shifted view of the padded
//! planes. Output rows are computed at the padded width and the extra columns
//! discarded.

use matrixmultiply::sgemm;

use super::tensor::Tensor;

/// `C = alpha·A·B + beta·C` over strided views of slices. Panics if any view
/// would leave its slice.
#[allow(clippy::too_many_arguments)]
fn gemm(
    (m, k, n): (usize, usize, usize),
    a: (&[f32], usize, usize, usize),
    b: (&[f32], usize, usize, usize),
    beta: f32,
    c: (&mut [f32], usize, usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |off: usize, rows: usize, rs: usize, cols: usize, cs: usize| {
        off + (rows.max(1) - 1) * rs + (cols.max(1) - 1) * cs
    };
    assert!(last(a.1, m, a.2, k, a.3) < a.0.len() || k == 0);
    assert!(last(b.1, k, b.2, n, b.3) < b.0.len() || k == 0);
    assert!(last(c.1, m, c.2, n, c.3) < c.0.len());
    // SAFETY: every index touched through the views was bounds-checked above,
    // and C does not alias A or B (distinct borrows).
    unsafe {
        sgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr().add(a.1),
            a.2 as isize,
            a.3 as isize,
            b.0.as_ptr().add(b.1),
            b.2 as isize,
            b.3 as isize,
            beta,
            c.0.as_mut_ptr().add(c.1),
            c.2 as isize,
            c.3 as isize,
        );
    }
}

struct Padded {
    data: Vec<f32>,
    plane: usize,
    width: usize,
}

fn pad(x: &Tensor, k: usize) -> Padded {
    let p = k / 2;
    let (c, h, w) = x.shape();
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let plane = hp * wp + k - 1;
    let mut data = vec![0.0; c * plane];
    for ch in 0..c {
        let src = x.channel(ch);
        for y in 0..h {
            let dst = ch * plane + (y + p) * wp + p;
            data[dst..dst + w].copy_from_slice(&src[y * w..(y + 1) * w]);
        }
    }
    Padded {
        data,
        plane,
        width: wp,
    }
}

/// Same-size convolution with an odd `k × k` kernel laid out
/// `[out][in][k][k]`, zero padding and stride 1.
pub fn conv_forward(x: &Tensor, kernel: &[f32], bias: &[f32], out_channels: usize, k: usize) -> Tensor {
    let (cin, h, w) = x.shape();
    debug_assert_eq!(kernel.len(), out_channels * cin * k * k);
    let padded = pad(x, k);
    let wp = padded.width;
    let n = h * wp;
    let mut wide = vec![0.0f32; out_channels * n];
    for kh in 0..k {
        for kw in 0..k {
            let tap = kh * k + kw;
            gemm(
                (out_channels, cin, n),
                (kernel, tap, cin * k * k, k * k),
                (&padded.data, kh * wp + kw, padded.plane, 1),
                if tap == 0 { 0.0 } else { 1.0 },
                (&mut wide, 0, n, 1),
            );
        }
    }
    let mut out = Tensor::zeros(out_channels, h, w);
    let data = out.data_mut();
    for co in 0..out_channels {
        for y in 0..h {
            let src = &wide[co * n + y * wp..co * n + y * wp + w];
            let dst = &mut data[(co * h + y) * w..(co * h + y + 1) * w];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + bias[co];
            }
        }
    }
    out
}

/// Accumulates kernel and bias gradients; returns the input gradient when
/// `need_input_grad` is set.
pub fn conv_backward(
    x: &Tensor,
    kernel: &[f32],
    out_channels: usize,
    k: usize,
    grad_out: &Tensor,
    grad_kernel: &mut [f32],
    grad_bias: &mut [f32],
    need_input_grad: bool,
) -> Option<Tensor> {
    let (cin, h, w) = x.shape();
    let padded = pad(x, k);
    let wp = padded.width;
    let n = h * wp;

    let mut wide = vec![0.0f32; out_channels * n];
    for co in 0..out_channels {
        let g = grad_out.channel(co);
        grad_bias[co] += g.iter().sum::<f32>();
        for y in 0..h {
            wide[co * n + y * wp..co * n + y * wp + w].copy_from_slice(&g[y * w..(y + 1) * w]);
        }
    }

    let mut grad_padded = need_input_grad.then(|| vec![0.0f32; cin * padded.plane]);
    for kh in 0..k {
        for kw in 0..k {
            let tap = kh * k + kw;
            let off = kh * wp + kw;
            // dW[co, ci, tap] += Σ_n wide[co, n] · padded[ci, n + off]
            gemm(
                (out_channels, n, cin),
                (&wide, 0, n, 1),
                (&padded.data, off, 1, padded.plane),
                1.0,
                (grad_kernel, tap, cin * k * k, k * k),
            );
            if let Some(gp) = grad_padded.as_mut() {
                // dPadded[ci, n + off] += Σ_co W[co, ci, tap] · wide[co, n]
                gemm(
                    (cin, out_channels, n),
                    (kernel, tap, k * k, cin * k * k),
                    (&wide, 0, n, 1),
                    1.0,
                    (gp, off, padded.plane, 1),
                );
            }
        }
    }

    grad_padded.map(|gp| {
        let p = k / 2;
        let mut dx = Tensor::zeros(cin, h, w);
        let data = dx.data_mut();
        for ci in 0..cin {
            for y in 0..h {
                let src = ci * padded.plane + (y + p) * wp + p;
                data[(ci * h + y) * w..(ci * h + y + 1) * w].copy_from_slice(&gp[src..src + w]);
            }
        }
        dx
    })
}

/// 2×2 stride-2 transposed convolution, kernel laid out `[in][out][2][2]`.
/// Output is exactly twice the input size.
pub fn deconv_forward(x: &Tensor, kernel: &[f32], bias: &[f32], out_channels: usize) -> Tensor {
    let (cin, h, w) = x.shape();
    let hw = h * w;
    let mut out = Tensor::zeros(out_channels, 2 * h, 2 * w);
    let mut tmp = vec![0.0f32; out_channels * hw];
    let ow = 2 * w;
    for a in 0..2 {
        for b in 0..2 {
            gemm(
                (out_channels, cin, hw),
                (kernel, a * 2 + b, 4, out_channels * 4),
                (x.data(), 0, hw, 1),
                0.0,
                (&mut tmp, 0, hw, 1),
            );
            let data = out.data_mut();
            for co in 0..out_channels {
                let base = co * 4 * hw;
                for y in 0..h {
                    for xx in 0..w {
                        data[base + (2 * y + a) * ow + 2 * xx + b] = tmp[co * hw + y * w + xx] + bias[co];
                    }
                }
            }
        }
    }
    out
}

pub fn deconv_backward(
    x: &Tensor,
    kernel: &[f32],
    out_channels: usize,
    grad_out: &Tensor,
    grad_kernel: &mut [f32],
    grad_bias: &mut [f32],
    need_input_grad: bool,
) -> Option<Tensor> {
    let (cin, h, w) = x.shape();
    let hw = h * w;
    let ow = 2 * w;
    for co in 0..out_channels {
        grad_bias[co] += grad_out.channel(co).iter().sum::<f32>();
    }
    let mut dx = need_input_grad.then(|| Tensor::zeros(cin, h, w));
    let mut gtmp = vec![0.0f32; out_channels * hw];
    let g = grad_out.data();
    for a in 0..2 {
        for b in 0..2 {
            for co in 0..out_channels {
                let base = co * 4 * hw;
                for y in 0..h {
                    for xx in 0..w {
                        gtmp[co * hw + y * w + xx] = g[base + (2 * y + a) * ow + 2 * xx + b];
                    }
                }
            }
            let tap = a * 2 + b;
            gemm(
                (cin, hw, out_channels),
                (x.data(), 0, hw, 1),
                (&gtmp, 0, 1, hw),
                1.0,
                (grad_kernel, tap, out_channels * 4, 4),
            );
            if let Some(dx) = dx.as_mut() {
                gemm(
                    (cin, out_channels, hw),
                    (kernel, tap, out_channels * 4, 4),
                    (&gtmp, 0, hw, 1),
                    1.0,
                    (dx.data_mut(), 0, hw, 1),
                );
            }
        }
    }
    dx
}

/// 2×2 stride-2 max pooling; also returns the winning input index of every
/// output cell (first maximum on ties).
pub fn maxpool_forward(x: &Tensor) -> (Tensor, Vec<u32>) {
    let (c, h, w) = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(c, oh, ow);
    let mut argmax = vec![0u32; c * oh * ow];
    let src = x.data();
    let dst = out.data_mut();
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = ch * h * w + 2 * y * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = ch * h * w + (2 * y + dy) * w + 2 * xx + dx;
                    if src[i] > src[best] {
                        best = i;
                    }
                }
                let o = (ch * oh + y) * ow + xx;
                dst[o] = src[best];
                argmax[o] = best as u32;
            }
        }
    }
    (out, argmax)
}

pub fn maxpool_backward(input_shape: (usize, usize, usize), argmax: &[u32], grad_out: &Tensor) -> Tensor {
    let (c, h, w) = input_shape;
    let mut dx = Tensor::zeros(c, h, w);
    let data = dx.data_mut();
    for (g, &i) in grad_out.data().iter().zip(argmax) {
        data[i as usize] += g;
    }
    dx
}

/// Smallest step away from 0 and 1 that an `f32` sigmoid output keeps.
pub const SIGMOID_MARGIN: f32 = 1.0 / 16_777_216.0;

/// Logistic function, kept strictly inside `(0, 1)`.
pub fn sigmoid(v: f32) -> f32 {
    (1.0 / (1.0 + (-v).exp())).clamp(SIGMOID_MARGIN, 1.0 - SIGMOID_MARGIN)
}
