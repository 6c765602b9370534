//! Raw numeric kernels behind the differentiable ops.
//!
//! Convolution is lowered to one GEMM per kernel tap: for tap `(ki, kj)` the
//! kernel slice `W[:, :, ki, kj]` multiplies a gathered `[Cin, N*P]` matrix of
//! the input pixels that tap reads. Taps that only ever read zero padding are
//! skipped, which matters for the collapsed `F = 1` feature maps.

/// `C = alpha * A * B + beta * C` over strided row/column layouts.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
        debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    }
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the bounds above are the full extents dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub padding: (usize, usize),
    pub stride: (usize, usize),
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn taps(&self) -> usize {
        self.kernel.0 * self.kernel.1
    }

    /// Input row read by output row `oh` through kernel row `ki`, if any.
    fn source_row(&self, oh: usize, ki: usize) -> Option<usize> {
        (oh * self.stride.0 + ki)
            .checked_sub(self.padding.0)
            .filter(|&r| r < self.in_h)
    }

    fn source_col(&self, ow: usize, kj: usize) -> Option<usize> {
        (ow * self.stride.1 + kj)
            .checked_sub(self.padding.1)
            .filter(|&c| c < self.in_w)
    }

    fn tap_is_live(&self, ki: usize, kj: usize) -> bool {
        (0..self.out_h).any(|oh| self.source_row(oh, ki).is_some())
            && (0..self.out_w).any(|ow| self.source_col(ow, kj).is_some())
    }

    /// Fills `cols` (`[Cin, N*P]`) with the input pixels tap `(ki, kj)` reads.
    fn gather(&self, input: &[f64], ki: usize, kj: usize, cols: &mut [f64]) {
        let p = self.positions();
        let np = self.batch * p;
        let plane = self.in_h * self.in_w;
        for ci in 0..self.in_channels {
            let row = &mut cols[ci * np..(ci + 1) * np];
            for n in 0..self.batch {
                let base = (n * self.in_channels + ci) * plane;
                for oh in 0..self.out_h {
                    let src_r = self.source_row(oh, ki);
                    for ow in 0..self.out_w {
                        let dst = n * p + oh * self.out_w + ow;
                        row[dst] = match (src_r, self.source_col(ow, kj)) {
                            (Some(r), Some(c)) => input[base + r * self.in_w + c],
                            _ => 0.0,
                        };
                    }
                }
            }
        }
    }

    fn scatter_add(&self, cols: &[f64], ki: usize, kj: usize, grad_input: &mut [f64]) {
        let p = self.positions();
        let np = self.batch * p;
        let plane = self.in_h * self.in_w;
        for ci in 0..self.in_channels {
            let row = &cols[ci * np..(ci + 1) * np];
            for n in 0..self.batch {
                let base = (n * self.in_channels + ci) * plane;
                for oh in 0..self.out_h {
                    let Some(r) = self.source_row(oh, ki) else {
                        continue;
                    };
                    for ow in 0..self.out_w {
                        if let Some(c) = self.source_col(ow, kj) {
                            grad_input[base + r * self.in_w + c] += row[n * p + oh * self.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeometry, input: &[f64], kernel: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let p = g.positions();
    let np = g.batch * p;
    let taps = g.taps();
    let mut acc = vec![0.0; g.out_channels * np];
    let mut cols = vec![0.0; g.in_channels * np];
    for ki in 0..g.kernel.0 {
        for kj in 0..g.kernel.1 {
            if !g.tap_is_live(ki, kj) {
                continue;
            }
            g.gather(input, ki, kj, &mut cols);
            let off = ki * g.kernel.1 + kj;
            gemm(
                g.out_channels,
                g.in_channels,
                np,
                &kernel[off..],
                g.in_channels * taps,
                taps,
                &cols,
                np,
                1,
                1.0,
                &mut acc,
                np,
                1,
            );
        }
    }
    let mut out = vec![0.0; g.batch * g.out_channels * p];
    for n in 0..g.batch {
        for co in 0..g.out_channels {
            let b = bias.map_or(0.0, |b| b[co]);
            let src = &acc[co * np + n * p..co * np + (n + 1) * p];
            let dst = &mut out[(n * g.out_channels + co) * p..(n * g.out_channels + co + 1) * p];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + b;
            }
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    need_input: bool,
) -> ConvGrads {
    let p = g.positions();
    let np = g.batch * p;
    let taps = g.taps();
    // grad_out is [N, Cout, P]; regroup as [Cout, N*P].
    let mut gy = vec![0.0; g.out_channels * np];
    let mut grad_bias = vec![0.0; g.out_channels];
    for n in 0..g.batch {
        for co in 0..g.out_channels {
            let src = &grad_out[(n * g.out_channels + co) * p..(n * g.out_channels + co + 1) * p];
            gy[co * np + n * p..co * np + (n + 1) * p].copy_from_slice(src);
            grad_bias[co] += src.iter().sum::<f64>();
        }
    }
    let mut grad_kernel = vec![0.0; kernel.len()];
    let mut grad_input = need_input.then(|| vec![0.0; input.len()]);
    let mut cols = vec![0.0; g.in_channels * np];
    for ki in 0..g.kernel.0 {
        for kj in 0..g.kernel.1 {
            if !g.tap_is_live(ki, kj) {
                continue;
            }
            let off = ki * g.kernel.1 + kj;
            g.gather(input, ki, kj, &mut cols);
            // dW_tap[Cout, Cin] += gy[Cout, NP] * cols^T[NP, Cin]
            gemm(
                g.out_channels,
                np,
                g.in_channels,
                &gy,
                np,
                1,
                &cols,
                1,
                np,
                1.0,
                &mut grad_kernel[off..],
                g.in_channels * taps,
                taps,
            );
            if let Some(gx) = grad_input.as_mut() {
                // dcols[Cin, NP] = W_tap^T[Cin, Cout] * gy[Cout, NP]
                gemm(
                    g.in_channels,
                    g.out_channels,
                    np,
                    &kernel[off..],
                    taps,
                    g.in_channels * taps,
                    &gy,
                    np,
                    1,
                    0.0,
                    &mut cols,
                    np,
                    1,
                );
                g.scatter_add(&cols, ki, kj, gx);
            }
        }
    }
    ConvGrads {
        input: grad_input,
        kernel: grad_kernel,
        bias: grad_bias,
    }
}

/// Batched `[B, M, K] x [B, K, P]`.
pub(crate) fn batched_matmul(a: &[f64], b: &[f64], batch: usize, m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch * m * p];
    for i in 0..batch {
        gemm(
            m,
            k,
            p,
            &a[i * m * k..],
            k,
            1,
            &b[i * k * p..],
            p,
            1,
            0.0,
            &mut out[i * m * p..],
            p,
            1,
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeometry, x: &[f64], w: &[f64]) -> Vec<f64> {
        let (kh, kw) = g.kernel;
        let mut out = vec![0.0; g.batch * g.out_channels * g.out_h * g.out_w];
        for n in 0..g.batch {
            for co in 0..g.out_channels {
                for oh in 0..g.out_h {
                    for ow in 0..g.out_w {
                        let mut s = 0.0;
                        for ci in 0..g.in_channels {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let r = (oh * g.stride.0 + ki) as isize - g.padding.0 as isize;
                                    let c = (ow * g.stride.1 + kj) as isize - g.padding.1 as isize;
                                    if r < 0 || c < 0 || r >= g.in_h as isize || c >= g.in_w as isize {
                                        continue;
                                    }
                                    let xi = ((n * g.in_channels + ci) * g.in_h + r as usize) * g.in_w + c as usize;
                                    let wi = ((co * g.in_channels + ci) * kh + ki) * kw + kj;
                                    s += x[xi] * w[wi];
                                }
                            }
                        }
                        out[((n * g.out_channels + co) * g.out_h + oh) * g.out_w + ow] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn tapwise_conv_matches_direct_loops() {
        for &(in_h, in_w, kernel, padding, stride) in &[
            (3, 60, (8, 8), (3, 3), (4, 4)),
            (1, 15, (5, 5), (2, 2), (2, 2)),
            (1, 8, (3, 3), (1, 1), (1, 1)),
            (4, 5, (2, 3), (0, 1), (1, 2)),
        ] {
            let out_h = (in_h + 2 * padding.0 - kernel.0) / stride.0 + 1;
            let out_w = (in_w + 2 * padding.1 - kernel.1) / stride.1 + 1;
            let g = ConvGeometry {
                batch: 2,
                in_channels: 3,
                in_h,
                in_w,
                out_channels: 4,
                kernel,
                padding,
                stride,
                out_h,
                out_w,
            };
            let x: Vec<f64> = (0..2 * 3 * in_h * in_w).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let w: Vec<f64> = (0..4 * 3 * kernel.0 * kernel.1)
                .map(|i| ((i * 13 % 7) as f64) * 0.25 - 0.5)
                .collect();
            let fast = conv2d_forward(&g, &x, &w, None);
            let slow = naive_conv(&g, &x, &w);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }
}
