//! Parameterized layers (conv, FC, batch-norm) and their inference-mode
//! forward operations.
//!
//! Convolution is direct sliding-window with zero padding, no im2col or
//! transform tricks: the conv-to-FC conversion must be checked against the
//! exact convolution it will replace, so we pin one implementation and keep
//! its per-element accumulation order fixed (kernel entries in row-major
//! `(channel, ky, kx)` order). Matrix products run through a blocked GEMM
//! whose per-element accumulation is likewise a fixed ascending-k sweep.

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Tensor4};

/// Default epsilon folded into batch-norm sigma when loading raw statistics.
pub const BN_EPS: f32 = 1e-5;

/// A 2-D convolution kernel with padding, stride, and groups.
///
/// Kernel layout is `(out_channels, in_per_group, kh, kw)` row-major. The
/// layer consumes `in_per_group * groups` input channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    kernel: Vec<f32>,
    out_channels: usize,
    in_per_group: usize,
    kh: usize,
    kw: usize,
    bias: Option<Vec<f32>>,
    padding: usize,
    stride: usize,
    groups: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kernel: Vec<f32>,
        out_channels: usize,
        in_per_group: usize,
        kh: usize,
        kw: usize,
        bias: Option<Vec<f32>>,
        padding: usize,
        stride: usize,
        groups: usize,
    ) -> Result<Self> {
        if groups == 0 || stride == 0 || kh == 0 || kw == 0 {
            return Err(Error::config(
                "kernel size, stride, and groups must be positive",
            ));
        }
        if out_channels % groups != 0 {
            return Err(Error::config(format!(
                "output channels {out_channels} not divisible by groups {groups}"
            )));
        }
        if kernel.len() != out_channels * in_per_group * kh * kw {
            return Err(Error::Dimension {
                axis: "kernel element count",
                expected: out_channels * in_per_group * kh * kw,
                actual: kernel.len(),
            });
        }
        if let Some(b) = &bias {
            if b.len() != out_channels {
                return Err(Error::Dimension {
                    axis: "conv bias length",
                    expected: out_channels,
                    actual: b.len(),
                });
            }
        }
        Ok(ConvLayer {
            kernel,
            out_channels,
            in_per_group,
            kh,
            kw,
            bias,
            padding,
            stride,
            groups,
        })
    }

    /// Square dense kernel, the common case in tests.
    pub fn dense(kernel: Vec<f32>, o: usize, c: usize, k: usize, padding: usize) -> Result<Self> {
        ConvLayer::new(kernel, o, c, k, k, None, padding, 1, 1)
    }

    /// Depth-wise kernel `(channels, 1, k, k)` with size-preserving padding.
    pub fn depthwise(kernel: Vec<f32>, channels: usize, k: usize) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::config(format!(
                "depth-wise kernel size {k} must be odd"
            )));
        }
        ConvLayer::new(kernel, channels, 1, k, k, None, (k - 1) / 2, 1, channels)
    }

    pub fn in_channels(&self) -> usize {
        self.in_per_group * self.groups
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_per_group(&self) -> usize {
        self.in_per_group
    }

    pub fn kernel_hw(&self) -> (usize, usize) {
        (self.kh, self.kw)
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn kernel(&self) -> &[f32] {
        &self.kernel
    }

    pub(crate) fn kernel_mut(&mut self) -> &mut [f32] {
        &mut self.kernel
    }

    pub fn bias(&self) -> Option<&[f32]> {
        self.bias.as_deref()
    }

    pub(crate) fn bias_mut(&mut self) -> Option<&mut Vec<f32>> {
        self.bias.as_mut()
    }

    pub fn with_bias(mut self, bias: Option<Vec<f32>>) -> Result<Self> {
        if let Some(b) = &bias {
            if b.len() != self.out_channels {
                return Err(Error::Dimension {
                    axis: "conv bias length",
                    expected: self.out_channels,
                    actual: b.len(),
                });
            }
        }
        self.bias = bias;
        Ok(self)
    }

    #[inline]
    pub fn kernel_at(&self, oc: usize, ci: usize, ky: usize, kx: usize) -> f32 {
        self.kernel[((oc * self.in_per_group + ci) * self.kh + ky) * self.kw + kx]
    }

    /// Output spatial size. Windows that do not fit a full stride step are
    /// dropped (floor semantics), so strided kernels with `2p != k - 1` are
    /// usable for downsampling.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let span_h = h + 2 * self.padding;
        let span_w = w + 2 * self.padding;
        if span_h < self.kh || span_w < self.kw {
            return Err(Error::config(format!(
                "kernel {}x{} exceeds padded input {}x{}",
                self.kh, self.kw, span_h, span_w
            )));
        }
        Ok((
            (span_h - self.kh) / self.stride + 1,
            (span_w - self.kw) / self.stride + 1,
        ))
    }

    /// True when the conv maps `(h, w)` to `(h, w)`: stride 1 and
    /// `p = (k - 1) / 2` with odd k. Only these are merge-eligible.
    pub fn is_size_preserving(&self) -> bool {
        self.stride == 1 && 2 * self.padding + 1 == self.kh && 2 * self.padding + 1 == self.kw
    }

    pub fn param_count(&self) -> u64 {
        self.kernel.len() as u64 + self.bias.as_ref().map_or(0, |b| b.len() as u64)
    }
}

/// A fully-connected kernel `W (q_out, p_in)`, dense or set-sharing grouped.
///
/// With `groups = s > 1` the weight is stored as `(s*m, m)` where `m` is the
/// per-set length: group `i` maps input slice `[i*m, (i+1)*m)` to the same
/// output slice through rows `[i*m, (i+1)*m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FcLayer {
    weight: Matrix,
    bias: Option<Vec<f32>>,
    groups: usize,
}

impl FcLayer {
    pub fn new_dense(weight: Matrix, bias: Option<Vec<f32>>) -> Result<Self> {
        if let Some(b) = &bias {
            if b.len() != weight.rows() {
                return Err(Error::Dimension {
                    axis: "fc bias length",
                    expected: weight.rows(),
                    actual: b.len(),
                });
            }
        }
        Ok(FcLayer {
            weight,
            bias,
            groups: 1,
        })
    }

    pub fn new_grouped(weight: Matrix, bias: Option<Vec<f32>>, groups: usize) -> Result<Self> {
        if groups == 0 || weight.rows() != groups * weight.cols() {
            return Err(Error::Dimension {
                axis: "grouped fc weight rows",
                expected: groups * weight.cols(),
                actual: weight.rows(),
            });
        }
        if let Some(b) = &bias {
            if b.len() != weight.rows() {
                return Err(Error::Dimension {
                    axis: "fc bias length",
                    expected: weight.rows(),
                    actual: b.len(),
                });
            }
        }
        Ok(FcLayer {
            weight,
            bias,
            groups,
        })
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub(crate) fn weight_mut(&mut self) -> &mut Matrix {
        &mut self.weight
    }

    pub fn bias(&self) -> Option<&[f32]> {
        self.bias.as_deref()
    }

    pub(crate) fn bias_mut(&mut self) -> Option<&mut Vec<f32>> {
        self.bias.as_mut()
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    /// Flattened input length one sample must have.
    pub fn in_len(&self) -> usize {
        if self.groups == 1 {
            self.weight.cols()
        } else {
            self.weight.rows()
        }
    }

    pub fn out_len(&self) -> usize {
        self.weight.rows()
    }

    pub fn param_count(&self) -> u64 {
        (self.weight.rows() * self.weight.cols()) as u64
            + self.bias.as_ref().map_or(0, |b| b.len() as u64)
    }
}

/// Inference-form batch-norm: per-channel `gamma/sigma * (x - mu) + beta`,
/// with epsilon already folded into `sigma = sqrt(var + eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    mu: Vec<f32>,
    sigma: Vec<f32>,
    gamma: Vec<f32>,
    beta: Vec<f32>,
}

impl BnParams {
    pub fn new(mu: Vec<f32>, sigma: Vec<f32>, gamma: Vec<f32>, beta: Vec<f32>) -> Result<Self> {
        let len = mu.len();
        if sigma.len() != len || gamma.len() != len || beta.len() != len {
            return Err(Error::Dimension {
                axis: "bn vector length",
                expected: len,
                actual: sigma.len().max(gamma.len()).max(beta.len()),
            });
        }
        if let Some(s) = sigma.iter().find(|s| **s <= 0.0 || !s.is_finite()) {
            return Err(Error::parameter(format!(
                "bn sigma must be strictly positive, got {s}"
            )));
        }
        Ok(BnParams {
            mu,
            sigma,
            gamma,
            beta,
        })
    }

    /// Builds from accumulated statistics, folding `eps` into sigma.
    pub fn from_stats(
        mean: Vec<f32>,
        var: Vec<f32>,
        gamma: Vec<f32>,
        beta: Vec<f32>,
        eps: f32,
    ) -> Result<Self> {
        let sigma = var.iter().map(|v| (v + eps).sqrt()).collect();
        BnParams::new(mean, sigma, gamma, beta)
    }

    /// The no-op normalization: `mu = 0, sigma = 1, gamma = 1, beta = 0`.
    pub fn identity(len: usize) -> Self {
        BnParams {
            mu: vec![0.0; len],
            sigma: vec![1.0; len],
            gamma: vec![1.0; len],
            beta: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn mu(&self) -> &[f32] {
        &self.mu
    }

    pub fn sigma(&self) -> &[f32] {
        &self.sigma
    }

    pub fn gamma(&self) -> &[f32] {
        &self.gamma
    }

    pub fn beta(&self) -> &[f32] {
        &self.beta
    }

    pub(crate) fn vectors_mut(
        &mut self,
    ) -> (&mut Vec<f32>, &mut Vec<f32>, &mut Vec<f32>, &mut Vec<f32>) {
        (&mut self.mu, &mut self.sigma, &mut self.gamma, &mut self.beta)
    }

    /// Channel `i` as an affine map `y = a*x + b`.
    #[inline]
    pub fn scale_shift(&self, i: usize) -> (f32, f32) {
        let a = self.gamma[i] / self.sigma[i];
        (a, self.beta[i] - self.mu[i] * a)
    }

    pub fn param_count(&self) -> u64 {
        4 * self.mu.len() as u64
    }
}

/// `C (m x n) = A (m x k) * B (k x n)` over strided `f32` views.
///
/// Per output element the k-sweep is a fixed ascending accumulation, so
/// results are reproducible run to run.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    c: &mut [f32],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * rsc + j * csc] = 0.0;
            }
        }
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa, "gemm: A out of bounds");
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb, "gemm: B out of bounds");
    assert!(c.len() > (m - 1) * rsc + (n - 1) * csc, "gemm: C out of bounds");
    unsafe {
        matrixmultiply::sgemm(
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
            0.0,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Direct sliding-window convolution with zero padding.
///
/// Output is `(n, o, h', w')` with `h' = floor((h + 2p - kh)/stride) + 1`.
/// Bias, when present, is added per output channel.
pub fn conv2d(input: &Tensor4, layer: &ConvLayer) -> Result<Tensor4> {
    let (n, c, h, w) = input.dims();
    if c != layer.in_channels() {
        return Err(Error::Dimension {
            axis: "input channels",
            expected: layer.in_channels(),
            actual: c,
        });
    }
    let (oh, ow) = layer.output_hw(h, w)?;
    let o = layer.out_channels;
    let mut out = Tensor4::zeros(n, o, oh, ow);

    if layer.kh == 1
        && layer.kw == 1
        && layer.stride == 1
        && layer.padding == 0
        && layer.groups == 1
    {
        // Pointwise dense conv: per-sample (o, c) x (c, hw) product with the
        // same ascending-channel accumulation as the generic loop.
        let hw = h * w;
        for i in 0..n {
            let a = &layer.kernel;
            let b = input.sample(i);
            let dst = &mut out.data_mut()[i * o * hw..(i + 1) * o * hw];
            gemm(o, c, hw, a, c, 1, b, hw, 1, dst, hw, 1);
        }
    } else {
        conv2d_direct(input, layer, &mut out, oh, ow);
    }

    if let Some(bias) = &layer.bias {
        let plane = oh * ow;
        for i in 0..n {
            for oc in 0..o {
                let base = (i * o + oc) * plane;
                let b = bias[oc];
                for x in &mut out.data_mut()[base..base + plane] {
                    *x += b;
                }
            }
        }
    }
    Ok(out)
}

fn conv2d_direct(input: &Tensor4, layer: &ConvLayer, out: &mut Tensor4, oh: usize, ow: usize) {
    let (n, _, h, w) = input.dims();
    let o = layer.out_channels;
    let g = layer.groups;
    let opg = o / g;
    let cpg = layer.in_per_group;
    let (kh, kw) = (layer.kh, layer.kw);
    let p = layer.padding;
    let s = layer.stride;
    let in_plane = h * w;
    let out_plane = oh * ow;

    // Valid output range for a kernel tap: 0 <= oy*s + ky - p < h.
    let lo = |kk: usize| -> usize {
        if p > kk {
            (p - kk).div_ceil(s)
        } else {
            0
        }
    };
    let hi = |kk: usize, extent: usize, limit: usize| -> Option<usize> {
        (extent - 1 + p).checked_sub(kk).map(|v| (v / s).min(limit - 1))
    };

    for i in 0..n {
        for gi in 0..g {
            for ocl in 0..opg {
                let oc = gi * opg + ocl;
                let out_base = (i * o + oc) * out_plane;
                for cil in 0..cpg {
                    let ci = gi * cpg + cil;
                    let in_base = (i * layer.in_channels() + ci) * in_plane;
                    for ky in 0..kh {
                        let oy_lo = lo(ky);
                        let Some(oy_hi) = hi(ky, h, oh) else { continue };
                        for kx in 0..kw {
                            let kval = layer.kernel
                                [((oc * cpg + cil) * kh + ky) * kw + kx];
                            let ox_lo = lo(kx);
                            let Some(ox_hi) = hi(kx, w, ow) else { continue };
                            if ox_hi < ox_lo || oy_hi < oy_lo {
                                continue;
                            }
                            for oy in oy_lo..=oy_hi {
                                let iy = oy * s + ky - p;
                                let orow = out_base + oy * ow;
                                let irow = in_base + iy * w;
                                if s == 1 {
                                    let ix0 = ox_lo + kx - p;
                                    let len = ox_hi - ox_lo + 1;
                                    let (dst, src) = (
                                        &mut out.data_mut()[orow + ox_lo..orow + ox_lo + len],
                                        &input.data()[irow + ix0..irow + ix0 + len],
                                    );
                                    for (d, x) in dst.iter_mut().zip(src) {
                                        *d += kval * x;
                                    }
                                } else {
                                    for ox in ox_lo..=ox_hi {
                                        let ix = ox * s + kx - p;
                                        out.data_mut()[orow + ox] +=
                                            kval * input.data()[irow + ix];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Flattens each sample, computes `V * W^T + b`, and reshapes back.
///
/// The output keeps the input's spatial dims; the channel count is inferred
/// from the weight's output length. Grouped layers expect inputs already in
/// the share-set layout (see the block module).
pub fn fc_forward(input: &Tensor4, layer: &FcLayer) -> Result<Tensor4> {
    let (n, c, h, w) = input.dims();
    let sample_len = c * h * w;
    if sample_len != layer.in_len() {
        return Err(Error::Dimension {
            axis: "fc input length",
            expected: layer.in_len(),
            actual: sample_len,
        });
    }
    let out_len = layer.out_len();
    let hw = h * w;
    if out_len % hw != 0 {
        return Err(Error::Dimension {
            axis: "fc output length (not a whole number of channels)",
            expected: (out_len / hw) * hw,
            actual: out_len,
        });
    }
    let oc = out_len / hw;
    let mut out = Tensor4::zeros(n, oc, h, w);

    let weight = &layer.weight;
    if layer.groups == 1 {
        let (q, p) = (weight.rows(), weight.cols());
        // B = W^T through strides: B[k][j] = W[j][k].
        gemm(
            n,
            p,
            q,
            input.data(),
            p,
            1,
            weight.data(),
            1,
            p,
            out.data_mut(),
            q,
            1,
        );
    } else {
        let m = weight.cols();
        for gi in 0..layer.groups {
            gemm(
                n,
                m,
                m,
                &input.data()[gi * m..],
                sample_len,
                1,
                &weight.data()[gi * m * m..],
                1,
                m,
                &mut out.data_mut()[gi * m..],
                out_len,
                1,
            );
        }
    }

    if let Some(bias) = &layer.bias {
        for i in 0..n {
            let base = i * out_len;
            for (x, b) in out.data_mut()[base..base + out_len].iter_mut().zip(bias) {
                *x += b;
            }
        }
    }
    Ok(out)
}

/// Applies inference batch-norm per channel.
pub fn bn_inference(input: &Tensor4, bn: &BnParams) -> Result<Tensor4> {
    let (n, c, h, w) = input.dims();
    if bn.len() != c {
        return Err(Error::Dimension {
            axis: "bn channel count",
            expected: c,
            actual: bn.len(),
        });
    }
    let mut out = input.clone();
    let plane = h * w;
    for i in 0..n {
        for j in 0..c {
            let (a, b) = bn.scale_shift(j);
            let base = (i * c + j) * plane;
            for x in &mut out.data_mut()[base..base + plane] {
                *x = a * *x + b;
            }
        }
    }
    Ok(out)
}
