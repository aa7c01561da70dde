//! NCHW tensors, dense matrices, and the shape/layout primitives the rest of
//! the crate is built on.
//!
//! Everything is `f32` in a single contiguous row-major buffer. `reshape` is a
//! pure re-labelling of dimensions: the element order in memory never changes,
//! so reshape round-trips are bit-exact and cost nothing. That property is
//! load-bearing — the conv-to-FC conversion is literally "convolve an identity
//! matrix, then reshape/transpose", and it only works because reshape is
//! order-preserving.

use crate::error::{Error, Result};

/// A 4-D feature map in NCHW order.
///
/// Flat index of element `(i, j, u, v)` is `((i*c + j)*h + u)*w + v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Tensor4 {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor4 {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn filled(n: usize, c: usize, h: usize, w: usize, value: f32) -> Self {
        Tensor4 {
            n,
            c,
            h,
            w,
            data: vec![value; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::Dimension {
                axis: "element count",
                expected: n * c * h * w,
                actual: data.len(),
            });
        }
        Ok(Tensor4 { n, c, h, w, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, u: usize, v: usize) -> usize {
        ((i * self.c + j) * self.h + u) * self.w + v
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, u: usize, v: usize) -> f32 {
        self.data[self.index(i, j, u, v)]
    }

    #[inline]
    pub(crate) fn set(&mut self, i: usize, j: usize, u: usize, v: usize, value: f32) {
        let idx = self.index(i, j, u, v);
        self.data[idx] = value;
    }

    /// One sample as a flat slice of length `c*h*w`.
    #[inline]
    pub fn sample(&self, i: usize) -> &[f32] {
        let len = self.c * self.h * self.w;
        &self.data[i * len..(i + 1) * len]
    }

    /// Re-labels the dimensions without touching the buffer.
    pub fn reshape(self, n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        if self.data.len() != n * c * h * w {
            return Err(Error::Dimension {
                axis: "element count",
                expected: self.data.len(),
                actual: n * c * h * w,
            });
        }
        Ok(Tensor4 {
            n,
            c,
            h,
            w,
            data: self.data,
        })
    }

    /// Cloning variant of [`reshape`](Self::reshape).
    pub fn reshaped(&self, n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        self.clone().reshape(n, c, h, w)
    }

    /// Reinterprets the buffer as a `rows x cols` matrix (order-preserving).
    pub fn into_matrix(self, rows: usize, cols: usize) -> Result<Matrix> {
        if self.data.len() != rows * cols {
            return Err(Error::Dimension {
                axis: "element count",
                expected: self.data.len(),
                actual: rows * cols,
            });
        }
        Matrix::from_vec(rows, cols, self.data)
    }

    /// Element-wise sum. Dims must match exactly.
    pub fn add(&self, other: &Tensor4) -> Result<Tensor4> {
        if self.dims() != other.dims() {
            return Err(Error::Dimension {
                axis: "element count",
                expected: self.len(),
                actual: other.len(),
            });
        }
        let mut out = self.clone();
        for (o, x) in out.data.iter_mut().zip(&other.data) {
            *o += x;
        }
        Ok(out)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor4) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Dimension {
                axis: "element count",
                expected: self.len(),
                actual: other.len(),
            });
        }
        for (o, x) in self.data.iter_mut().zip(&other.data) {
            *o += x;
        }
        Ok(())
    }

    /// Largest absolute element difference; panics if dims differ.
    pub fn max_abs_diff(&self, other: &Tensor4) -> f32 {
        assert_eq!(self.dims(), other.dims(), "tensor dims differ");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max)
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().map(|x| x.abs()).fold(0.0f32, f32::max)
    }
}

/// Dense row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                axis: "element count",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub(crate) fn set(&mut self, r: usize, c: usize, value: f32) {
        let idx = r * self.cols + c;
        self.data[idx] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transposed(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Reinterprets the buffer as an NCHW tensor (order-preserving).
    pub fn into_tensor(self, n: usize, c: usize, h: usize, w: usize) -> Result<Tensor4> {
        Tensor4::from_vec(n, c, h, w, self.data)
    }

    /// `self += scale * other`, entry-wise.
    pub fn scaled_add(&mut self, other: &Matrix, scale: f32) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Dimension {
                axis: "matrix shape",
                expected: self.rows * self.cols,
                actual: other.rows * other.cols,
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f32 {
        assert_eq!(
            (self.rows, self.cols),
            (other.rows, other.cols),
            "matrix dims differ"
        );
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max)
    }
}

/// Element-wise activation kinds used by the networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Exact Gaussian-CDF GELU: `x * Phi(x)`.
    Gelu,
}

#[inline]
pub fn relu_scalar(x: f32) -> f32 {
    x.max(0.0)
}

/// `x * Phi(x)` with `Phi` the standard normal CDF, via `erf`.
#[inline]
pub fn gelu_scalar(x: f32) -> f32 {
    const FRAC_1_SQRT_2: f32 = std::f32::consts::FRAC_1_SQRT_2;
    x * 0.5 * (1.0 + libm::erff(x * FRAC_1_SQRT_2))
}

pub fn activate(input: &Tensor4, kind: Activation) -> Tensor4 {
    let mut out = input.clone();
    match kind {
        Activation::Relu => {
            for x in out.data.iter_mut() {
                *x = relu_scalar(*x);
            }
        }
        Activation::Gelu => {
            for x in out.data.iter_mut() {
                *x = gelu_scalar(*x);
            }
        }
    }
    out
}

/// Mean over the spatial positions of every `(sample, channel)` plane.
pub fn global_avg_pool(input: &Tensor4) -> Tensor4 {
    let (n, c, h, w) = input.dims();
    let hw = h * w;
    let mut out = Tensor4::zeros(n, c, 1, 1);
    for i in 0..n {
        for j in 0..c {
            let base = (i * c + j) * hw;
            let mut acc = 0.0f32;
            for x in &input.data[base..base + hw] {
                acc += x;
            }
            out.data[i * c + j] = acc / hw as f32;
        }
    }
    out
}

/// Adds a per-channel vector `(n, c, 1, 1)` to every spatial position of `map`.
pub fn broadcast_add_channel(map: &Tensor4, vec: &Tensor4) -> Result<Tensor4> {
    let (n, c, h, w) = map.dims();
    if vec.dims() != (n, c, 1, 1) {
        return Err(Error::Dimension {
            axis: "channel vector",
            expected: n * c,
            actual: vec.len(),
        });
    }
    let mut out = map.clone();
    let hw = h * w;
    for i in 0..n {
        for j in 0..c {
            let add = vec.data[i * c + j];
            let base = (i * c + j) * hw;
            for x in &mut out.data[base..base + hw] {
                *x += add;
            }
        }
    }
    Ok(out)
}

/// Tiles `(n, c, h, w)` into non-overlapping `ph x pw` patches, returned as
/// `(n * (h/ph) * (w/pw), c, ph, pw)`.
///
/// Patch order is fixed: sample-major, then row-major over the patch grid, so
/// output sample `(i * gh + gy) * gw + gx` holds the patch at grid cell
/// `(gy, gx)` of input sample `i`.
pub fn split_patches(input: &Tensor4, ph: usize, pw: usize) -> Result<Tensor4> {
    let (n, c, h, w) = input.dims();
    if ph == 0 || h % ph != 0 {
        return Err(Error::config(format!(
            "patch height {ph} must divide feature height {h}"
        )));
    }
    if pw == 0 || w % pw != 0 {
        return Err(Error::config(format!(
            "patch width {pw} must divide feature width {w}"
        )));
    }
    let gh = h / ph;
    let gw = w / pw;
    let mut out = Tensor4::zeros(n * gh * gw, c, ph, pw);
    for i in 0..n {
        for gy in 0..gh {
            for gx in 0..gw {
                let patch = (i * gh + gy) * gw + gx;
                for j in 0..c {
                    for py in 0..ph {
                        let src = input.index(i, j, gy * ph + py, gx * pw);
                        let dst = out.index(patch, j, py, 0);
                        out.data[dst..dst + pw]
                            .copy_from_slice(&input.data[src..src + pw]);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`split_patches`] for a `gh x gw` patch grid.
pub fn restore_patches(patches: &Tensor4, gh: usize, gw: usize) -> Result<Tensor4> {
    let (p, c, ph, pw) = patches.dims();
    if gh == 0 || gw == 0 || p % (gh * gw) != 0 {
        return Err(Error::config(format!(
            "patch batch {p} is not a multiple of the {gh}x{gw} grid"
        )));
    }
    let n = p / (gh * gw);
    let mut out = Tensor4::zeros(n, c, gh * ph, gw * pw);
    for i in 0..n {
        for gy in 0..gh {
            for gx in 0..gw {
                let patch = (i * gh + gy) * gw + gx;
                for j in 0..c {
                    for py in 0..ph {
                        let src = patches.index(patch, j, py, 0);
                        let dst = out.index(i, j, gy * ph + py, gx * pw);
                        out.data[dst..dst + pw]
                            .copy_from_slice(&patches.data[src..src + pw]);
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq_tensor(n: usize, c: usize, h: usize, w: usize) -> Tensor4 {
        let data = (0..n * c * h * w).map(|x| x as f32).collect();
        Tensor4::from_vec(n, c, h, w, data).unwrap()
    }

    #[test]
    fn reshape_preserves_element_order() {
        let t = seq_tensor(1, 2, 2, 2);
        let flat = t.clone().reshape(1, 8, 1, 1).unwrap();
        assert_eq!(flat.data(), t.data());
    }

    #[test]
    fn reshape_round_trip_is_bit_exact() {
        let t = seq_tensor(2, 3, 4, 5);
        let back = t
            .clone()
            .reshape(6, 2, 5, 2)
            .unwrap()
            .reshape(2, 3, 4, 5)
            .unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn reshape_rejects_count_mismatch() {
        let t = seq_tensor(1, 2, 2, 2);
        assert!(matches!(
            t.reshape(1, 3, 2, 2),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn identity_matrix_reshapes_to_identity_image_batch() {
        // The (chw, c, h, w) view of I(chw, chw): image b has a single 1.0 at
        // flat position b.
        let (c, h, w) = (2, 2, 2);
        let chw = c * h * w;
        let m = Matrix::identity(chw).into_tensor(chw, c, h, w).unwrap();
        for b in 0..chw {
            for pos in 0..chw {
                let expect = if pos == b { 1.0 } else { 0.0 };
                assert_eq!(m.sample(b)[pos], expect);
            }
        }
    }

    #[test]
    fn relu_and_gelu_reference_points() {
        assert_eq!(relu_scalar(-1.0), 0.0);
        assert_eq!(relu_scalar(2.0), 2.0);
        assert_eq!(gelu_scalar(0.0), 0.0);
        // 1 * Phi(1) = 0.841345
        assert!((gelu_scalar(1.0) - 0.841_344_7).abs() < 1e-4);
    }

    #[test]
    fn global_avg_pool_examples() {
        let constant = Tensor4::filled(1, 2, 3, 3, 2.5);
        let pooled = global_avg_pool(&constant);
        assert_eq!(pooled.dims(), (1, 2, 1, 1));
        assert_eq!(pooled.data(), &[2.5, 2.5]);

        let t = Tensor4::from_vec(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&t).data(), &[2.5]);
    }

    #[test]
    fn pool_is_invariant_to_spatial_permutation() {
        let t = Tensor4::from_vec(1, 1, 2, 2, vec![4.0, 1.0, 3.0, 2.0]).unwrap();
        let p = Tensor4::from_vec(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&t).data(), global_avg_pool(&p).data());
    }

    #[test]
    fn split_with_full_patch_is_identity() {
        let t = seq_tensor(2, 3, 4, 6);
        let s = split_patches(&t, 4, 6).unwrap();
        assert_eq!(s, t);
    }

    #[test]
    fn split_restore_round_trip_bit_exact() {
        let t = seq_tensor(2, 3, 4, 6);
        let s = split_patches(&t, 2, 3).unwrap();
        assert_eq!(s.dims(), (2 * 2 * 2, 3, 2, 3));
        let r = restore_patches(&s, 2, 2).unwrap();
        assert_eq!(r, t);
    }

    #[test]
    fn patch_count_for_wide_map() {
        // A 256x512 map in 64x64 patches tiles into 32 patches per sample.
        let t = Tensor4::zeros(1, 1, 256, 512);
        let s = split_patches(&t, 64, 64).unwrap();
        assert_eq!(s.n(), 32);
    }

    #[test]
    fn split_rejects_non_divisible_dims() {
        let t = seq_tensor(1, 1, 4, 4);
        assert!(matches!(split_patches(&t, 3, 2), Err(Error::Config(_))));
    }

    #[test]
    fn broadcast_add_covers_all_positions() {
        let map = Tensor4::zeros(1, 2, 2, 2);
        let vec = Tensor4::from_vec(1, 2, 1, 1, vec![1.0, -2.0]).unwrap();
        let out = broadcast_add_channel(&map, &vec).unwrap();
        assert_eq!(out.data(), &[1.0, 1.0, 1.0, 1.0, -2.0, -2.0, -2.0, -2.0]);
    }
}
