//! Locality injection: converting conv kernels into equivalent FC kernels,
//! fusing batch-norm, and merging whole branch sets into one FC layer.
//!
//! The conversion follows the identity-matrix trick: convolving a reshaped
//! identity matrix with kernel `F` yields, after a reshape and a transpose,
//! the unique matrix `W` with `MMUL(M, W) = CONV(M, F, p)` for every input
//! `M`. Because the construction runs through the same `conv2d` used at
//! inference time, the equivalence holds for this implementation by
//! construction — and is still cross-checked against [`toeplitz_oracle`],
//! which builds the same matrix from index arithmetic alone and never calls
//! `conv2d`.

use crate::error::{Error, Result};
use crate::layers::{conv2d, BnParams, ConvLayer, FcLayer};
use crate::tensor::{Matrix, Tensor4};

/// An FC kernel equivalent to a convolution, with the conv's provenance
/// recorded for audit.
#[derive(Debug, Clone)]
pub struct ToeplitzResult {
    /// `(o*h*w, c*h*w)` for the dense form, `(s*h*w, h*w)` for the per-set
    /// depth-wise form.
    pub weight: Matrix,
    pub kernel_hw: (usize, usize),
    pub padding: usize,
    pub groups: usize,
}

fn check_convertible(layer: &ConvLayer, c: usize) -> Result<()> {
    if layer.stride() != 1 {
        return Err(Error::unsupported(format!(
            "conv-to-fc requires stride 1, got {}",
            layer.stride()
        )));
    }
    if !layer.is_size_preserving() {
        let (kh, kw) = layer.kernel_hw();
        return Err(Error::unsupported(format!(
            "conv-to-fc requires size-preserving padding (2p = k - 1), got k = {kh}x{kw}, p = {}",
            layer.padding()
        )));
    }
    if layer.bias().is_some() {
        return Err(Error::unsupported(
            "conv-to-fc converts the linear kernel only; strip the bias and carry it separately",
        ));
    }
    if c != layer.in_channels() {
        return Err(Error::Dimension {
            axis: "input channels",
            expected: layer.in_channels(),
            actual: c,
        });
    }
    Ok(())
}

/// Builds `W (o*h*w, c*h*w)` such that multiplying flattened inputs by `W^T`
/// equals convolving them with `layer` on `(c, h, w)` feature maps.
///
/// The `c*h*w` identity images are convolved as one batch; for grouped convs
/// the zero blocks fall out naturally, yielding a block-diagonal matrix in
/// (channel-major, then spatial) flattening order.
pub fn conv_to_fc(layer: &ConvLayer, c: usize, h: usize, w: usize) -> Result<ToeplitzResult> {
    check_convertible(layer, c)?;
    let chw = c * h * w;
    let o = layer.out_channels();
    let identity_maps = Matrix::identity(chw).into_tensor(chw, c, h, w)?;
    let responses = conv2d(&identity_maps, layer)?;
    let weight = responses.into_matrix(chw, o * h * w)?.transposed();
    Ok(ToeplitzResult {
        weight,
        kernel_hw: layer.kernel_hw(),
        padding: layer.padding(),
        groups: layer.groups(),
    })
}

/// Depth-wise variant for a share-set kernel `(s, 1, k, k)`: returns the
/// stacked per-set blocks `(s*h*w, h*w)` matching the set-sharing FC layout.
///
/// All sets are converted in one batched call: image `b` of the probe batch
/// carries identity image `b` on every one of its `s` channels, so the
/// depth-wise response at channel `i` is column `b` of set `i`'s block.
pub fn conv_to_fc_per_set(layer: &ConvLayer, h: usize, w: usize) -> Result<ToeplitzResult> {
    let s = layer.groups();
    if layer.in_per_group() != 1 || layer.out_channels() != s {
        return Err(Error::unsupported(format!(
            "per-set conversion needs a depth-wise kernel (s, 1, k, k); got o = {}, c/g = {}, g = {}",
            layer.out_channels(),
            layer.in_per_group(),
            s
        )));
    }
    check_convertible(layer, s)?;
    let hw = h * w;
    let mut probe = Tensor4::zeros(hw, s, h, w);
    for b in 0..hw {
        for i in 0..s {
            let idx = probe.index(b, i, b / w, b % w);
            probe.data_mut()[idx] = 1.0;
        }
    }
    let responses = conv2d(&probe, layer)?;
    let weight = responses.into_matrix(hw, s * hw)?.transposed();
    Ok(ToeplitzResult {
        weight,
        kernel_hw: layer.kernel_hw(),
        padding: layer.padding(),
        groups: s,
    })
}

/// Independent construction of the same matrix from the convolution
/// definition: entry `[(oc, u', v'), (ci, u, v)]` is
/// `F[oc, ci, u - u' + p, v - v' + p]` when that kernel index exists, else 0.
/// Pure index arithmetic; never calls `conv2d`.
pub fn toeplitz_oracle(layer: &ConvLayer, c: usize, h: usize, w: usize) -> Result<Matrix> {
    check_convertible(layer, c)?;
    let o = layer.out_channels();
    let g = layer.groups();
    let opg = o / g;
    let cpg = layer.in_per_group();
    let (kh, kw) = layer.kernel_hw();
    let p = layer.padding() as isize;
    let hw = h * w;
    let mut weight = Matrix::zeros(o * hw, c * hw);
    for oc in 0..o {
        let gi = oc / opg;
        for ou in 0..h {
            for ov in 0..w {
                let row = (oc * h + ou) * w + ov;
                for cil in 0..cpg {
                    let ci = gi * cpg + cil;
                    for ky in 0..kh {
                        let iu = ou as isize + ky as isize - p;
                        if iu < 0 || iu >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let iv = ov as isize + kx as isize - p;
                            if iv < 0 || iv >= w as isize {
                                continue;
                            }
                            let col = (ci * h + iu as usize) * w + iv as usize;
                            weight.set(row, col, layer.kernel_at(oc, cil, ky, kx));
                        }
                    }
                }
            }
        }
    }
    Ok(weight)
}

/// Oracle for the per-set layout `(s*h*w, h*w)` of a depth-wise kernel.
pub fn toeplitz_oracle_per_set(layer: &ConvLayer, h: usize, w: usize) -> Result<Matrix> {
    let s = layer.groups();
    if layer.in_per_group() != 1 || layer.out_channels() != s {
        return Err(Error::unsupported(
            "per-set oracle needs a depth-wise kernel (s, 1, k, k)",
        ));
    }
    check_convertible(layer, s)?;
    let (kh, kw) = layer.kernel_hw();
    let p = layer.padding() as isize;
    let hw = h * w;
    let mut weight = Matrix::zeros(s * hw, hw);
    for i in 0..s {
        for ou in 0..h {
            for ov in 0..w {
                let row = i * hw + ou * w + ov;
                for ky in 0..kh {
                    let iu = ou as isize + ky as isize - p;
                    if iu < 0 || iu >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let iv = ov as isize + kx as isize - p;
                        if iv < 0 || iv >= w as isize {
                            continue;
                        }
                        let col = iu as usize * w + iv as usize;
                        weight.set(row, col, layer.kernel_at(i, 0, ky, kx));
                    }
                }
            }
        }
    }
    Ok(weight)
}

/// Folds a following batch-norm into the conv, returning a conv with bias:
/// `F'_i = (gamma_i / sigma_i) F_i`, `b'_i = -mu_i gamma_i / sigma_i + beta_i`
/// (plus the rescaled original bias when present).
pub fn fuse_bn_conv(layer: &ConvLayer, bn: &BnParams) -> Result<ConvLayer> {
    let o = layer.out_channels();
    if bn.len() != o {
        return Err(Error::Dimension {
            axis: "bn channel count",
            expected: o,
            actual: bn.len(),
        });
    }
    let per_out = layer.in_per_group() * layer.kernel_hw().0 * layer.kernel_hw().1;
    let mut kernel = layer.kernel().to_vec();
    let mut bias = vec![0.0f32; o];
    for oc in 0..o {
        let (a, b) = bn.scale_shift(oc);
        for kv in &mut kernel[oc * per_out..(oc + 1) * per_out] {
            *kv *= a;
        }
        bias[oc] = b + a * layer.bias().map_or(0.0, |prev| prev[oc]);
    }
    let (kh, kw) = layer.kernel_hw();
    ConvLayer::new(
        kernel,
        o,
        layer.in_per_group(),
        kh,
        kw,
        Some(bias),
        layer.padding(),
        layer.stride(),
        layer.groups(),
    )
}

/// Folds a batch-norm over `s` share-set channels into a set-sharing FC
/// `(s*hw, hw)`: rows of set `i` are scaled by `gamma_i / sigma_i` and the
/// bias entries for those rows become `-mu_i gamma_i / sigma_i + beta_i`
/// (plus the rescaled original bias when present).
pub fn fuse_bn_grouped_fc(fc: &FcLayer, bn: &BnParams) -> Result<FcLayer> {
    let s = bn.len();
    if fc.groups() != s {
        return Err(Error::Dimension {
            axis: "fc groups",
            expected: s,
            actual: fc.groups(),
        });
    }
    let hw = fc.weight().cols();
    let mut weight = fc.weight().clone();
    let mut bias = vec![0.0f32; s * hw];
    for i in 0..s {
        let (a, b) = bn.scale_shift(i);
        for r in i * hw..(i + 1) * hw {
            for x in &mut weight.data_mut()[r * hw..(r + 1) * hw] {
                *x *= a;
            }
            bias[r] = b + a * fc.bias().map_or(0.0, |prev| prev[r]);
        }
    }
    FcLayer::new_grouped(weight, Some(bias), s)
}

/// Merges a train-form Channel Perceptron (`fc3` + `bn3`) and its parallel
/// depth-wise conv branches into the single inference-form FC.
///
/// Every conv is BN-fused, converted per set, and added onto the fused FC
/// kernel; conv biases are replicated `h*w` times per set and added onto the
/// FC bias.
pub fn merge_local_into_channel(
    fc3: &FcLayer,
    bn3: &BnParams,
    branches: &[(ConvLayer, BnParams)],
    share_sets: usize,
    h: usize,
    w: usize,
) -> Result<FcLayer> {
    let hw = h * w;
    if fc3.groups() != share_sets || fc3.weight().cols() != hw {
        return Err(Error::Dimension {
            axis: "fc3 weight shape",
            expected: share_sets * hw,
            actual: fc3.weight().rows(),
        });
    }
    if bn3.len() != share_sets {
        return Err(Error::Dimension {
            axis: "bn3 channel count",
            expected: share_sets,
            actual: bn3.len(),
        });
    }

    let fused = fuse_bn_grouped_fc(fc3, bn3)?;
    let mut weight = fused.weight().clone();
    let mut bias = fused.bias().expect("fused fc always has a bias").to_vec();

    for (conv, bn) in branches {
        if conv.groups() != share_sets || conv.out_channels() != share_sets {
            return Err(Error::unsupported(format!(
                "local branch must be depth-wise over {share_sets} share-sets, got o = {}, g = {}",
                conv.out_channels(),
                conv.groups()
            )));
        }
        let fused_conv = fuse_bn_conv(conv, bn)?;
        let branch_bias = fused_conv.bias().expect("bn fusion always adds a bias").to_vec();
        let linear = fused_conv.with_bias(None)?;
        let toeplitz = conv_to_fc_per_set(&linear, h, w)?;
        weight.scaled_add(&toeplitz.weight, 1.0)?;
        for i in 0..share_sets {
            for r in i * hw..(i + 1) * hw {
                bias[r] += branch_bias[i];
            }
        }
    }

    FcLayer::new_grouped(weight, Some(bias), share_sets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{bn_inference, fc_forward};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_kernel(rng: &mut StdRng, len: usize, fan_in: usize) -> Vec<f32> {
        let b = (6.0 / fan_in as f32).sqrt();
        (0..len).map(|_| rng.gen_range(-b..b)).collect()
    }

    fn random_tensor(rng: &mut StdRng, n: usize, c: usize, h: usize, w: usize) -> Tensor4 {
        let data = (0..n * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor4::from_vec(n, c, h, w, data).unwrap()
    }

    fn random_bn(rng: &mut StdRng, len: usize) -> BnParams {
        BnParams::new(
            (0..len).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            (0..len).map(|_| rng.gen_range(0.5..1.5)).collect(),
            (0..len).map(|_| rng.gen_range(0.5..1.5)).collect(),
            (0..len).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn pointwise_unit_kernel_is_identity_matrix() {
        let layer = ConvLayer::dense(vec![1.0], 1, 1, 1, 0).unwrap();
        let t = conv_to_fc(&layer, 1, 2, 2).unwrap();
        assert_eq!(t.weight, Matrix::identity(4));
    }

    #[test]
    fn all_ones_3x3_rows_sum_to_window_coverage() {
        // Every 3x3 window over a 2x2 map covers all 4 pixels, so W * 1 = 4.
        let layer = ConvLayer::dense(vec![1.0; 9], 1, 1, 3, 1).unwrap();
        let t = conv_to_fc(&layer, 1, 2, 2).unwrap();
        for r in 0..4 {
            let sum: f32 = t.weight.row(r).iter().sum();
            assert_eq!(sum, 4.0);
        }
    }

    #[test]
    fn oracle_zero_kernel_and_scaled_identity() {
        let zero = ConvLayer::dense(vec![0.0; 9], 1, 1, 3, 1).unwrap();
        let w = toeplitz_oracle(&zero, 1, 3, 3).unwrap();
        assert!(w.data().iter().all(|x| *x == 0.0));

        let alpha = ConvLayer::dense(vec![2.5], 1, 1, 1, 0).unwrap();
        let w = toeplitz_oracle(&alpha, 1, 2, 3).unwrap();
        for r in 0..6 {
            for c in 0..6 {
                assert_eq!(w.at(r, c), if r == c { 2.5 } else { 0.0 });
            }
        }
    }

    #[test]
    fn construction_matches_oracle_on_mixed_shapes() {
        let mut rng = StdRng::seed_from_u64(7);
        for &(o, c, k, g, h, w) in &[
            (1usize, 1usize, 1usize, 1usize, 3usize, 3usize),
            (2, 2, 3, 1, 4, 3),
            (2, 2, 3, 2, 3, 4),
            (3, 3, 1, 3, 2, 5),
            (4, 2, 3, 2, 4, 4),
        ] {
            let cpg = c / g;
            let kernel = random_kernel(&mut rng, o * cpg * k * k, cpg * k * k);
            let layer = ConvLayer::new(kernel, o, cpg, k, k, None, (k - 1) / 2, 1, g).unwrap();
            let built = conv_to_fc(&layer, c, h, w).unwrap();
            let oracle = toeplitz_oracle(&layer, c, h, w).unwrap();
            assert!(
                built.weight.max_abs_diff(&oracle) <= 1e-6,
                "mismatch for o={o} c={c} k={k} g={g} {h}x{w}"
            );
        }
    }

    #[test]
    fn per_set_blocks_match_dense_diagonal() {
        let mut rng = StdRng::seed_from_u64(11);
        let (s, h, w, k) = (3usize, 3usize, 4usize, 3usize);
        let hw = h * w;
        let kernel = random_kernel(&mut rng, s * k * k, k * k);
        let layer = ConvLayer::depthwise(kernel, s, k).unwrap();

        let per_set = conv_to_fc_per_set(&layer, h, w).unwrap();
        let oracle = toeplitz_oracle_per_set(&layer, h, w).unwrap();
        assert!(per_set.weight.max_abs_diff(&oracle) <= 1e-6);

        let dense = conv_to_fc(&layer, s, h, w).unwrap();
        for i in 0..s {
            for r in 0..hw {
                for q in 0..hw {
                    assert_eq!(
                        per_set.weight.at(i * hw + r, q),
                        dense.weight.at(i * hw + r, i * hw + q)
                    );
                }
            }
        }
    }

    #[test]
    fn toeplitz_row_sparsity_bound() {
        let mut rng = StdRng::seed_from_u64(13);
        let layer = ConvLayer::new(
            random_kernel(&mut rng, 4 * 2 * 9, 18),
            4,
            2,
            3,
            3,
            None,
            1,
            1,
            2,
        )
        .unwrap();
        let t = conv_to_fc(&layer, 4, 5, 5).unwrap();
        let bound = 2 * 9; // c_per_group * k^2
        for r in 0..t.weight.rows() {
            let nz = t.weight.row(r).iter().filter(|x| **x != 0.0).count();
            assert!(nz <= bound, "row {r} has {nz} nonzeros > {bound}");
        }
    }

    #[test]
    fn rejects_strided_and_size_changing_convs() {
        let strided = ConvLayer::new(vec![0.0; 9], 1, 1, 3, 3, None, 1, 2, 1).unwrap();
        assert!(matches!(
            conv_to_fc(&strided, 1, 4, 4),
            Err(Error::Unsupported(_))
        ));
        let shrinking = ConvLayer::dense(vec![0.0; 9], 1, 1, 3, 0).unwrap();
        assert!(matches!(
            conv_to_fc(&shrinking, 1, 4, 4),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn bn_fusion_identity_and_hand_example() {
        let conv = ConvLayer::dense(vec![2.0], 1, 1, 1, 0).unwrap();
        let fused = fuse_bn_conv(&conv, &BnParams::identity(1)).unwrap();
        assert_eq!(fused.kernel(), &[2.0]);
        assert_eq!(fused.bias().unwrap(), &[0.0]);

        // F' = 4/2 * 2 = 4, b' = -1*4/2 + 0.5 = -1.5
        let bn = BnParams::new(vec![1.0], vec![2.0], vec![4.0], vec![0.5]).unwrap();
        let fused = fuse_bn_conv(&conv, &bn).unwrap();
        assert_eq!(fused.kernel(), &[4.0]);
        assert_eq!(fused.bias().unwrap(), &[-1.5]);
    }

    #[test]
    fn bn_fusion_forward_equivalence() {
        let mut rng = StdRng::seed_from_u64(17);
        let (o, c, k, h, w) = (3, 2, 3, 5, 4);
        let conv = ConvLayer::dense(random_kernel(&mut rng, o * c * k * k, c * k * k), o, c, k, 1)
            .unwrap();
        let bn = random_bn(&mut rng, o);
        let x = random_tensor(&mut rng, 2, c, h, w);

        let direct = bn_inference(&conv2d(&x, &conv).unwrap(), &bn).unwrap();
        let fused = conv2d(&x, &fuse_bn_conv(&conv, &bn).unwrap()).unwrap();
        assert!(direct.max_abs_diff(&fused) <= 1e-5);
    }

    #[test]
    fn grouped_fc_fusion_hand_example() {
        // s=2, hw=1, W=[[2],[3]], gamma=[1,2], sigma=[1,1], mu=[0,0], beta=[0,1]
        let fc = FcLayer::new_grouped(Matrix::from_vec(2, 1, vec![2.0, 3.0]).unwrap(), None, 2)
            .unwrap();
        let bn =
            BnParams::new(vec![0.0, 0.0], vec![1.0, 1.0], vec![1.0, 2.0], vec![0.0, 1.0]).unwrap();
        let fused = fuse_bn_grouped_fc(&fc, &bn).unwrap();
        assert_eq!(fused.weight().data(), &[2.0, 6.0]);
        assert_eq!(fused.bias().unwrap(), &[0.0, 1.0]);

        let id = fuse_bn_grouped_fc(&fc, &BnParams::identity(2)).unwrap();
        assert_eq!(id.weight().data(), fc.weight().data());
        assert_eq!(id.bias().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn grouped_fc_fusion_forward_equivalence() {
        let mut rng = StdRng::seed_from_u64(19);
        let (s, h, w) = (2usize, 3usize, 3usize);
        let hw = h * w;
        let weight = Matrix::from_vec(
            s * hw,
            hw,
            random_kernel(&mut rng, s * hw * hw, hw),
        )
        .unwrap();
        let fc = FcLayer::new_grouped(weight, None, s).unwrap();
        let bn = random_bn(&mut rng, s);
        let x = random_tensor(&mut rng, 4, s, h, w);

        let direct = bn_inference(&fc_forward(&x, &fc).unwrap(), &bn).unwrap();
        let fused = fc_forward(&x, &fuse_bn_grouped_fc(&fc, &bn).unwrap()).unwrap();
        assert!(direct.max_abs_diff(&fused) <= 1e-5);
    }

    #[test]
    fn merge_with_no_branches_keeps_fc3() {
        let (s, h, w) = (2usize, 2usize, 2usize);
        let hw = h * w;
        let weight = Matrix::from_vec(s * hw, hw, (0..s * hw * hw).map(|x| x as f32).collect())
            .unwrap();
        let fc3 = FcLayer::new_grouped(weight.clone(), None, s).unwrap();
        let merged =
            merge_local_into_channel(&fc3, &BnParams::identity(s), &[], s, h, w).unwrap();
        assert_eq!(merged.weight().data(), weight.data());
        assert!(merged.bias().unwrap().iter().all(|b| *b == 0.0));
    }

    #[test]
    fn merge_zero_fc3_with_unit_pointwise_gives_stacked_identities() {
        let (s, h, w) = (2usize, 2usize, 2usize);
        let hw = h * w;
        let fc3 = FcLayer::new_grouped(Matrix::zeros(s * hw, hw), None, s).unwrap();
        let conv = ConvLayer::depthwise(vec![1.0; s], s, 1).unwrap();
        let merged = merge_local_into_channel(
            &fc3,
            &BnParams::identity(s),
            &[(conv, BnParams::identity(s))],
            s,
            h,
            w,
        )
        .unwrap();
        for i in 0..s {
            for r in 0..hw {
                for q in 0..hw {
                    let expect = if r == q { 1.0 } else { 0.0 };
                    assert_eq!(merged.weight().at(i * hw + r, q), expect);
                }
            }
        }
    }

    #[test]
    fn merge_forward_matches_branch_sum() {
        let mut rng = StdRng::seed_from_u64(23);
        let (s, h, w) = (4usize, 6usize, 5usize);
        let hw = h * w;
        let fc3 = FcLayer::new_grouped(
            Matrix::from_vec(s * hw, hw, random_kernel(&mut rng, s * hw * hw, hw)).unwrap(),
            None,
            s,
        )
        .unwrap();
        let bn3 = random_bn(&mut rng, s);
        let branches: Vec<(ConvLayer, BnParams)> = [1usize, 3]
            .iter()
            .map(|&k| {
                let conv = ConvLayer::depthwise(
                    random_kernel(&mut rng, s * k * k, k * k),
                    s,
                    k,
                )
                .unwrap();
                (conv, random_bn(&mut rng, s))
            })
            .collect();

        let x = random_tensor(&mut rng, 3, s, h, w);
        let mut expect = bn_inference(&fc_forward(&x, &fc3).unwrap(), &bn3).unwrap();
        for (conv, bn) in &branches {
            let branch = bn_inference(&conv2d(&x, conv).unwrap(), bn).unwrap();
            expect.add_assign(&branch).unwrap();
        }

        let merged = merge_local_into_channel(&fc3, &bn3, &branches, s, h, w).unwrap();
        let got = fc_forward(&x, &merged).unwrap();
        assert!(expect.max_abs_diff(&got) <= 1e-4);
    }
}
