//! Equivalence verification suites.
//!
//! Each suite runs a family of randomized or exhaustive checks and reports
//! the worst-case deviation against its tolerance. The `verify` CLI
//! subcommand and the acceptance tests both run these exact functions, so a
//! non-zero CLI exit and a red acceptance test mean the same thing.

use rand::Rng;

use crate::block::{Mode, RepMlpBlock, RepMlpBlockConfig};
use crate::error::Result;
use crate::init::{rng_from_seed, SeededRng};
use crate::layers::{bn_inference, conv2d, fc_forward, BnParams, ConvLayer, FcLayer};
use crate::net::{build_net, NetConfig, Network};
use crate::reparam::{
    conv_to_fc, conv_to_fc_per_set, fuse_bn_conv, fuse_bn_grouped_fc, toeplitz_oracle,
    toeplitz_oracle_per_set,
};
use crate::tensor::{Matrix, Tensor4};

/// Construction vs index-arithmetic oracle.
pub const TOL_ORACLE: f32 = 1e-5;
/// `MMUL(M, W^(F,p))` vs `CONV(M, F, p)`.
pub const TOL_CONV_FC: f32 = 1e-4;
/// Train vs deploy forward of a single block.
pub const TOL_BLOCK: f32 = 1e-4;
/// Train vs deploy forward of a whole network.
pub const TOL_NET: f32 = 1e-3;
/// Pre- vs post-BN-fusion forward.
pub const TOL_FUSION: f32 = 1e-5;
/// Linearity of the conv-to-FC conversion.
pub const TOL_LINEARITY: f32 = 1e-5;

/// Result of one suite: worst observed deviation over all cases.
#[derive(Debug, Clone)]
pub struct SuiteOutcome {
    pub name: &'static str,
    pub cases: usize,
    pub worst: f32,
    pub tolerance: f32,
}

impl SuiteOutcome {
    pub fn passed(&self) -> bool {
        self.worst.is_finite() && self.worst <= self.tolerance
    }

    pub fn line(&self) -> String {
        format!(
            "{:<18} cases={:<5} worst={:<10.3e} tol={:<8.0e} {}",
            self.name,
            self.cases,
            self.worst,
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

fn he_kernel(rng: &mut SeededRng, len: usize, fan_in: usize) -> Vec<f32> {
    let b = (6.0 / fan_in.max(1) as f32).sqrt();
    (0..len).map(|_| rng.gen_range(-b..b)).collect()
}

fn random_tensor(rng: &mut SeededRng, n: usize, c: usize, h: usize, w: usize) -> Tensor4 {
    let data = (0..n * c * h * w).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    Tensor4::from_vec(n, c, h, w, data).expect("sized to fit")
}

fn random_bn(rng: &mut SeededRng, len: usize) -> BnParams {
    BnParams::new(
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        (0..len).map(|_| rng.gen_range(0.5..1.5)).collect(),
        (0..len).map(|_| rng.gen_range(0.5..1.5)).collect(),
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .expect("sigma range is positive")
}

/// Compares [`conv_to_fc`] with [`toeplitz_oracle`] (and the per-set pair).
///
/// With `exhaustive` the dense grid sweeps `k in {1,3}`, `h,w in 1..=4`,
/// `c,o in {1,2}`, `g in {1,c}`; otherwise a random subsample of the same
/// space runs.
pub fn oracle_agreement(seed: u64, exhaustive: bool) -> Result<SuiteOutcome> {
    let mut rng = rng_from_seed(seed);
    let mut worst = 0.0f32;
    let mut cases = 0usize;

    let mut check = |layer: &ConvLayer, c: usize, h: usize, w: usize| -> Result<f32> {
        let built = conv_to_fc(layer, c, h, w)?;
        let oracle = toeplitz_oracle(layer, c, h, w)?;
        Ok(built.weight.max_abs_diff(&oracle))
    };

    for k in [1usize, 3] {
        for h in 1..=4usize {
            for w in 1..=4usize {
                for c in [1usize, 2] {
                    for o in [1usize, 2] {
                        for g in [1usize, c] {
                            if c % g != 0 || o % g != 0 {
                                continue;
                            }
                            if !exhaustive && rng.gen_range(0.0..1.0) > 0.3 {
                                continue;
                            }
                            let cpg = c / g;
                            let kernel = he_kernel(&mut rng, o * cpg * k * k, cpg * k * k);
                            let layer = ConvLayer::new(
                                kernel,
                                o,
                                cpg,
                                k,
                                k,
                                None,
                                (k - 1) / 2,
                                1,
                                g,
                            )?;
                            worst = worst.max(check(&layer, c, h, w)?);
                            cases += 1;
                        }
                    }
                }
            }
        }
    }

    // depth-wise share-set layout against its own oracle
    for k in [1usize, 3] {
        for s in [1usize, 2, 3] {
            for h in 1..=4usize {
                for w in 1..=4usize {
                    if !exhaustive && rng.gen_range(0.0..1.0) > 0.3 {
                        continue;
                    }
                    let layer =
                        ConvLayer::depthwise(he_kernel(&mut rng, s * k * k, k * k), s, k)?;
                    let built = conv_to_fc_per_set(&layer, h, w)?;
                    let oracle = toeplitz_oracle_per_set(&layer, h, w)?;
                    worst = worst.max(built.weight.max_abs_diff(&oracle));
                    cases += 1;
                }
            }
        }
    }

    Ok(SuiteOutcome {
        name: "oracle-agreement",
        cases,
        worst,
        tolerance: TOL_ORACLE,
    })
}

/// Random `(M, F, p)` cases: multiplying by the constructed matrix must
/// reproduce the convolution.
pub fn conv_fc_equivalence(seed: u64, cases: usize) -> Result<SuiteOutcome> {
    let mut rng = rng_from_seed(seed);
    let mut worst = 0.0f32;
    for case in 0..cases {
        // pin the first case at the largest extent, then sample freely
        let (c, o, k, h, w) = if case == 0 {
            (8usize, 8usize, 3usize, 16usize, 16usize)
        } else {
            (
                rng.gen_range(1..=8),
                rng.gen_range(1..=8),
                if rng.gen_bool(0.5) { 1 } else { 3 },
                rng.gen_range(1..=16),
                rng.gen_range(1..=16),
            )
        };
        let g = if c % 2 == 0 && o % 2 == 0 && rng.gen_bool(0.25) {
            2
        } else {
            1
        };
        let cpg = c / g;
        let kernel = he_kernel(&mut rng, o * cpg * k * k, cpg * k * k);
        let layer = ConvLayer::new(kernel, o, cpg, k, k, None, (k - 1) / 2, 1, g)?;
        let input = random_tensor(&mut rng, rng.gen_range(1..=2), c, h, w);

        let direct = conv2d(&input, &layer)?;
        let toeplitz = conv_to_fc(&layer, c, h, w)?;
        let via_fc = fc_forward(&input, &FcLayer::new_dense(toeplitz.weight, None)?)?;
        worst = worst.max(direct.max_abs_diff(&via_fc));
    }
    Ok(SuiteOutcome {
        name: "conv-fc-equiv",
        cases,
        worst,
        tolerance: TOL_CONV_FC,
    })
}

/// Pre- vs post-fusion forwards for conv-BN and set-sharing-FC-BN pairs.
pub fn bn_fusion(seed: u64, cases_each: usize) -> Result<SuiteOutcome> {
    let mut rng = rng_from_seed(seed);
    let mut worst = 0.0f32;

    for _ in 0..cases_each {
        let (o, c) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let k = if rng.gen_bool(0.5) { 1 } else { 3 };
        let (h, w) = (rng.gen_range(k..=16), rng.gen_range(k..=16));
        let conv = ConvLayer::dense(
            he_kernel(&mut rng, o * c * k * k, c * k * k),
            o,
            c,
            k,
            (k - 1) / 2,
        )?;
        let bn = random_bn(&mut rng, o);
        let x = random_tensor(&mut rng, 2, c, h, w);
        let direct = bn_inference(&conv2d(&x, &conv)?, &bn)?;
        let fused = conv2d(&x, &fuse_bn_conv(&conv, &bn)?)?;
        worst = worst.max(direct.max_abs_diff(&fused));
    }

    for _ in 0..cases_each {
        let s = rng.gen_range(1..=4);
        let (h, w) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let hw = h * w;
        let fc = FcLayer::new_grouped(
            Matrix::from_vec(s * hw, hw, he_kernel(&mut rng, s * hw * hw, hw))?,
            None,
            s,
        )?;
        let bn = random_bn(&mut rng, s);
        let x = random_tensor(&mut rng, 3, s, h, w);
        let direct = bn_inference(&fc_forward(&x, &fc)?, &bn)?;
        let fused = fc_forward(&x, &fuse_bn_grouped_fc(&fc, &bn)?)?;
        worst = worst.max(direct.max_abs_diff(&fused));
    }

    Ok(SuiteOutcome {
        name: "bn-fusion",
        cases: 2 * cases_each,
        worst,
        tolerance: TOL_FUSION,
    })
}

/// The conversion is a linear map of the kernel:
/// `conv_to_fc(a F1 + b F2) = a conv_to_fc(F1) + b conv_to_fc(F2)`.
pub fn conversion_linearity(seed: u64, cases: usize) -> Result<SuiteOutcome> {
    let mut rng = rng_from_seed(seed);
    let mut worst = 0.0f32;
    for _ in 0..cases {
        let (o, c) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let k = if rng.gen_bool(0.5) { 1 } else { 3 };
        let (h, w) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let len = o * c * k * k;
        let f1 = he_kernel(&mut rng, len, c * k * k);
        let f2 = he_kernel(&mut rng, len, c * k * k);
        let (a, b) = (rng.gen_range(-2.0f32..2.0), rng.gen_range(-2.0f32..2.0));
        let combined: Vec<f32> = f1.iter().zip(&f2).map(|(x, y)| a * x + b * y).collect();

        let p = (k - 1) / 2;
        let w1 = conv_to_fc(&ConvLayer::dense(f1, o, c, k, p)?, c, h, w)?.weight;
        let w2 = conv_to_fc(&ConvLayer::dense(f2, o, c, k, p)?, c, h, w)?.weight;
        let wc = conv_to_fc(&ConvLayer::dense(combined, o, c, k, p)?, c, h, w)?.weight;

        let mut expect = Matrix::zeros(w1.rows(), w1.cols());
        expect.scaled_add(&w1, a)?;
        expect.scaled_add(&w2, b)?;
        worst = worst.max(wc.max_abs_diff(&expect));
    }
    Ok(SuiteOutcome {
        name: "linearity",
        cases,
        worst,
        tolerance: TOL_LINEARITY,
    })
}

/// The block-config grid every merge must survive: train and deploy forwards
/// within [`TOL_BLOCK`].
pub fn block_equivalence(seed: u64) -> Result<SuiteOutcome> {
    let mut worst = 0.0f32;
    let mut cases = 0usize;
    let mut block_seed = seed;
    for c in [4usize, 8, 64] {
        for s in [1usize, 2, 4] {
            for hw in [4usize, 8, 16] {
                for kernels in [&[1usize][..], &[3], &[1, 3]] {
                    let cfg = RepMlpBlockConfig::new(c, hw, hw, s).with_local_kernels(kernels);
                    block_seed = block_seed.wrapping_add(1);
                    let block = RepMlpBlock::random(cfg, block_seed)?;
                    let deploy = block.convert()?;
                    let mut rng = rng_from_seed(block_seed ^ 0x5eed);
                    let x = random_tensor(&mut rng, 2, c, hw, hw);
                    worst = worst.max(block.forward(&x)?.max_abs_diff(&deploy.forward(&x)?));
                    cases += 1;
                }
            }
        }
    }
    Ok(SuiteOutcome {
        name: "block-equiv",
        cases,
        worst,
        tolerance: TOL_BLOCK,
    })
}

/// Whole-net train vs deploy forward on a random input.
pub fn net_equivalence(cfg: &NetConfig, seed: u64) -> Result<SuiteOutcome> {
    let net = build_net(cfg, seed)?;
    let deploy = net.convert()?;
    let mut rng = rng_from_seed(seed ^ 0xbead);
    let (h, w) = cfg.input_hw;
    let x = random_tensor(&mut rng, 2, 3, h, w);
    let worst = net.forward(&x)?.max_abs_diff(&deploy.forward(&x)?);
    Ok(SuiteOutcome {
        name: "net-equiv",
        cases: 1,
        worst,
        tolerance: TOL_NET,
    })
}

/// Per-block probe of a converted network plus the final logits, as
/// `(label, max-abs diff)` rows. Both nets must share the config.
pub fn convert_probe(
    train: &Network,
    deploy: &Network,
    seed: u64,
) -> Result<Vec<(String, f32)>> {
    let mut rng = rng_from_seed(seed);
    let cfg = train.cfg();
    let mut rows = Vec::new();
    for (si, (ts, ds)) in train.stages().iter().zip(deploy.stages()).enumerate() {
        let c = cfg.stage_channels(si);
        let (h, w) = cfg.native_stage_hw(si);
        for (bi, (tp, dp)) in ts.pairs().iter().zip(ds.pairs()).enumerate() {
            let x = random_tensor(&mut rng, 2, c, h, w);
            let diff = tp.mlp().forward(&x)?.max_abs_diff(&dp.mlp().forward(&x)?);
            rows.push((format!("stage{}.block{}", si + 1, bi + 1), diff));
        }
    }
    let x = random_tensor(&mut rng, 2, 3, cfg.input_hw.0, cfg.input_hw.1);
    let diff = train.forward(&x)?.max_abs_diff(&deploy.forward(&x)?);
    rows.push(("logits".to_string(), diff));
    Ok(rows)
}

/// Every suite the `verify` subcommand runs, in order.
pub fn run_all(cfg: &NetConfig, seed: u64, exhaustive: bool) -> Result<Vec<SuiteOutcome>> {
    Ok(vec![
        oracle_agreement(seed, exhaustive)?,
        conv_fc_equivalence(seed.wrapping_add(1), 200)?,
        bn_fusion(seed.wrapping_add(2), 100)?,
        conversion_linearity(seed.wrapping_add(3), 50)?,
        block_equivalence(seed.wrapping_add(4))?,
        net_equivalence(cfg, seed.wrapping_add(5))?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass_at_their_tolerances() {
        for s in [
            oracle_agreement(1, false).unwrap(),
            conv_fc_equivalence(2, 25).unwrap(),
            bn_fusion(3, 20).unwrap(),
            conversion_linearity(4, 15).unwrap(),
        ] {
            assert!(s.passed(), "{}", s.line());
        }
    }

    #[test]
    fn equivalence_check_detects_a_tampered_merge() {
        // perturbing one merged weight by 1e-2 must blow the block tolerance
        let cfg = RepMlpBlockConfig::new(8, 6, 6, 2);
        let block = RepMlpBlock::random(cfg, 99).unwrap();
        let mut deploy = block.convert().unwrap();
        {
            let (_, _, fc3, _, _) = deploy.parts_mut();
            let w = fc3.weight_mut();
            let v = w.at(0, 0);
            w.set(0, 0, v + 1e-2);
        }
        let mut rng = rng_from_seed(100);
        let x = random_tensor(&mut rng, 4, 8, 6, 6);
        let diff = block
            .forward(&x)
            .unwrap()
            .max_abs_diff(&deploy.forward(&x).unwrap());
        assert!(
            diff > TOL_BLOCK,
            "perturbation went unnoticed: diff = {diff}"
        );
    }

    #[test]
    fn outcome_lines_report_status() {
        let ok = SuiteOutcome {
            name: "demo",
            cases: 3,
            worst: 1e-7,
            tolerance: 1e-5,
        };
        assert!(ok.line().ends_with("PASS"));
        let bad = SuiteOutcome {
            worst: 1e-3,
            ..ok
        };
        assert!(bad.line().ends_with("FAIL"));
    }
}
