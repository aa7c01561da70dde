//! The RepMLP block: Global, Channel, and Local Perceptrons in training form,
//! and the merged three-FC form used for inference.
//!
//! A block is bound to one spatial size `(h, w)` — the Channel Perceptron's
//! FC kernel is `(s*h*w, h*w)`, so feeding a different resolution is a hard
//! error, not a resize. Channels are partitioned into `s` share-sets by a
//! pure reshape: `(n, c, h, w) -> (n*c/s, s, h, w)`, meaning channel `j`
//! belongs to set `j mod s`.

use crate::error::{Error, Result};
use crate::init::{fan_in_uniform, jittered_bn, rng_from_seed, small_bias, SeededRng};
use crate::layers::{bn_inference, conv2d, fc_forward, BnParams, ConvLayer, FcLayer};
use crate::reparam::merge_local_into_channel;
use crate::tensor::{activate, broadcast_add_channel, global_avg_pool, Activation, Matrix, Tensor4};

/// Structural form of a block or network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// FC3 + BN with parallel conv/BN branches.
    Train,
    /// Merged: a single biased FC3, no BN, no conv branches.
    Deploy,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Train => write!(f, "train"),
            Mode::Deploy => write!(f, "deploy"),
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Mode::Train),
            "deploy" => Ok(Mode::Deploy),
            other => Err(Error::config(format!(
                "unknown mode {other:?}, expected \"train\" or \"deploy\""
            ))),
        }
    }
}

/// Static shape of a RepMLP block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RepMlpBlockConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub share_sets: usize,
    /// Odd kernel sizes of the Local Perceptron branches.
    pub local_kernels: Vec<usize>,
    /// Hidden-dim divisor of the Global Perceptron.
    pub gp_reduction: usize,
}

impl RepMlpBlockConfig {
    pub fn new(channels: usize, height: usize, width: usize, share_sets: usize) -> Self {
        RepMlpBlockConfig {
            channels,
            height,
            width,
            share_sets,
            local_kernels: vec![1, 3],
            gp_reduction: 4,
        }
    }

    pub fn with_local_kernels(mut self, kernels: &[usize]) -> Self {
        self.local_kernels = kernels.to_vec();
        self
    }

    pub fn hw(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.height == 0 || self.width == 0 || self.share_sets == 0 {
            return Err(Error::config("block dimensions must be positive"));
        }
        if self.channels % self.share_sets != 0 {
            return Err(Error::config(format!(
                "share-sets {} must divide channels {}",
                self.share_sets, self.channels
            )));
        }
        if self.gp_reduction == 0 || self.channels % self.gp_reduction != 0 {
            return Err(Error::config(format!(
                "global-perceptron reduction {} must divide channels {}",
                self.gp_reduction, self.channels
            )));
        }
        for &k in &self.local_kernels {
            if k % 2 == 0 {
                return Err(Error::config(format!(
                    "local kernel size {k} must be odd so padding (k-1)/2 preserves the map size"
                )));
            }
        }
        Ok(())
    }
}

/// One RepMLP block, train or deploy form.
#[derive(Debug, Clone)]
pub struct RepMlpBlock {
    cfg: RepMlpBlockConfig,
    mode: Mode,
    gp_fc1: FcLayer,
    gp_fc2: FcLayer,
    fc3: FcLayer,
    bn3: Option<BnParams>,
    local: Vec<(ConvLayer, BnParams)>,
}

impl RepMlpBlock {
    /// Assembles a block from explicit layers, validating every shape.
    pub fn from_parts(
        cfg: RepMlpBlockConfig,
        mode: Mode,
        gp_fc1: FcLayer,
        gp_fc2: FcLayer,
        fc3: FcLayer,
        bn3: Option<BnParams>,
        local: Vec<(ConvLayer, BnParams)>,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let hidden = c / cfg.gp_reduction;
        if gp_fc1.weight().rows() != hidden || gp_fc1.weight().cols() != c {
            return Err(Error::Dimension {
                axis: "gp_fc1 weight shape",
                expected: hidden * c,
                actual: gp_fc1.weight().rows() * gp_fc1.weight().cols(),
            });
        }
        if gp_fc2.weight().rows() != c || gp_fc2.weight().cols() != hidden {
            return Err(Error::Dimension {
                axis: "gp_fc2 weight shape",
                expected: c * hidden,
                actual: gp_fc2.weight().rows() * gp_fc2.weight().cols(),
            });
        }
        if fc3.groups() != cfg.share_sets || fc3.weight().cols() != cfg.hw() {
            return Err(Error::Dimension {
                axis: "fc3 weight shape",
                expected: cfg.share_sets * cfg.hw(),
                actual: fc3.weight().rows(),
            });
        }
        match mode {
            Mode::Train => {
                let bn3 = bn3.ok_or_else(|| Error::config("train-form block requires bn3"))?;
                if bn3.len() != cfg.share_sets {
                    return Err(Error::Dimension {
                        axis: "bn3 channel count",
                        expected: cfg.share_sets,
                        actual: bn3.len(),
                    });
                }
                for (conv, bn) in &local {
                    let (kh, kw) = conv.kernel_hw();
                    if conv.groups() != cfg.share_sets
                        || conv.out_channels() != cfg.share_sets
                        || conv.in_per_group() != 1
                    {
                        return Err(Error::config(format!(
                            "local branch must be depth-wise (s, 1, k, k) with s = {}",
                            cfg.share_sets
                        )));
                    }
                    if !conv.is_size_preserving() {
                        return Err(Error::config(format!(
                            "local branch {kh}x{kw} must be stride 1 with padding (k-1)/2"
                        )));
                    }
                    if bn.len() != cfg.share_sets {
                        return Err(Error::Dimension {
                            axis: "local bn channel count",
                            expected: cfg.share_sets,
                            actual: bn.len(),
                        });
                    }
                }
                Ok(RepMlpBlock {
                    cfg,
                    mode,
                    gp_fc1,
                    gp_fc2,
                    fc3,
                    bn3: Some(bn3),
                    local,
                })
            }
            Mode::Deploy => {
                if bn3.is_some() || !local.is_empty() {
                    return Err(Error::config(
                        "deploy-form block carries no bn3 and no local branches",
                    ));
                }
                if fc3.bias().is_none() {
                    return Err(Error::config("deploy-form fc3 must carry a bias"));
                }
                Ok(RepMlpBlock {
                    cfg,
                    mode,
                    gp_fc1,
                    gp_fc2,
                    fc3,
                    bn3: None,
                    local: Vec::new(),
                })
            }
        }
    }

    /// Seeded random train-form block.
    pub fn random(cfg: RepMlpBlockConfig, seed: u64) -> Result<Self> {
        let mut rng = rng_from_seed(seed);
        Self::random_with(cfg, &mut rng, 1.0)
    }

    /// `branch_gain` scales the init bound of layers that feed the residual
    /// sum (fc3, local convs, gp_fc2); networks pass `1/sqrt(2 * depth)`.
    pub(crate) fn random_with(
        cfg: RepMlpBlockConfig,
        rng: &mut SeededRng,
        branch_gain: f32,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let s = cfg.share_sets;
        let hw = cfg.hw();
        let hidden = c / cfg.gp_reduction;

        let gp_fc1 = FcLayer::new_dense(
            Matrix::from_vec(hidden, c, fan_in_uniform(rng, hidden * c, c, 1.0))?,
            Some(small_bias(rng, hidden, c)),
        )?;
        let gp_fc2 = FcLayer::new_dense(
            Matrix::from_vec(c, hidden, fan_in_uniform(rng, c * hidden, hidden, branch_gain))?,
            Some(small_bias(rng, c, hidden)),
        )?;
        let fc3 = FcLayer::new_grouped(
            Matrix::from_vec(s * hw, hw, fan_in_uniform(rng, s * hw * hw, hw, branch_gain))?,
            None,
            s,
        )?;
        let bn3 = jittered_bn(rng, s);
        let local = cfg
            .local_kernels
            .iter()
            .map(|&k| {
                let conv = ConvLayer::depthwise(
                    fan_in_uniform(rng, s * k * k, k * k, branch_gain),
                    s,
                    k,
                )?;
                Ok((conv, jittered_bn(rng, s)))
            })
            .collect::<Result<Vec<_>>>()?;

        Self::from_parts(cfg, Mode::Train, gp_fc1, gp_fc2, fc3, Some(bn3), local)
    }

    /// All-zero block of the given mode (checkpoint-loading skeleton).
    pub(crate) fn zeros(cfg: RepMlpBlockConfig, mode: Mode) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let s = cfg.share_sets;
        let hw = cfg.hw();
        let hidden = c / cfg.gp_reduction;
        let gp_fc1 =
            FcLayer::new_dense(Matrix::zeros(hidden, c), Some(vec![0.0; hidden]))?;
        let gp_fc2 = FcLayer::new_dense(Matrix::zeros(c, hidden), Some(vec![0.0; c]))?;
        match mode {
            Mode::Train => {
                let fc3 = FcLayer::new_grouped(Matrix::zeros(s * hw, hw), None, s)?;
                let local = cfg
                    .local_kernels
                    .iter()
                    .map(|&k| {
                        Ok((
                            ConvLayer::depthwise(vec![0.0; s * k * k], s, k)?,
                            BnParams::identity(s),
                        ))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Self::from_parts(
                    cfg,
                    mode,
                    gp_fc1,
                    gp_fc2,
                    fc3,
                    Some(BnParams::identity(s)),
                    local,
                )
            }
            Mode::Deploy => {
                let fc3 = FcLayer::new_grouped(
                    Matrix::zeros(s * hw, hw),
                    Some(vec![0.0; s * hw]),
                    s,
                )?;
                Self::from_parts(cfg, mode, gp_fc1, gp_fc2, fc3, None, Vec::new())
            }
        }
    }

    pub fn cfg(&self) -> &RepMlpBlockConfig {
        &self.cfg
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn gp_fc1(&self) -> &FcLayer {
        &self.gp_fc1
    }

    pub fn gp_fc2(&self) -> &FcLayer {
        &self.gp_fc2
    }

    pub fn fc3(&self) -> &FcLayer {
        &self.fc3
    }

    pub fn bn3(&self) -> Option<&BnParams> {
        self.bn3.as_ref()
    }

    pub fn local_branches(&self) -> &[(ConvLayer, BnParams)] {
        &self.local
    }

    pub(crate) fn parts_mut(
        &mut self,
    ) -> (
        &mut FcLayer,
        &mut FcLayer,
        &mut FcLayer,
        Option<&mut BnParams>,
        &mut [(ConvLayer, BnParams)],
    ) {
        (
            &mut self.gp_fc1,
            &mut self.gp_fc2,
            &mut self.fc3,
            self.bn3.as_mut(),
            &mut self.local,
        )
    }

    fn check_input(&self, input: &Tensor4) -> Result<()> {
        let (_, c, h, w) = input.dims();
        if c != self.cfg.channels {
            return Err(Error::Dimension {
                axis: "input channels",
                expected: self.cfg.channels,
                actual: c,
            });
        }
        if h != self.cfg.height || w != self.cfg.width {
            return Err(Error::Dimension {
                axis: "input spatial size (blocks are resolution-bound; patch-split first)",
                expected: self.cfg.height * self.cfg.width,
                actual: h * w,
            });
        }
        Ok(())
    }

    /// `(n, c, h, w) -> (n*c/s, s, h, w)`, a pure reshape.
    fn split_to_sets(&self, input: &Tensor4) -> Result<Tensor4> {
        let (n, c, h, w) = input.dims();
        let s = self.cfg.share_sets;
        input.reshaped(n * c / s, s, h, w)
    }

    fn merge_from_sets(&self, split: Tensor4, n: usize) -> Result<Tensor4> {
        split.reshape(n, self.cfg.channels, self.cfg.height, self.cfg.width)
    }

    /// Pool to `(n, c, 1, 1)`, then FC -> ReLU -> FC.
    pub fn global_perceptron(&self, input: &Tensor4) -> Result<Tensor4> {
        self.check_input(input)?;
        let pooled = global_avg_pool(input);
        let hidden = activate(&fc_forward(&pooled, &self.gp_fc1)?, Activation::Relu);
        fc_forward(&hidden, &self.gp_fc2)
    }

    /// The set-sharing FC over the split layout (with BN3 in train form).
    pub fn channel_perceptron(&self, input: &Tensor4) -> Result<Tensor4> {
        self.check_input(input)?;
        let n = input.n();
        let split = self.split_to_sets(input)?;
        let mut out = fc_forward(&split, &self.fc3)?;
        if let Some(bn3) = &self.bn3 {
            out = bn_inference(&out, bn3)?;
        }
        self.merge_from_sets(out, n)
    }

    /// Sum of the depth-wise conv+BN branches over the split layout.
    /// Train form only.
    pub fn local_perceptron(&self, input: &Tensor4) -> Result<Tensor4> {
        if self.mode != Mode::Train {
            return Err(Error::unsupported(
                "local perceptron exists only in the train form",
            ));
        }
        self.check_input(input)?;
        let n = input.n();
        let split = self.split_to_sets(input)?;
        let mut acc = Tensor4::zeros(split.n(), split.c(), split.h(), split.w());
        for (conv, bn) in &self.local {
            let branch = bn_inference(&conv2d(&split, conv)?, bn)?;
            acc.add_assign(&branch)?;
        }
        self.merge_from_sets(acc, n)
    }

    /// Full block forward.
    ///
    /// Train: `channel(x) + local(x) + broadcast(global(x))`.
    /// Deploy: `merged_fc3(x) + broadcast(global(x))`.
    pub fn forward(&self, input: &Tensor4) -> Result<Tensor4> {
        self.check_input(input)?;
        let mut out = self.channel_perceptron(input)?;
        if self.mode == Mode::Train {
            out.add_assign(&self.local_perceptron(input)?)?;
        }
        let global = self.global_perceptron(input)?;
        broadcast_add_channel(&out, &global)
    }

    /// Merges the train form into the deploy form. The Global Perceptron FCs
    /// carry over unchanged; conv branches and BN disappear into fc3.
    pub fn convert(&self) -> Result<RepMlpBlock> {
        if self.mode != Mode::Train {
            return Err(Error::unsupported("block is already in deploy form"));
        }
        let bn3 = self.bn3.as_ref().expect("train form carries bn3");
        let merged = merge_local_into_channel(
            &self.fc3,
            bn3,
            &self.local,
            self.cfg.share_sets,
            self.cfg.height,
            self.cfg.width,
        )?;
        RepMlpBlock::from_parts(
            self.cfg.clone(),
            Mode::Deploy,
            self.gp_fc1.clone(),
            self.gp_fc2.clone(),
            merged,
            None,
            Vec::new(),
        )
    }

    /// Train-form copy with all local-branch weights and BN shifts zeroed,
    /// so the branches contribute exactly nothing.
    pub fn zero_local_branches(&self) -> RepMlpBlock {
        let mut out = self.clone();
        for (conv, bn) in &mut out.local {
            for k in conv.kernel_mut() {
                *k = 0.0;
            }
            let (mu, _sigma, _gamma, beta) = bn.vectors_mut();
            mu.iter_mut().for_each(|x| *x = 0.0);
            beta.iter_mut().for_each(|x| *x = 0.0);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::rng_from_seed;
    use rand::Rng;

    fn random_input(seed: u64, n: usize, c: usize, h: usize, w: usize) -> Tensor4 {
        let mut rng = rng_from_seed(seed);
        let data = (0..n * c * h * w).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        Tensor4::from_vec(n, c, h, w, data).unwrap()
    }

    fn identity_grouped_fc(s: usize, hw: usize) -> FcLayer {
        let mut weight = Matrix::zeros(s * hw, hw);
        for i in 0..s {
            for r in 0..hw {
                weight.set(i * hw + r, r, 1.0);
            }
        }
        FcLayer::new_grouped(weight, None, s).unwrap()
    }

    #[test]
    fn channel_perceptron_param_counts() {
        // s(hw)^2: a 56x56 single-set kernel needs 56^4 weights; 7x7 needs 7^4.
        let cfg = RepMlpBlockConfig::new(4, 56, 56, 1);
        let block = RepMlpBlock::random(cfg, 0).unwrap();
        assert_eq!(block.fc3().weight().rows() * block.fc3().weight().cols(), 9_834_496);

        let cfg = RepMlpBlockConfig::new(4, 7, 7, 1);
        let block = RepMlpBlock::random(cfg, 0).unwrap();
        assert_eq!(block.fc3().weight().rows() * block.fc3().weight().cols(), 2_401);
    }

    #[test]
    fn identity_channel_perceptron_is_identity() {
        let cfg = RepMlpBlockConfig::new(4, 3, 3, 2).with_local_kernels(&[]);
        let mut block = RepMlpBlock::random(cfg.clone(), 1).unwrap();
        // overwrite fc3 with identity blocks and bn3 with the identity
        let hw = cfg.hw();
        let (_, _, fc3, bn3, _) = block.parts_mut();
        *fc3 = identity_grouped_fc(2, hw);
        if let Some(bn) = bn3 {
            *bn = BnParams::identity(2);
        }
        let x = random_input(2, 3, 4, 3, 3);
        let out = block.channel_perceptron(&x).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn zeroed_local_branches_contribute_nothing() {
        let cfg = RepMlpBlockConfig::new(4, 4, 4, 2);
        let block = RepMlpBlock::random(cfg, 3).unwrap().zero_local_branches();
        let x = random_input(4, 2, 4, 4, 4);
        let out = block.local_perceptron(&x).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_unit_pointwise_branch_is_identity_map() {
        let cfg = RepMlpBlockConfig::new(4, 3, 3, 4).with_local_kernels(&[1]);
        let mut block = RepMlpBlock::random(cfg, 4).unwrap();
        {
            let (_, _, _, _, local) = block.parts_mut();
            let (conv, bn) = &mut local[0];
            conv.kernel_mut().iter_mut().for_each(|k| *k = 1.0);
            *bn = BnParams::identity(4);
        }
        let x = random_input(5, 2, 4, 3, 3);
        let out = block.local_perceptron(&x).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn forward_rejects_wrong_resolution() {
        let cfg = RepMlpBlockConfig::new(4, 4, 4, 2);
        let block = RepMlpBlock::random(cfg, 5).unwrap();
        let x = Tensor4::zeros(1, 4, 8, 8);
        assert!(matches!(
            block.forward(&x),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn train_and_deploy_forwards_agree() {
        let cfg = RepMlpBlockConfig::new(8, 6, 6, 2);
        let block = RepMlpBlock::random(cfg, 6).unwrap();
        let deploy = block.convert().unwrap();
        assert_eq!(deploy.mode(), Mode::Deploy);
        assert!(deploy.local_branches().is_empty());
        assert!(deploy.bn3().is_none());

        let x = random_input(7, 3, 8, 6, 6);
        let a = block.forward(&x).unwrap();
        let b = deploy.forward(&x).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-4);
    }

    #[test]
    fn convert_without_branches_and_identity_bn_keeps_fc3() {
        let cfg = RepMlpBlockConfig::new(4, 4, 4, 2).with_local_kernels(&[]);
        let mut block = RepMlpBlock::random(cfg, 8).unwrap();
        {
            let (_, _, _, bn3, _) = block.parts_mut();
            *bn3.unwrap() = BnParams::identity(2);
        }
        let deploy = block.convert().unwrap();
        assert_eq!(deploy.fc3().weight().data(), block.fc3().weight().data());
        assert!(deploy.fc3().bias().unwrap().iter().all(|b| *b == 0.0));
    }

    #[test]
    fn zeroed_branches_reduce_to_fused_fc3_alone() {
        let cfg = RepMlpBlockConfig::new(8, 5, 5, 4);
        let block = RepMlpBlock::random(cfg, 9).unwrap().zero_local_branches();
        let deploy = block.convert().unwrap();
        let x = random_input(10, 2, 8, 5, 5);
        let a = block.forward(&x).unwrap();
        let b = deploy.forward(&x).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-5);
    }

    #[test]
    fn local_branch_parameter_cost() {
        // One 3x3 branch costs (9 + 4) * s scalars: 9s kernel + 4s BN.
        let s = 4;
        let cfg = RepMlpBlockConfig::new(8, 4, 4, s).with_local_kernels(&[3]);
        let block = RepMlpBlock::random(cfg, 10).unwrap();
        let (conv, bn) = &block.local_branches()[0];
        assert_eq!(conv.param_count() + bn.param_count(), (9 + 4) * s as u64);
    }

    #[test]
    fn deploy_form_rejects_leftover_branches() {
        let cfg = RepMlpBlockConfig::new(4, 2, 2, 2);
        let block = RepMlpBlock::random(cfg.clone(), 11).unwrap();
        let err = RepMlpBlock::from_parts(
            cfg,
            Mode::Deploy,
            block.gp_fc1().clone(),
            block.gp_fc2().clone(),
            block.fc3().clone(),
            None,
            block.local_branches().to_vec(),
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
