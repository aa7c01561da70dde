//! Hierarchical network assembly: stem, four stages of (RepMLP block + FFN)
//! pairs with identity shortcuts, inter-stage embeddings, and the
//! classification head.
//!
//! Stage `i` (1-based) runs at `(H/2^(i+1), W/2^(i+1))` with `C * 2^(i-1)`
//! channels. Blocks are resolution-bound, so larger inputs are tiled into
//! each stage's native patch size and restored afterwards; at the native
//! resolution the patch grid is 1x1 and tiling is the identity.

use serde::{Deserialize, Serialize};

use crate::block::{Mode, RepMlpBlock, RepMlpBlockConfig};
use crate::error::{Error, Result};
use crate::init::{fan_in_uniform, jittered_bn, rng_from_seed, small_bias, SeededRng};
use crate::layers::{bn_inference, conv2d, fc_forward, BnParams, ConvLayer, FcLayer};
use crate::reparam::fuse_bn_conv;
use crate::tensor::{
    activate, global_avg_pool, restore_patches, split_patches, Activation, Matrix, Tensor4,
};

/// How feature maps are downsampled between stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownsampleKind {
    /// Non-overlapping 2x2 stride-2 conv (patch embedding).
    Embed2x2,
    /// 1x1 channel expansion + 3x3 stride-2 depth-wise conv; overlapping
    /// windows communicate across patch borders.
    Conv3,
    /// As `Conv3` with a 5x5 depth-wise kernel.
    Conv5,
}

impl Default for DownsampleKind {
    fn default() -> Self {
        DownsampleKind::Embed2x2
    }
}

fn default_ffn_ratio() -> usize {
    4
}

fn default_gp_reduction() -> usize {
    4
}

fn default_local_kernels() -> Vec<usize> {
    vec![1, 3]
}

fn default_num_classes() -> usize {
    1000
}

/// Architectural hyper-parameters of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub blocks_per_stage: [usize; 4],
    pub base_channels: usize,
    pub share_sets: [usize; 4],
    pub input_hw: (usize, usize),
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    #[serde(default = "default_ffn_ratio")]
    pub ffn_ratio: usize,
    #[serde(default = "default_gp_reduction")]
    pub gp_reduction: usize,
    #[serde(default = "default_local_kernels")]
    pub local_kernels: Vec<usize>,
    #[serde(default)]
    pub downsample_kind: DownsampleKind,
}

pub const PRESET_NAMES: [&str; 6] = ["T224", "B224", "T256", "B256", "D256", "L256"];

impl NetConfig {
    fn base(
        name: &str,
        input: usize,
        blocks: [usize; 4],
        channels: usize,
        share_sets: [usize; 4],
    ) -> Self {
        NetConfig {
            name: Some(name.to_string()),
            blocks_per_stage: blocks,
            base_channels: channels,
            share_sets,
            input_hw: (input, input),
            num_classes: default_num_classes(),
            ffn_ratio: default_ffn_ratio(),
            gp_reduction: default_gp_reduction(),
            local_kernels: default_local_kernels(),
            downsample_kind: DownsampleKind::default(),
        }
    }

    /// One of the named presets: T224, B224, T256, B256, D256, L256.
    pub fn preset(name: &str) -> Result<Self> {
        let cfg = match name {
            "T224" => Self::base("T224", 224, [2, 2, 6, 2], 64, [1, 4, 16, 128]),
            "B224" => Self::base("B224", 224, [2, 2, 12, 2], 96, [1, 4, 32, 128]),
            "T256" => Self::base("T256", 256, [2, 2, 6, 2], 64, [1, 4, 16, 128]),
            "B256" => Self::base("B256", 256, [2, 2, 12, 2], 96, [1, 4, 32, 128]),
            "D256" => Self::base("D256", 256, [2, 2, 18, 2], 80, [1, 4, 16, 128]),
            "L256" => Self::base("L256", 256, [2, 2, 18, 2], 96, [1, 4, 32, 256]),
            other => {
                return Err(Error::config(format!(
                    "unknown preset {other:?}; expected one of {PRESET_NAMES:?}"
                )))
            }
        };
        Ok(cfg)
    }

    /// Parses a JSON document mirroring the config fields and validates it.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: NetConfig = serde_json::from_str(text)
            .map_err(|e| Error::config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn display_name(&self) -> &str {
        self.name.as_deref().unwrap_or("custom")
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    /// Native feature-map size of 0-based stage `i`: `(H/2^(i+2), W/2^(i+2))`.
    pub fn native_stage_hw(&self, stage: usize) -> (usize, usize) {
        (self.input_hw.0 >> (stage + 2), self.input_hw.1 >> (stage + 2))
    }

    pub fn block_config(&self, stage: usize) -> RepMlpBlockConfig {
        let (h, w) = self.native_stage_hw(stage);
        let mut cfg = RepMlpBlockConfig::new(
            self.stage_channels(stage),
            h,
            w,
            self.share_sets[stage],
        )
        .with_local_kernels(&self.local_kernels);
        cfg.gp_reduction = self.gp_reduction;
        cfg
    }

    pub fn total_pairs(&self) -> usize {
        self.blocks_per_stage.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_hw;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::config(format!(
                "input {h}x{w} must be a positive multiple of 32 in both dims"
            )));
        }
        if self.base_channels == 0 || self.num_classes == 0 || self.ffn_ratio == 0 {
            return Err(Error::config(
                "channels, classes, and ffn ratio must be positive",
            ));
        }
        if self.blocks_per_stage.iter().any(|b| *b == 0) {
            return Err(Error::config("every stage needs at least one block"));
        }
        for stage in 0..4 {
            self.block_config(stage).validate()?;
        }
        Ok(())
    }
}

/// A conv optionally followed by batch-norm (train form). Folding the BN
/// yields a plain biased conv.
#[derive(Debug, Clone)]
pub struct ConvBn {
    conv: ConvLayer,
    bn: Option<BnParams>,
}

impl ConvBn {
    pub(crate) fn new(conv: ConvLayer, bn: Option<BnParams>) -> Self {
        ConvBn { conv, bn }
    }

    pub fn conv(&self) -> &ConvLayer {
        &self.conv
    }

    pub fn bn(&self) -> Option<&BnParams> {
        self.bn.as_ref()
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut ConvLayer, Option<&mut BnParams>) {
        (&mut self.conv, self.bn.as_mut())
    }

    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        let out = conv2d(x, &self.conv)?;
        match &self.bn {
            Some(bn) => bn_inference(&out, bn),
            None => Ok(out),
        }
    }

    fn fold(&self) -> Result<ConvBn> {
        match &self.bn {
            Some(bn) => Ok(ConvBn::new(fuse_bn_conv(&self.conv, bn)?, None)),
            None => Ok(self.clone()),
        }
    }
}

/// Inter-stage downsampling layer.
#[derive(Debug, Clone)]
pub enum Embedding {
    Patch(ConvBn),
    ConvDown { expand: ConvBn, depthwise: ConvBn },
}

impl Embedding {
    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        match self {
            Embedding::Patch(conv) => conv.forward(x),
            Embedding::ConvDown { expand, depthwise } => {
                depthwise.forward(&expand.forward(x)?)
            }
        }
    }

    fn fold(&self) -> Result<Embedding> {
        Ok(match self {
            Embedding::Patch(conv) => Embedding::Patch(conv.fold()?),
            Embedding::ConvDown { expand, depthwise } => Embedding::ConvDown {
                expand: expand.fold()?,
                depthwise: depthwise.fold()?,
            },
        })
    }
}

/// 1x1 -> GELU -> 1x1 feed-forward block.
#[derive(Debug, Clone)]
pub struct Ffn {
    fc1: ConvBn,
    fc2: ConvBn,
}

impl Ffn {
    pub fn fc1(&self) -> &ConvBn {
        &self.fc1
    }

    pub fn fc2(&self) -> &ConvBn {
        &self.fc2
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut ConvBn, &mut ConvBn) {
        (&mut self.fc1, &mut self.fc2)
    }

    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        let mid = activate(&self.fc1.forward(x)?, Activation::Gelu);
        self.fc2.forward(&mid)
    }
}

/// One counted "block": a RepMLP block and an FFN, each wrapped in an
/// identity shortcut.
#[derive(Debug, Clone)]
pub struct BlockPair {
    mlp: RepMlpBlock,
    ffn: Ffn,
}

impl BlockPair {
    pub fn mlp(&self) -> &RepMlpBlock {
        &self.mlp
    }

    pub fn ffn(&self) -> &Ffn {
        &self.ffn
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut RepMlpBlock, &mut Ffn) {
        (&mut self.mlp, &mut self.ffn)
    }

    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        let mut out = self.mlp.forward(x)?;
        out.add_assign(x)?;
        let mut ffn_out = self.ffn.forward(&out)?;
        ffn_out.add_assign(&out)?;
        Ok(ffn_out)
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    pairs: Vec<BlockPair>,
}

impl Stage {
    pub fn pairs(&self) -> &[BlockPair] {
        &self.pairs
    }

    pub(crate) fn pairs_mut(&mut self) -> &mut [BlockPair] {
        &mut self.pairs
    }
}

/// A built network, train or deploy form. Immutable after construction;
/// conversion returns a new network.
#[derive(Debug, Clone)]
pub struct Network {
    cfg: NetConfig,
    mode: Mode,
    stem: ConvBn,
    stages: Vec<Stage>,
    embeddings: Vec<Embedding>,
    head: FcLayer,
}

/// Weight source for assembly: seeded random draws or all-zeros skeletons
/// (for checkpoint loading).
enum Init<'a> {
    Seeded { rng: &'a mut SeededRng, branch_gain: f32 },
    Zeros,
}

impl Init<'_> {
    fn weights(&mut self, len: usize, fan_in: usize, residual_out: bool) -> Vec<f32> {
        match self {
            Init::Seeded { rng, branch_gain } => {
                let gain = if residual_out { *branch_gain } else { 1.0 };
                fan_in_uniform(rng, len, fan_in, gain)
            }
            Init::Zeros => vec![0.0; len],
        }
    }

    fn bias(&mut self, len: usize, fan_in: usize) -> Vec<f32> {
        match self {
            Init::Seeded { rng, .. } => small_bias(rng, len, fan_in),
            Init::Zeros => vec![0.0; len],
        }
    }

    fn bn(&mut self, len: usize) -> BnParams {
        match self {
            Init::Seeded { rng, .. } => jittered_bn(rng, len),
            Init::Zeros => BnParams::identity(len),
        }
    }
}

/// Builds a train-form network with deterministic seeded weights.
pub fn build_net(cfg: &NetConfig, seed: u64) -> Result<Network> {
    cfg.validate()?;
    let mut rng = rng_from_seed(seed);
    let branch_gain = 1.0 / (2.0 * cfg.total_pairs() as f32).sqrt();
    Network::assemble(
        cfg,
        Mode::Train,
        Init::Seeded {
            rng: &mut rng,
            branch_gain,
        },
    )
}

/// Converts every block and folds every standalone BN, preserving outputs.
pub fn convert_net(net: &Network) -> Result<Network> {
    net.convert()
}

impl Network {
    /// All-zero network of the given mode, ready to receive checkpoint data.
    pub fn skeleton(cfg: &NetConfig, mode: Mode) -> Result<Network> {
        cfg.validate()?;
        Network::assemble(cfg, mode, Init::Zeros)
    }

    fn assemble(cfg: &NetConfig, mode: Mode, mut init: Init<'_>) -> Result<Network> {
        let train = mode == Mode::Train;
        let conv_bn = |init: &mut Init<'_>,
                       o: usize,
                       cpg: usize,
                       k: usize,
                       stride: usize,
                       padding: usize,
                       groups: usize,
                       residual_out: bool|
         -> Result<ConvBn> {
            let fan_in = cpg * k * k;
            let kernel = init.weights(o * cpg * k * k, fan_in, residual_out);
            let bias = if train {
                None
            } else {
                Some(init.bias(o, fan_in))
            };
            let conv = ConvLayer::new(kernel, o, cpg, k, k, bias, padding, stride, groups)?;
            let bn = train.then(|| init.bn(o));
            Ok(ConvBn::new(conv, bn))
        };

        let stem = conv_bn(&mut init, cfg.base_channels, 3, 4, 4, 0, 1, false)?;

        let mut stages = Vec::with_capacity(4);
        let mut embeddings = Vec::with_capacity(3);
        for stage in 0..4 {
            let c = cfg.stage_channels(stage);
            let block_cfg = cfg.block_config(stage);
            let mut pairs = Vec::with_capacity(cfg.blocks_per_stage[stage]);
            for _ in 0..cfg.blocks_per_stage[stage] {
                let mlp = match &mut init {
                    Init::Seeded { rng, branch_gain } => {
                        let mut block =
                            RepMlpBlock::random_with(block_cfg.clone(), rng, *branch_gain)?;
                        if !train {
                            block = block.convert()?;
                        }
                        block
                    }
                    Init::Zeros => RepMlpBlock::zeros(block_cfg.clone(), mode)?,
                };
                let hidden = c * cfg.ffn_ratio;
                let ffn = Ffn {
                    fc1: conv_bn(&mut init, hidden, c, 1, 1, 0, 1, false)?,
                    fc2: conv_bn(&mut init, c, hidden, 1, 1, 0, 1, true)?,
                };
                pairs.push(BlockPair { mlp, ffn });
            }
            stages.push(Stage { pairs });

            if stage < 3 {
                let out_c = cfg.stage_channels(stage + 1);
                let embedding = match cfg.downsample_kind {
                    DownsampleKind::Embed2x2 => {
                        Embedding::Patch(conv_bn(&mut init, out_c, c, 2, 2, 0, 1, false)?)
                    }
                    DownsampleKind::Conv3 | DownsampleKind::Conv5 => {
                        let k = if cfg.downsample_kind == DownsampleKind::Conv3 {
                            3
                        } else {
                            5
                        };
                        Embedding::ConvDown {
                            expand: conv_bn(&mut init, out_c, c, 1, 1, 0, 1, false)?,
                            depthwise: conv_bn(
                                &mut init,
                                out_c,
                                1,
                                k,
                                2,
                                (k - 1) / 2,
                                out_c,
                                false,
                            )?,
                        }
                    }
                };
                embeddings.push(embedding);
            }
        }

        let top = cfg.stage_channels(3);
        let head = FcLayer::new_dense(
            Matrix::from_vec(
                cfg.num_classes,
                top,
                init.weights(cfg.num_classes * top, top, false),
            )?,
            Some(init.bias(cfg.num_classes, top)),
        )?;

        Ok(Network {
            cfg: cfg.clone(),
            mode,
            stem,
            stages,
            embeddings,
            head,
        })
    }

    pub fn cfg(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn stem(&self) -> &ConvBn {
        &self.stem
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn embeddings(&self) -> &[Embedding] {
        &self.embeddings
    }

    pub fn head(&self) -> &FcLayer {
        &self.head
    }

    #[allow(clippy::type_complexity)]
    pub(crate) fn parts_mut(
        &mut self,
    ) -> (
        &mut ConvBn,
        &mut [Stage],
        &mut [Embedding],
        &mut FcLayer,
    ) {
        (
            &mut self.stem,
            &mut self.stages,
            &mut self.embeddings,
            &mut self.head,
        )
    }

    /// True if any block still carries conv branches parallel to its FC3.
    pub fn has_local_branches(&self) -> bool {
        self.stages
            .iter()
            .flat_map(|s| &s.pairs)
            .any(|p| !p.mlp.local_branches().is_empty())
    }

    /// Per-stage patch grids `(gh, gw)` for an input of `h x w` pixels.
    pub fn patch_grids(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::config(format!(
                "input {h}x{w} must be a multiple of 32 in both dims"
            )));
        }
        (0..4)
            .map(|stage| {
                let (bh, bw) = self.cfg.native_stage_hw(stage);
                let (fh, fw) = (h >> (stage + 2), w >> (stage + 2));
                if fh % bh != 0 || fw % bw != 0 {
                    return Err(Error::config(format!(
                        "stage {} feature map {fh}x{fw} must tile into native {bh}x{bw} patches \
                         (height divisible by {bh}, width by {bw})",
                        stage + 1
                    )));
                }
                Ok((fh / bh, fw / bw))
            })
            .collect()
    }

    /// Runs the trunk and returns all four stage outputs.
    ///
    /// With `patch_mode` every stage input is tiled into the stage's native
    /// patch size and restored afterwards; without it the input must already
    /// be at the native resolution.
    pub fn backbone_forward(&self, input: &Tensor4, patch_mode: bool) -> Result<[Tensor4; 4]> {
        let outs = self.stage_outputs(input, patch_mode)?;
        let mut it = outs.into_iter();
        Ok([
            it.next().unwrap(),
            it.next().unwrap(),
            it.next().unwrap(),
            it.next().unwrap(),
        ])
    }

    fn stage_outputs(&self, input: &Tensor4, patch_mode: bool) -> Result<Vec<Tensor4>> {
        let (_, c, h, w) = input.dims();
        if c != 3 {
            return Err(Error::Dimension {
                axis: "input channels",
                expected: 3,
                actual: c,
            });
        }
        if !patch_mode && (h, w) != self.cfg.input_hw {
            return Err(Error::config(format!(
                "input {h}x{w} differs from the native {}x{}; enable patch mode to tile it",
                self.cfg.input_hw.0, self.cfg.input_hw.1
            )));
        }
        let grids = self.patch_grids(h, w)?;

        let mut x = self.stem.forward(input)?;
        let mut outs = Vec::with_capacity(4);
        for stage in 0..4 {
            let (bh, bw) = self.cfg.native_stage_hw(stage);
            let (gh, gw) = grids[stage];
            let mut tiles = split_patches(&x, bh, bw)?;
            for pair in &self.stages[stage].pairs {
                tiles = pair.forward(&tiles)?;
            }
            x = restore_patches(&tiles, gh, gw)?;
            outs.push(x.clone());
            if stage < 3 {
                x = self.embeddings[stage].forward(&x)?;
            }
        }
        Ok(outs)
    }

    /// Classification forward: trunk, global average pool, head.
    /// Returns logits as `(n, num_classes, 1, 1)`.
    pub fn forward(&self, input: &Tensor4) -> Result<Tensor4> {
        let outs = self.stage_outputs(input, true)?;
        let pooled = global_avg_pool(outs.last().expect("four stages"));
        fc_forward(&pooled, &self.head)
    }

    /// Train -> deploy conversion: every block merged, every standalone BN
    /// folded into its conv. The head is untouched.
    pub fn convert(&self) -> Result<Network> {
        if self.mode != Mode::Train {
            return Err(Error::unsupported("network is already in deploy form"));
        }
        let stages = self
            .stages
            .iter()
            .map(|s| {
                let pairs = s
                    .pairs
                    .iter()
                    .map(|p| {
                        Ok(BlockPair {
                            mlp: p.mlp.convert()?,
                            ffn: Ffn {
                                fc1: p.ffn.fc1.fold()?,
                                fc2: p.ffn.fc2.fold()?,
                            },
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Stage { pairs })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Network {
            cfg: self.cfg.clone(),
            mode: Mode::Deploy,
            stem: self.stem.fold()?,
            stages,
            embeddings: self
                .embeddings
                .iter()
                .map(|e| e.fold())
                .collect::<Result<Vec<_>>>()?,
            head: self.head.clone(),
        })
    }

    /// Copy with every BN replaced by the identity and every bias zeroed.
    /// Zero inputs then propagate to exactly zero logits.
    pub fn with_identity_norms(&self) -> Network {
        let mut out = self.clone();
        let zero_conv_bn = |cb: &mut ConvBn| {
            let (conv, bn) = cb.parts_mut();
            if let Some(b) = conv.bias_mut() {
                b.iter_mut().for_each(|x| *x = 0.0);
            }
            if let Some(bn) = bn {
                *bn = BnParams::identity(bn.len());
            }
        };
        zero_conv_bn(&mut out.stem);
        for e in &mut out.embeddings {
            match e {
                Embedding::Patch(cb) => zero_conv_bn(cb),
                Embedding::ConvDown { expand, depthwise } => {
                    zero_conv_bn(expand);
                    zero_conv_bn(depthwise);
                }
            }
        }
        for stage in &mut out.stages {
            for pair in stage.pairs_mut() {
                let (mlp, ffn) = pair.parts_mut();
                let (gp1, gp2, fc3, bn3, local) = mlp.parts_mut();
                for fc in [gp1, gp2, fc3] {
                    if let Some(b) = fc.bias_mut() {
                        b.iter_mut().for_each(|x| *x = 0.0);
                    }
                }
                if let Some(bn) = bn3 {
                    *bn = BnParams::identity(bn.len());
                }
                for (_, bn) in local.iter_mut() {
                    *bn = BnParams::identity(bn.len());
                }
                let (fc1, fc2) = ffn.parts_mut();
                zero_conv_bn(fc1);
                zero_conv_bn(fc2);
            }
        }
        if let Some(b) = out.head.bias_mut() {
            b.iter_mut().for_each(|x| *x = 0.0);
        }
        out
    }

    /// Copy with all local-branch kernels and BN shifts zeroed in every block.
    pub fn zero_local_branches(&self) -> Network {
        let mut out = self.clone();
        for stage in &mut out.stages {
            for pair in stage.pairs_mut() {
                let (mlp, _) = pair.parts_mut();
                *mlp = mlp.zero_local_branches();
            }
        }
        out
    }
}

/// Small four-stage config used across the crate's unit tests.
#[cfg(test)]
pub(crate) fn tiny_test_config() -> NetConfig {
    NetConfig {
        name: Some("tiny".to_string()),
        blocks_per_stage: [1, 1, 1, 1],
        base_channels: 8,
        share_sets: [1, 2, 4, 8],
        input_hw: (64, 64),
        num_classes: 10,
        ffn_ratio: 2,
        gp_reduction: 4,
        local_kernels: vec![1, 3],
        downsample_kind: DownsampleKind::Embed2x2,
    }
}
