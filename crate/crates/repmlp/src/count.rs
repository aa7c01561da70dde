//! Per-layer parameter and FLOPs accounting.
//!
//! FLOPs are counted as multiply-accumulates (one MAC = one FLOP) for a
//! single sample at the config's native resolution. Pooling, activations,
//! and bias additions are not counted; inference batch-norm is counted as
//! one MAC per element (it is a multiply-add, and it disappears entirely in
//! deploy form).

use crate::block::{Mode, RepMlpBlock};
use crate::error::Result;
use crate::layers::{BnParams, ConvLayer};
use crate::net::{ConvBn, Embedding, NetConfig, Network};

#[derive(Debug, Clone)]
pub struct LayerCount {
    pub name: String,
    pub params: u64,
    pub macs: u64,
}

/// A full per-layer report for one network.
#[derive(Debug, Clone)]
pub struct CountReport {
    pub config: String,
    pub mode: Mode,
    pub input_hw: (usize, usize),
    pub layers: Vec<LayerCount>,
}

impl CountReport {
    pub fn total_params(&self) -> u64 {
        self.layers.iter().map(|l| l.params).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.layers.iter().map(|l| l.macs).sum()
    }

    /// Sum of parameters over layers whose name contains `needle`.
    pub fn params_matching(&self, needle: &str) -> u64 {
        self.layers
            .iter()
            .filter(|l| l.name.contains(needle))
            .map(|l| l.params)
            .sum()
    }

    pub fn layer(&self, name: &str) -> Option<&LayerCount> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Summary like `38.30M params / 2.80B FLOPs`.
    pub fn summary(&self) -> String {
        format!(
            "{:.2}M params / {:.2}B FLOPs",
            self.total_params() as f64 / 1e6,
            self.total_macs() as f64 / 1e9
        )
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(
            "# FLOPs convention: one FLOP = one multiply-accumulate (MAC); \
             pooling/activation/bias ops are not counted\n",
        );
        out.push_str(&format!(
            "# config: {}  mode: {}  input: {}x{}\n",
            self.config, self.mode, self.input_hw.0, self.input_hw.1
        ));
        out.push_str(&format!("{:<28} {:>14} {:>16}\n", "layer", "params", "MACs"));
        for l in &self.layers {
            out.push_str(&format!("{:<28} {:>14} {:>16}\n", l.name, l.params, l.macs));
        }
        out.push_str(&format!(
            "{:<28} {:>14} {:>16}\n",
            "total",
            self.total_params(),
            self.total_macs()
        ));
        out.push_str(&format!("# {}\n", self.summary()));
        out
    }
}

fn bn_params(bn: Option<&BnParams>) -> u64 {
    bn.map_or(0, |b| b.param_count())
}

fn bn_macs(bn: Option<&BnParams>, elements: u64) -> u64 {
    if bn.is_some() {
        elements
    } else {
        0
    }
}

fn conv_macs(conv: &ConvLayer, in_h: usize, in_w: usize) -> Result<u64> {
    let (oh, ow) = conv.output_hw(in_h, in_w)?;
    let (kh, kw) = conv.kernel_hw();
    Ok((oh * ow * conv.out_channels() * conv.in_per_group() * kh * kw) as u64)
}

fn push_conv_bn(
    layers: &mut Vec<LayerCount>,
    name: String,
    cb: &ConvBn,
    in_h: usize,
    in_w: usize,
) -> Result<(usize, usize)> {
    let out_hw = cb.conv().output_hw(in_h, in_w)?;
    let out_elems = (cb.conv().out_channels() * out_hw.0 * out_hw.1) as u64;
    layers.push(LayerCount {
        name,
        params: cb.conv().param_count() + bn_params(cb.bn()),
        macs: conv_macs(cb.conv(), in_h, in_w)? + bn_macs(cb.bn(), out_elems),
    });
    Ok(out_hw)
}

fn push_block(layers: &mut Vec<LayerCount>, prefix: &str, block: &RepMlpBlock) {
    let cfg = block.cfg();
    let hw = cfg.hw() as u64;
    let c = cfg.channels as u64;
    layers.push(LayerCount {
        name: format!("{prefix}.gp_fc1"),
        params: block.gp_fc1().param_count(),
        macs: (block.gp_fc1().weight().rows() * block.gp_fc1().weight().cols()) as u64,
    });
    layers.push(LayerCount {
        name: format!("{prefix}.gp_fc2"),
        params: block.gp_fc2().param_count(),
        macs: (block.gp_fc2().weight().rows() * block.gp_fc2().weight().cols()) as u64,
    });
    // The set-sharing FC costs c*(hw)^2 MACs per sample no matter how many
    // share-sets the weights are split into.
    layers.push(LayerCount {
        name: format!("{prefix}.fc3"),
        params: block.fc3().param_count(),
        macs: c * hw * hw,
    });
    if let Some(bn3) = block.bn3() {
        layers.push(LayerCount {
            name: format!("{prefix}.bn3"),
            params: bn3.param_count(),
            macs: c * hw,
        });
    }
    for (conv, bn) in block.local_branches() {
        let (kh, kw) = conv.kernel_hw();
        layers.push(LayerCount {
            name: format!("{prefix}.local{kh}x{kw}"),
            params: conv.param_count() + bn.param_count(),
            macs: c * hw * (kh * kw) as u64 + c * hw,
        });
    }
}

/// Counts a built network layer by layer.
pub fn count_params_flops(net: &Network) -> CountReport {
    let cfg = net.cfg();
    let (h, w) = cfg.input_hw;
    let mut layers = Vec::new();

    let mut cur = push_conv_bn(&mut layers, "stem".to_string(), net.stem(), h, w)
        .expect("stem size validated at build");

    for (si, stage) in net.stages().iter().enumerate() {
        for (bi, pair) in stage.pairs().iter().enumerate() {
            let prefix = format!("stage{}.block{}", si + 1, bi + 1);
            push_block(&mut layers, &prefix, pair.mlp());
            let ffn_prefix = format!("stage{}.ffn{}", si + 1, bi + 1);
            push_conv_bn(&mut layers, format!("{ffn_prefix}.fc1"), pair.ffn().fc1(), cur.0, cur.1)
                .expect("ffn fc1 is 1x1");
            push_conv_bn(&mut layers, format!("{ffn_prefix}.fc2"), pair.ffn().fc2(), cur.0, cur.1)
                .expect("ffn fc2 is 1x1");
        }
        if si < 3 {
            match &net.embeddings()[si] {
                Embedding::Patch(cb) => {
                    cur = push_conv_bn(&mut layers, format!("embed{}", si + 1), cb, cur.0, cur.1)
                        .expect("embedding size validated at build");
                }
                Embedding::ConvDown { expand, depthwise } => {
                    let mid = push_conv_bn(
                        &mut layers,
                        format!("embed{}.expand", si + 1),
                        expand,
                        cur.0,
                        cur.1,
                    )
                    .expect("expand is 1x1");
                    cur = push_conv_bn(
                        &mut layers,
                        format!("embed{}.depthwise", si + 1),
                        depthwise,
                        mid.0,
                        mid.1,
                    )
                    .expect("depthwise stride-2 fits");
                }
            }
        }
    }

    layers.push(LayerCount {
        name: "head".to_string(),
        params: net.head().param_count(),
        macs: (net.head().weight().rows() * net.head().weight().cols()) as u64,
    });

    CountReport {
        config: cfg.display_name().to_string(),
        mode: net.mode(),
        input_hw: cfg.input_hw,
        layers,
    }
}

/// Counts a config without random weights (builds an all-zero skeleton).
pub fn count_for_config(cfg: &NetConfig, mode: Mode) -> Result<CountReport> {
    Ok(count_params_flops(&Network::skeleton(cfg, mode)?))
}

/// Training-time parameter cost of attaching depth-wise conv+BN branches to a
/// stack of spatial-FC blocks (e.g. a 12-block single-share-set model):
/// each `k x k` branch adds `(k^2 + 4) * share_sets` scalars per block.
#[derive(Debug, Clone)]
pub struct LocalBranchDeltas {
    pub per_kernel: Vec<(usize, u64)>,
    pub combined: u64,
}

pub fn local_branch_deltas(
    num_blocks: usize,
    share_sets: usize,
    kernels: &[usize],
) -> LocalBranchDeltas {
    let per_kernel: Vec<(usize, u64)> = kernels
        .iter()
        .map(|&k| {
            let per_block = (k * k + 4) * share_sets;
            (k, (per_block * num_blocks) as u64)
        })
        .collect();
    let combined = per_kernel.iter().map(|(_, d)| d).sum();
    LocalBranchDeltas {
        per_kernel,
        combined,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_net, tiny_test_config, NetConfig};

    /// Closed-form deploy parameter count, kept independent of the walker.
    fn deploy_params_closed_form(cfg: &NetConfig) -> u64 {
        let r = cfg.gp_reduction as u64;
        let ratio = cfg.ffn_ratio as u64;
        let mut total = 0u64;
        // stem
        let c0 = cfg.base_channels as u64;
        total += c0 * 3 * 16 + c0;
        for i in 0..4 {
            let c = cfg.stage_channels(i) as u64;
            let s = cfg.share_sets[i] as u64;
            let (h, w) = cfg.native_stage_hw(i);
            let hw = (h * w) as u64;
            let b = cfg.blocks_per_stage[i] as u64;
            let fc3 = s * hw * hw + s * hw;
            let gp = 2 * c * c / r + c / r + c;
            let ffn = 2 * ratio * c * c + ratio * c + c;
            total += b * (fc3 + gp + ffn);
            if i < 3 {
                total += 2 * c * c * 4 + 2 * c; // 2x2 embedding + bias
            }
        }
        let top = cfg.stage_channels(3) as u64;
        total += cfg.num_classes as u64 * top + cfg.num_classes as u64;
        total
    }

    /// Closed-form deploy MAC count per sample.
    fn deploy_macs_closed_form(cfg: &NetConfig) -> u64 {
        let r = cfg.gp_reduction as u64;
        let ratio = cfg.ffn_ratio as u64;
        let mut total = 0u64;
        let c0 = cfg.base_channels as u64;
        let (h0, w0) = cfg.native_stage_hw(0);
        total += (h0 * w0) as u64 * c0 * 48;
        for i in 0..4 {
            let c = cfg.stage_channels(i) as u64;
            let (h, w) = cfg.native_stage_hw(i);
            let hw = (h * w) as u64;
            let b = cfg.blocks_per_stage[i] as u64;
            let fc3 = c * hw * hw;
            let gp = 2 * c * c / r;
            let ffn = 2 * hw * ratio * c * c;
            total += b * (fc3 + gp + ffn);
            if i < 3 {
                let (h2, w2) = cfg.native_stage_hw(i + 1);
                total += (h2 * w2) as u64 * (2 * c) * (c * 4);
            }
        }
        let top = cfg.stage_channels(3) as u64;
        total += cfg.num_classes as u64 * top;
        total
    }

    #[test]
    fn t224_deploy_counts_match_closed_form() {
        let cfg = NetConfig::preset("T224").unwrap();
        let report = count_for_config(&cfg, Mode::Deploy).unwrap();
        assert_eq!(report.total_params(), deploy_params_closed_form(&cfg));
        assert_eq!(report.total_macs(), deploy_macs_closed_form(&cfg));
        // frozen absolute values for the calibrated architecture
        assert_eq!(report.total_params(), 38_303_240);
        assert_eq!(report.total_macs(), 2_798_453_760);
    }

    #[test]
    fn published_t224_counts_within_two_percent() {
        let report = count_for_config(&NetConfig::preset("T224").unwrap(), Mode::Deploy).unwrap();
        let params = report.total_params() as f64;
        let macs = report.total_macs() as f64;
        assert!((params - 38.3e6).abs() / 38.3e6 <= 0.02);
        assert!((macs - 2.8e9).abs() / 2.8e9 <= 0.02);
    }

    #[test]
    fn global_perceptron_share_is_half_a_million() {
        let report = count_for_config(&NetConfig::preset("T224").unwrap(), Mode::Deploy).unwrap();
        let gp = report.params_matching(".gp_fc");
        assert_eq!(gp, 482_912);
        assert!((gp as f64 - 0.5e6).abs() <= 0.05e6);
    }

    #[test]
    fn doubling_share_sets_adds_params_but_not_flops() {
        let base = NetConfig::preset("T224").unwrap();
        let mut doubled = base.clone();
        doubled.share_sets = [2, 8, 32, 256];

        let a = count_for_config(&base, Mode::Deploy).unwrap();
        let b = count_for_config(&doubled, Mode::Deploy).unwrap();

        // Extra weights: sum_i B_i * S_i * (h_i w_i)^2, plus the doubled bias rows.
        let mut expected = 0u64;
        for i in 0..4 {
            let (h, w) = base.native_stage_hw(i);
            let hw = (h * w) as u64;
            let bi = base.blocks_per_stage[i] as u64;
            let si = base.share_sets[i] as u64;
            expected += bi * si * hw * hw + bi * si * hw;
        }
        assert_eq!(b.total_params() - a.total_params(), expected);
        assert_eq!(expected, 28_932_736);
        assert_eq!(b.total_macs(), a.total_macs());
    }

    #[test]
    fn channel_path_macs_do_not_depend_on_share_sets() {
        let base = NetConfig::preset("T224").unwrap();
        let mut doubled = base.clone();
        doubled.share_sets = [2, 8, 32, 256];
        let a = count_for_config(&base, Mode::Deploy).unwrap();
        let b = count_for_config(&doubled, Mode::Deploy).unwrap();
        for name in ["stage1.block1.fc3", "stage3.block4.fc3", "stage4.block2.fc3"] {
            assert_eq!(a.layer(name).unwrap().macs, b.layer(name).unwrap().macs);
        }
    }

    #[test]
    fn branch_deltas_for_a_twelve_block_single_set_stack() {
        let d = local_branch_deltas(12, 1, &[1]);
        assert_eq!(d.combined, 60);
        let d = local_branch_deltas(12, 1, &[3]);
        assert_eq!(d.combined, 156);
        let d = local_branch_deltas(12, 1, &[1, 3]);
        assert_eq!(d.per_kernel, vec![(1, 60), (3, 156)]);
        assert_eq!(d.combined, 216);
    }

    #[test]
    fn train_deploy_param_delta_matches_structure() {
        let cfg = tiny_test_config();
        let net = build_net(&cfg, 0).unwrap();
        let train = count_params_flops(&net);
        let deploy = count_params_flops(&net.convert().unwrap());

        // dropped per block: local branches (k^2 s + 4s each) + bn3 (4s),
        // gained per block: fc3 bias (s*hw); each folded conv-BN swaps 4
        // BN scalars per channel for 1 bias scalar (net -3 per channel).
        let mut dropped = 0i64;
        let mut gained = 0i64;
        for i in 0..4 {
            let s = cfg.share_sets[i] as i64;
            let (h, w) = cfg.native_stage_hw(i);
            let b = cfg.blocks_per_stage[i] as i64;
            let c = cfg.stage_channels(i) as i64;
            for &k in &cfg.local_kernels {
                dropped += b * s * (k * k) as i64 + b * 4 * s;
            }
            dropped += b * 4 * s; // bn3
            gained += b * s * (h * w) as i64;
            // ffn conv-bn folds
            dropped += b * 3 * (cfg.ffn_ratio as i64 * c + c);
            if i < 3 {
                dropped += 3 * 2 * c; // embedding fold
            }
        }
        dropped += 3 * cfg.base_channels as i64; // stem fold
        assert_eq!(
            train.total_params() as i64 - deploy.total_params() as i64,
            dropped - gained
        );
    }

    #[test]
    fn report_renders_with_convention_header() {
        let report = count_for_config(&tiny_test_config(), Mode::Deploy).unwrap();
        let text = report.render();
        assert!(text.contains("multiply-accumulate"));
        assert!(text.contains("head"));
        assert!(text.contains("params / "));
    }
}
