//! Checkpoint serialization.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "RMLPFRG1"
//! version    u32      currently 1
//! mode       u8       0 = train, 1 = deploy
//! config     u32 len + UTF-8 JSON (the NetConfig)
//! entries    u32 count, then per entry:
//!              name   u32 len + UTF-8
//!              dtype  u8  (0 = f32)
//!              rank   u8
//!              dims   rank x u64
//!              offset u64  absolute file offset of the tensor payload
//! payload    raw little-endian f32 tensors
//! ```
//!
//! Offsets must be in-bounds and non-overlapping and names unique; loading
//! validates all of it and every shape against the config's skeleton, so a
//! truncated or tampered file never yields a partial network.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::block::Mode;
use crate::error::{Error, Result};
use crate::net::{ConvBn, Embedding, NetConfig, Network};

pub const MAGIC: [u8; 8] = *b"RMLPFRG1";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// One entry of the checkpoint's tensor table.
#[derive(Debug, Clone)]
pub struct EntryMeta {
    pub name: String,
    pub dims: Vec<usize>,
    pub offset: u64,
}

impl EntryMeta {
    pub fn element_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn byte_len(&self) -> u64 {
        4 * self.element_count() as u64
    }
}

/// Parsed header of a checkpoint file.
#[derive(Debug, Clone)]
pub struct CheckpointMeta {
    pub version: u32,
    pub mode: Mode,
    pub config: NetConfig,
    pub entries: Vec<EntryMeta>,
}

impl CheckpointMeta {
    /// Total bytes of tensor payload (excludes the header and table).
    pub fn payload_bytes(&self) -> u64 {
        self.entries.iter().map(|e| e.byte_len()).sum()
    }
}

/// Named views over every stored tensor of a network, in a fixed traversal
/// order shared by save and load.
fn visit_tensors(net: &Network) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut out = Vec::new();
    let conv_bn = |out: &mut Vec<(String, Vec<usize>, Vec<f32>)>, name: &str, cb: &ConvBn| {
        let conv = cb.conv();
        let (kh, kw) = conv.kernel_hw();
        out.push((
            format!("{name}.kernel"),
            vec![conv.out_channels(), conv.in_per_group(), kh, kw],
            conv.kernel().to_vec(),
        ));
        if let Some(b) = conv.bias() {
            out.push((format!("{name}.bias"), vec![b.len()], b.to_vec()));
        }
        if let Some(bn) = cb.bn() {
            for (tag, v) in [
                ("mu", bn.mu()),
                ("sigma", bn.sigma()),
                ("gamma", bn.gamma()),
                ("beta", bn.beta()),
            ] {
                out.push((format!("{name}.bn.{tag}"), vec![v.len()], v.to_vec()));
            }
        }
    };
    let fc = |out: &mut Vec<(String, Vec<usize>, Vec<f32>)>, name: &str, layer: &crate::FcLayer| {
        out.push((
            format!("{name}.weight"),
            vec![layer.weight().rows(), layer.weight().cols()],
            layer.weight().data().to_vec(),
        ));
        if let Some(b) = layer.bias() {
            out.push((format!("{name}.bias"), vec![b.len()], b.to_vec()));
        }
    };

    conv_bn(&mut out, "stem", net.stem());
    for (si, stage) in net.stages().iter().enumerate() {
        for (bi, pair) in stage.pairs().iter().enumerate() {
            let block = pair.mlp();
            let prefix = format!("stage{}.block{}", si + 1, bi + 1);
            fc(&mut out, &format!("{prefix}.gp_fc1"), block.gp_fc1());
            fc(&mut out, &format!("{prefix}.gp_fc2"), block.gp_fc2());
            fc(&mut out, &format!("{prefix}.fc3"), block.fc3());
            if let Some(bn) = block.bn3() {
                for (tag, v) in [
                    ("mu", bn.mu()),
                    ("sigma", bn.sigma()),
                    ("gamma", bn.gamma()),
                    ("beta", bn.beta()),
                ] {
                    out.push((format!("{prefix}.bn3.{tag}"), vec![v.len()], v.to_vec()));
                }
            }
            for (conv, bn) in block.local_branches() {
                let (kh, kw) = conv.kernel_hw();
                let lname = format!("{prefix}.local{kh}x{kw}");
                out.push((
                    format!("{lname}.kernel"),
                    vec![conv.out_channels(), 1, kh, kw],
                    conv.kernel().to_vec(),
                ));
                for (tag, v) in [
                    ("mu", bn.mu()),
                    ("sigma", bn.sigma()),
                    ("gamma", bn.gamma()),
                    ("beta", bn.beta()),
                ] {
                    out.push((format!("{lname}.bn.{tag}"), vec![v.len()], v.to_vec()));
                }
            }
            let ffn = format!("stage{}.ffn{}", si + 1, bi + 1);
            conv_bn(&mut out, &format!("{ffn}.fc1"), pair.ffn().fc1());
            conv_bn(&mut out, &format!("{ffn}.fc2"), pair.ffn().fc2());
        }
        if si < 3 {
            match &net.embeddings()[si] {
                Embedding::Patch(cb) => conv_bn(&mut out, &format!("embed{}", si + 1), cb),
                Embedding::ConvDown { expand, depthwise } => {
                    conv_bn(&mut out, &format!("embed{}.expand", si + 1), expand);
                    conv_bn(&mut out, &format!("embed{}.depthwise", si + 1), depthwise);
                }
            }
        }
    }
    fc(&mut out, "head", net.head());
    out
}

/// Fills every tensor slot of `net` by calling `take(name, len)`.
fn fill_tensors(
    net: &mut Network,
    take: &mut dyn FnMut(&str, usize) -> Result<Vec<f32>>,
) -> Result<()> {
    fn fill_slice(
        take: &mut dyn FnMut(&str, usize) -> Result<Vec<f32>>,
        name: String,
        slot: &mut [f32],
    ) -> Result<()> {
        let data = take(&name, slot.len())?;
        slot.copy_from_slice(&data);
        Ok(())
    }
    fn fill_conv_bn(
        take: &mut dyn FnMut(&str, usize) -> Result<Vec<f32>>,
        name: &str,
        cb: &mut ConvBn,
    ) -> Result<()> {
        let (conv, bn) = cb.parts_mut();
        fill_slice(take, format!("{name}.kernel"), conv.kernel_mut())?;
        if let Some(b) = conv.bias_mut() {
            fill_slice(take, format!("{name}.bias"), b)?;
        }
        if let Some(bn) = bn {
            let (mu, sigma, gamma, beta) = bn.vectors_mut();
            for (tag, v) in [("mu", mu), ("sigma", sigma), ("gamma", gamma), ("beta", beta)] {
                fill_slice(take, format!("{name}.bn.{tag}"), v)?;
            }
        }
        Ok(())
    }
    fn fill_fc(
        take: &mut dyn FnMut(&str, usize) -> Result<Vec<f32>>,
        name: &str,
        layer: &mut crate::FcLayer,
    ) -> Result<()> {
        fill_slice(take, format!("{name}.weight"), layer.weight_mut().data_mut())?;
        if let Some(b) = layer.bias_mut() {
            fill_slice(take, format!("{name}.bias"), b)?;
        }
        Ok(())
    }

    let (stem, stages, embeddings, head) = net.parts_mut();
    fill_conv_bn(take, "stem", stem)?;
    for (si, stage) in stages.iter_mut().enumerate() {
        for (bi, pair) in stage.pairs_mut().iter_mut().enumerate() {
            let prefix = format!("stage{}.block{}", si + 1, bi + 1);
            let (mlp, ffn) = pair.parts_mut();
            let (gp1, gp2, fc3, bn3, local) = mlp.parts_mut();
            fill_fc(take, &format!("{prefix}.gp_fc1"), gp1)?;
            fill_fc(take, &format!("{prefix}.gp_fc2"), gp2)?;
            fill_fc(take, &format!("{prefix}.fc3"), fc3)?;
            if let Some(bn) = bn3 {
                let (mu, sigma, gamma, beta) = bn.vectors_mut();
                for (tag, v) in
                    [("mu", mu), ("sigma", sigma), ("gamma", gamma), ("beta", beta)]
                {
                    fill_slice(take, format!("{prefix}.bn3.{tag}"), v)?;
                }
            }
            for (conv, bn) in local.iter_mut() {
                let (kh, kw) = conv.kernel_hw();
                let lname = format!("{prefix}.local{kh}x{kw}");
                fill_slice(take, format!("{lname}.kernel"), conv.kernel_mut())?;
                let (mu, sigma, gamma, beta) = bn.vectors_mut();
                for (tag, v) in
                    [("mu", mu), ("sigma", sigma), ("gamma", gamma), ("beta", beta)]
                {
                    fill_slice(take, format!("{lname}.bn.{tag}"), v)?;
                }
            }
            let ffn_name = format!("stage{}.ffn{}", si + 1, bi + 1);
            let (fc1, fc2) = ffn.parts_mut();
            fill_conv_bn(take, &format!("{ffn_name}.fc1"), fc1)?;
            fill_conv_bn(take, &format!("{ffn_name}.fc2"), fc2)?;
        }
        if si < 3 {
            match &mut embeddings[si] {
                Embedding::Patch(cb) => fill_conv_bn(take, &format!("embed{}", si + 1), cb)?,
                Embedding::ConvDown { expand, depthwise } => {
                    fill_conv_bn(take, &format!("embed{}.expand", si + 1), expand)?;
                    fill_conv_bn(take, &format!("embed{}.depthwise", si + 1), depthwise)?;
                }
            }
        }
    }
    fill_fc(take, "head", head)?;
    Ok(())
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Serializes a network (weights, BN statistics, config, mode flag).
pub fn save_net(path: impl AsRef<Path>, net: &Network) -> Result<()> {
    let tensors = visit_tensors(net);
    let config_json = net.cfg().to_json();

    // Header + table sizes are needed to place payload offsets, so lay the
    // table out once with zero offsets to measure it.
    let mut table = Vec::new();
    for (name, dims, _) in &tensors {
        push_u32(&mut table, name.len() as u32);
        table.extend_from_slice(name.as_bytes());
        table.push(DTYPE_F32);
        table.push(dims.len() as u8);
        for d in dims {
            push_u64(&mut table, *d as u64);
        }
        push_u64(&mut table, 0);
    }
    let header_len = MAGIC.len() + 4 + 1 + 4 + config_json.len() + 4 + table.len();

    let mut buf = Vec::with_capacity(header_len);
    buf.extend_from_slice(&MAGIC);
    push_u32(&mut buf, VERSION);
    buf.push(match net.mode() {
        Mode::Train => 0,
        Mode::Deploy => 1,
    });
    push_u32(&mut buf, config_json.len() as u32);
    buf.extend_from_slice(config_json.as_bytes());
    push_u32(&mut buf, tensors.len() as u32);

    let mut offset = header_len as u64;
    for (name, dims, data) in &tensors {
        push_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        buf.push(DTYPE_F32);
        buf.push(dims.len() as u8);
        for d in dims {
            push_u64(&mut buf, *d as u64);
        }
        push_u64(&mut buf, offset);
        offset += 4 * data.len() as u64;
    }
    debug_assert_eq!(buf.len(), header_len);

    for (_, _, data) in &tensors {
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what} ({n} bytes needed)"),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn str(&mut self, len: usize, what: &str) -> Result<String> {
        let at = self.pos as u64;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::format(at, format!("{what} is not valid UTF-8")))
    }
}

fn parse_meta(bytes: &[u8]) -> Result<CheckpointMeta> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(MAGIC.len(), "magic")?;
    if magic != MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}")));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(
            8,
            format!("unsupported version {version}, expected {VERSION}"),
        ));
    }
    let mode = match r.u8("mode flag")? {
        0 => Mode::Train,
        1 => Mode::Deploy,
        other => return Err(Error::format(12, format!("invalid mode flag {other}"))),
    };
    let config_len = r.u32("config length")? as usize;
    let config_json = r.str(config_len, "config json")?;
    let config = NetConfig::from_json(&config_json)?;

    let count = r.u32("entry count")? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = r.str(name_len, "tensor name")?;
        let at = r.pos as u64;
        let dtype = r.u8("dtype tag")?;
        if dtype != DTYPE_F32 {
            return Err(Error::format(at, format!("unknown dtype tag {dtype}")));
        }
        let rank = r.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64("dim")? as usize);
        }
        let offset = r.u64("offset")?;
        entries.push(EntryMeta { name, dims, offset });
    }
    let header_end = r.pos as u64;

    // offsets: in-bounds, non-overlapping, unique names
    let mut spans: Vec<(u64, u64, &str)> = entries
        .iter()
        .map(|e| (e.offset, e.offset + e.byte_len(), e.name.as_str()))
        .collect();
    spans.sort_unstable();
    let mut names = std::collections::HashSet::new();
    for e in &entries {
        if !names.insert(e.name.as_str()) {
            return Err(Error::format(
                header_end,
                format!("duplicate tensor name {:?}", e.name),
            ));
        }
    }
    let mut prev_end = header_end;
    for (start, end, name) in spans {
        if start < prev_end {
            return Err(Error::format(
                start,
                format!("tensor {name:?} overlaps preceding data"),
            ));
        }
        if end > bytes.len() as u64 {
            return Err(Error::format(
                start,
                format!(
                    "tensor {name:?} extends to byte {end} beyond file length {}",
                    bytes.len()
                ),
            ));
        }
        prev_end = end;
    }

    Ok(CheckpointMeta {
        version,
        mode,
        config,
        entries,
    })
}

/// Reads and validates a checkpoint header without building the network.
pub fn read_metadata(path: impl AsRef<Path>) -> Result<CheckpointMeta> {
    let bytes = fs::read(path)?;
    parse_meta(&bytes)
}

/// Loads a network; the mode comes from the file's mode flag.
pub fn load_net(path: impl AsRef<Path>) -> Result<Network> {
    let bytes = fs::read(path)?;
    let meta = parse_meta(&bytes)?;
    let mut net = Network::skeleton(&meta.config, meta.mode)?;

    let by_name: HashMap<&str, &EntryMeta> = meta
        .entries
        .iter()
        .map(|e| (e.name.as_str(), e))
        .collect();
    let mut used = std::collections::HashSet::new();

    fill_tensors(&mut net, &mut |name, len| {
        let entry = by_name.get(name).ok_or_else(|| {
            Error::format(0, format!("missing tensor {name:?} for the declared mode"))
        })?;
        if entry.element_count() != len {
            return Err(Error::format(
                entry.offset,
                format!(
                    "tensor {name:?} has {} elements, the network slot needs {len}",
                    entry.element_count()
                ),
            ));
        }
        used.insert(entry.name.clone());
        let start = entry.offset as usize;
        let raw = &bytes[start..start + entry.byte_len() as usize];
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    })?;

    if used.len() != meta.entries.len() {
        let extra: Vec<&str> = meta
            .entries
            .iter()
            .map(|e| e.name.as_str())
            .filter(|n| !used.contains(*n))
            .collect();
        return Err(Error::format(
            0,
            format!("checkpoint contains tensors the network does not declare: {extra:?}"),
        ));
    }
    Ok(net)
}

/// Loads a network and rejects it unless the file's mode flag matches.
pub fn load_net_as(path: impl AsRef<Path>, expected: Mode) -> Result<Network> {
    let net = load_net(path)?;
    if net.mode() != expected {
        return Err(Error::config(format!(
            "checkpoint mode flag is \"{}\", expected \"{expected}\"",
            net.mode()
        )));
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::count::count_params_flops;
    use crate::net::{build_net, tiny_test_config};

    fn tmpfile(name: &str) -> std::path::PathBuf {
        let mut p = std::env::temp_dir();
        p.push(format!("repmlp-ckpt-test-{}-{name}", std::process::id()));
        p
    }

    #[test]
    fn round_trip_is_bit_exact_in_both_modes() {
        let cfg = tiny_test_config();
        let net = build_net(&cfg, 42).unwrap();
        for (tag, n) in [("train", net.clone()), ("deploy", net.convert().unwrap())] {
            let path = tmpfile(&format!("rt-{tag}"));
            save_net(&path, &n).unwrap();
            let loaded = load_net(&path).unwrap();
            assert_eq!(loaded.mode(), n.mode());
            let a = visit_tensors(&n);
            let b = visit_tensors(&loaded);
            assert_eq!(a.len(), b.len());
            for ((na, da, va), (nb, db, vb)) in a.iter().zip(b.iter()) {
                assert_eq!(na, nb);
                assert_eq!(da, db);
                assert_eq!(va, vb, "tensor {na} differs");
            }
            // and re-saving produces identical bytes
            let path2 = tmpfile(&format!("rt2-{tag}"));
            save_net(&path2, &loaded).unwrap();
            assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
            fs::remove_file(&path).ok();
            fs::remove_file(&path2).ok();
        }
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let cfg = tiny_test_config();
        let net = build_net(&cfg, 1).unwrap();
        let path = tmpfile("trunc");
        save_net(&path, &net).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
        match load_net(&path) {
            Err(Error::Format { .. }) => {}
            other => panic!("expected format error, got {other:?}"),
        }
        fs::remove_file(&path).ok();
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let cfg = tiny_test_config();
        let net = build_net(&cfg, 2).unwrap();
        let path = tmpfile("magic");
        save_net(&path, &net).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_net(&path), Err(Error::Format { offset: 0, .. })));

        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'R';
        bytes[8] = 9;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_net(&path), Err(Error::Format { offset: 8, .. })));
        fs::remove_file(&path).ok();
    }

    #[test]
    fn mode_expectation_is_enforced() {
        let cfg = tiny_test_config();
        let net = build_net(&cfg, 3).unwrap().convert().unwrap();
        let path = tmpfile("mode");
        save_net(&path, &net).unwrap();
        assert!(load_net_as(&path, Mode::Deploy).is_ok());
        assert!(matches!(
            load_net_as(&path, Mode::Train),
            Err(Error::Config(_))
        ));
        fs::remove_file(&path).ok();
    }

    #[test]
    fn conversion_shrinks_payload_by_the_param_delta() {
        let cfg = tiny_test_config();
        let train = build_net(&cfg, 4).unwrap();
        let deploy = train.convert().unwrap();

        let tp = tmpfile("acct-train");
        let dp = tmpfile("acct-deploy");
        save_net(&tp, &train).unwrap();
        save_net(&dp, &deploy).unwrap();
        let tm = read_metadata(&tp).unwrap();
        let dm = read_metadata(&dp).unwrap();

        let train_params = count_params_flops(&train).total_params();
        let deploy_params = count_params_flops(&deploy).total_params();
        assert_eq!(
            tm.payload_bytes() as i64 - dm.payload_bytes() as i64,
            4 * (train_params as i64 - deploy_params as i64)
        );
        fs::remove_file(&tp).ok();
        fs::remove_file(&dp).ok();
    }

    #[test]
    fn loaded_net_forwards_identically() {
        let cfg = tiny_test_config();
        let net = build_net(&cfg, 5).unwrap();
        let path = tmpfile("fwd");
        save_net(&path, &net).unwrap();
        let loaded = load_net(&path).unwrap();

        let mut rng = crate::init::rng_from_seed(9);
        use rand::Rng;
        let data = (0..2 * 3 * 64 * 64).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let x = crate::Tensor4::from_vec(2, 3, 64, 64, data).unwrap();
        assert_eq!(
            net.forward(&x).unwrap().data(),
            loaded.forward(&x).unwrap().data()
        );
        fs::remove_file(&path).ok();
    }
}
