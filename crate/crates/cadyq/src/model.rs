//! Binary model files.
//!
//! Layout: the magic `CADQ1`, a little-endian `u32` manifest length, the
//! UTF-8 `key = value` manifest, then little-endian `f32` arrays. Arrays
//! are grouped: every conv weight and bias in network order, every clip
//! scale, every selector weight and bias, and finally the selector input
//! normalizations (shift then scale per layer). The manifest lists every
//! array as `array = <name> <count>` in file order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use cadyq_core::network::{Mode, NetConfig, ParamGroup, SrNetwork};
use cadyq_core::quant::Family;
use cadyq_core::selector::{format_bits, SensitivityMeasure};
use sha2::{Digest, Sha256};

use crate::config::parse_bits;
use crate::{CliError, Result};

pub const MAGIC: &[u8; 5] = b"CADQ1";

/// A network plus the hash of the config that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub net: SrNetwork,
    pub config_hash: String,
}

/// One array in file order: its name and a copy of the values.
fn arrays(net: &SrNetwork) -> Vec<(String, Vec<f32>)> {
    let params = net.params();
    let mut out = Vec::new();
    for group in [ParamGroup::Weight, ParamGroup::Scale, ParamGroup::Selector] {
        out.extend(params.iter().filter(|p| p.group == group).map(|p| (p.name.clone(), p.data.to_vec())));
    }
    for (i, m) in net.modules().enumerate() {
        let p = format!("block{}.conv{}.selector", i / 2, i % 2 + 1);
        out.push((format!("{p}.input_shift"), m.selector.input_shift.clone()));
        out.push((format!("{p}.input_scale"), m.selector.input_scale.clone()));
    }
    out
}

fn manifest(m: &ModelFile) -> String {
    let c = &m.net.cfg;
    let mut s = String::new();
    let mut put = |k: &str, v: String| {
        let _ = writeln!(s, "{k} = {v}");
    };
    put("backbone", "residual conv-relu-conv blocks, 3x3 kernels, pixel shuffle tail".into());
    put("quantized_layers", "conv1 and conv2 of every residual block".into());
    put("blocks", c.blocks.to_string());
    put("channels", c.channels.to_string());
    put("scale", c.scale.to_string());
    put("candidate_bits", format_bits(&c.candidate_bits));
    put("quantizer", c.family.as_str().into());
    put("sensitivity", c.measure.as_str().into());
    put("weight_bits", c.weight_bits.to_string());
    put("rgb_mean", c.rgb_mean.iter().map(f32::to_string).collect::<Vec<_>>().join(","));
    put("rgb_range", c.rgb_range.to_string());
    put("selector_init_bias", c.selector_init_bias.to_string());
    put("mode", m.net.mode.label());
    put("config_hash", m.config_hash.clone());
    for (name, data) in arrays(&m.net) {
        put("array", format!("{name} {}", data.len()));
    }
    s
}

pub fn to_bytes(m: &ModelFile) -> Vec<u8> {
    let text = manifest(m);
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + text.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for (_, data) in arrays(&m.net) {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Manifest(msg.into())
}

fn field<'a>(kv: &'a BTreeMap<&str, &str>, k: &str) -> Result<&'a str> {
    kv.get(k).copied().ok_or_else(|| bad(format!("manifest lacks `{k}`")))
}

fn num<T: std::str::FromStr>(kv: &BTreeMap<&str, &str>, k: &str) -> Result<T> {
    let v = field(kv, k)?;
    v.parse().map_err(|_| bad(format!("manifest `{k}` has unparsable value `{v}`")))
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelFile> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("not a model file (bad magic)"));
    }
    let len = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let text = bytes.get(9..9 + len).ok_or_else(|| bad("truncated manifest"))?;
    let text = std::str::from_utf8(text).map_err(|_| bad("manifest is not UTF-8"))?;
    let mut kv = BTreeMap::new();
    let mut listed = Vec::new();
    for line in text.lines() {
        let (k, v) = line.split_once(" = ").ok_or_else(|| bad(format!("bad manifest line `{line}`")))?;
        if k == "array" {
            let (name, count) = v.rsplit_once(' ').ok_or_else(|| bad(format!("bad array line `{v}`")))?;
            let count: usize = count.parse().map_err(|_| bad(format!("bad array count in `{v}`")))?;
            listed.push((name.to_string(), count));
        } else {
            kv.insert(k, v);
        }
    }
    let family = match field(&kv, "quantizer")? {
        "pams" => Family::Pams,
        "linq" => Family::Linq,
        f => return Err(bad(format!("unknown quantizer `{f}`"))),
    };
    let rgb_mean: Vec<f32> = field(&kv, "rgb_mean")?
        .split(',')
        .map(|p| p.parse().map_err(|_| bad("bad rgb_mean")))
        .collect::<Result<_>>()?;
    let cfg = NetConfig {
        blocks: num(&kv, "blocks")?,
        channels: num(&kv, "channels")?,
        scale: num(&kv, "scale")?,
        candidate_bits: parse_bits(field(&kv, "candidate_bits")?).map_err(|e| bad(e.to_string()))?,
        family,
        measure: SensitivityMeasure::parse(field(&kv, "sensitivity")?).map_err(|e| bad(e.to_string()))?,
        weight_bits: num(&kv, "weight_bits")?,
        rgb_mean: rgb_mean.try_into().map_err(|_| bad("rgb_mean needs three values"))?,
        rgb_range: num(&kv, "rgb_range")?,
        selector_init_bias: num(&kv, "selector_init_bias")?,
    };
    let mode = Mode::parse(field(&kv, "mode")?).map_err(|e| bad(e.to_string()))?;
    let mut net = SrNetwork::uninitialized(cfg, mode).map_err(|e| bad(e.to_string()))?;
    net.allocate();
    let expected: Vec<(String, usize)> = arrays(&net).into_iter().map(|(n, d)| (n, d.len())).collect();
    if expected != listed {
        return Err(bad("array list does not match the declared architecture"));
    }
    let body = &bytes[9 + len..];
    let total: usize = expected.iter().map(|(_, c)| c).sum();
    if body.len() != 4 * total {
        return Err(bad(format!("expected {} bytes of parameters, found {}", 4 * total, body.len())));
    }
    let mut values = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let mut by_name: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    for (name, count) in expected {
        by_name.insert(name, values.by_ref().take(count).collect());
    }
    for p in net.params_mut() {
        p.data.copy_from_slice(&by_name[&p.name]);
    }
    for (i, m) in net.modules_mut().enumerate() {
        let p = format!("block{}.conv{}.selector", i / 2, i % 2 + 1);
        m.selector.input_shift = by_name[&format!("{p}.input_shift")].clone();
        m.selector.input_scale = by_name[&format!("{p}.input_scale")].clone();
    }
    Ok(ModelFile { net, config_hash: field(&kv, "config_hash")?.to_string() })
}

/// SHA-256 over `blob <len>\0` followed by the bytes, as git computes
/// object ids.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes the model and returns its content hash.
pub fn save(path: &Path, m: &ModelFile) -> Result<String> {
    let bytes = to_bytes(m);
    std::fs::write(path, &bytes).map_err(|e| CliError::io(path, e))?;
    Ok(content_hash(&bytes))
}

/// Reads a model and returns it with its content hash.
pub fn load(path: &Path) -> Result<(ModelFile, String)> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let m = from_bytes(&bytes).map_err(|e| match e {
        CliError::Manifest(msg) => CliError::Manifest(format!("{}: {msg}", path.display())),
        other => other,
    })?;
    Ok((m, content_hash(&bytes)))
}
