//! Plain `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys,
//! duplicate keys and missing required keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use cadyq_core::loss::{KdSwitches, LossVariant, LossWeights};
use cadyq_core::network::NetConfig;
use cadyq_core::quant::Family;
use cadyq_core::selector::{format_bits, SensitivityMeasure};
use cadyq_core::train::TrainConfig;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Everything a run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub pretrain_iterations: u64,
    pub pretrain_lr: f64,
    /// Directory of HR training PNGs; synthetic images when absent.
    pub data_dir: Option<PathBuf>,
    pub synthetic_count: usize,
    pub synthetic_size: usize,
    pub heldout_count: usize,
    pub tile_size: usize,
    pub tile_overlap: usize,
}

pub const REQUIRED: [&str; 8] = ["blocks", "channels", "scale", "candidate_bits", "quantizer", "sensitivity", "loss", "seed"];

pub const OPTIONAL: [&str; 28] = [
    "w1",
    "w_kd",
    "w_kdf",
    "w_reg_init",
    "w_reg_step",
    "w_reg_interval",
    "ops_unit",
    "kd_last",
    "kd_features",
    "iterations",
    "pretrain_iterations",
    "pretrain_lr",
    "batch",
    "patch_size",
    "lr",
    "scale_lr",
    "augment",
    "selector_normalize",
    "selector_init_bias",
    "weight_bits",
    "rgb_mean",
    "rgb_range",
    "data_dir",
    "synthetic_count",
    "synthetic_size",
    "heldout_count",
    "tile_size",
    "tile_overlap",
];

fn parse_family(s: &str) -> Result<Family, CliError> {
    match s {
        "pams" => Ok(Family::Pams),
        "linq" => Ok(Family::Linq),
        _ => Err(CliError::Config(format!("quantizer: unknown family `{s}` (expected pams or linq)"))),
    }
}

/// Accepts the canonical measure names and the `gradient+channel_std`
/// style spellings.
fn parse_measure(s: &str) -> Result<SensitivityMeasure, CliError> {
    let canonical = match s {
        "gradient+channel_std" => "gradient_channel_std",
        "gradient+layer_std" => "gradient_layer_std",
        "std+layer_std" => "std_layer_std",
        other => other,
    };
    SensitivityMeasure::parse(canonical).map_err(|e| CliError::Config(format!("sensitivity: {e}")))
}

pub fn parse_bits(s: &str) -> Result<Vec<u32>, CliError> {
    s.split(',')
        .map(|p| p.trim().parse::<u32>().map_err(|_| CliError::Config(format!("candidate_bits: `{s}` is not a list of integers"))))
        .collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool, CliError> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::Config(format!("{key}: `{v}` is not a boolean"))),
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse().map_err(|_| CliError::Config(format!("{key}: cannot parse `{v}`")))
}

impl Config {
    /// Defaults for the optional keys around the given required values.
    fn with_required(kv: &BTreeMap<String, String>) -> Result<Self, CliError> {
        for k in REQUIRED {
            if !kv.contains_key(k) {
                return Err(CliError::Config(format!("missing required key `{k}`")));
            }
        }
        let net = NetConfig {
            blocks: num("blocks", &kv["blocks"])?,
            channels: num("channels", &kv["channels"])?,
            scale: num("scale", &kv["scale"])?,
            candidate_bits: parse_bits(&kv["candidate_bits"])?,
            family: parse_family(&kv["quantizer"])?,
            measure: parse_measure(&kv["sensitivity"])?,
            ..NetConfig::default()
        };
        let train = TrainConfig {
            seed: num("seed", &kv["seed"])?,
            variant: LossVariant::parse(&kv["loss"]).map_err(|e| CliError::Config(format!("loss: {e}")))?,
            ..TrainConfig::default()
        };
        Ok(Self {
            net,
            train,
            pretrain_iterations: 3000,
            pretrain_lr: 1e-3,
            data_dir: None,
            synthetic_count: 32,
            synthetic_size: 96,
            heldout_count: 6,
            tile_size: 96,
            tile_overlap: 6,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut kv = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !REQUIRED.contains(&k) && !OPTIONAL.contains(&k) {
                return Err(CliError::Config(format!("unknown key `{k}`")));
            }
            if kv.insert(k.to_string(), v.to_string()).is_some() {
                return Err(CliError::Config(format!("duplicate key `{k}`")));
            }
        }
        let mut c = Self::with_required(&kv)?;
        for (k, v) in &kv {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Sets one key, required or optional.
    pub fn set(&mut self, k: &str, v: &str) -> Result<(), CliError> {
        let w = &mut self.train.weights;
        match k {
            "blocks" => self.net.blocks = num(k, v)?,
            "channels" => self.net.channels = num(k, v)?,
            "scale" => self.net.scale = num(k, v)?,
            "candidate_bits" => self.net.candidate_bits = parse_bits(v)?,
            "quantizer" => self.net.family = parse_family(v)?,
            "sensitivity" => self.net.measure = parse_measure(v)?,
            "loss" => self.train.variant = LossVariant::parse(v).map_err(|e| CliError::Config(format!("loss: {e}")))?,
            "seed" => self.train.seed = num(k, v)?,
            "w1" => w.w1 = num(k, v)?,
            "w_kd" => w.w_kd = num(k, v)?,
            "w_kdf" => w.w_kdf = num(k, v)?,
            "w_reg_init" => w.w_reg_init = num(k, v)?,
            "w_reg_step" => w.w_reg_step = num(k, v)?,
            "w_reg_interval" => w.w_reg_interval = num(k, v)?,
            "ops_unit" => w.ops_unit = num(k, v)?,
            "kd_last" => self.train.kd.last = parse_bool(k, v)?,
            "kd_features" => self.train.kd.features = parse_bool(k, v)?,
            "iterations" => self.train.iterations = num(k, v)?,
            "pretrain_iterations" => self.pretrain_iterations = num(k, v)?,
            "pretrain_lr" => self.pretrain_lr = num(k, v)?,
            "batch" => self.train.batch = num(k, v)?,
            "patch_size" => self.train.patch = num(k, v)?,
            "lr" => self.train.lr = num(k, v)?,
            "scale_lr" => self.train.scale_lr = num(k, v)?,
            "augment" => self.train.augment = parse_bool(k, v)?,
            "selector_normalize" => self.train.selector_normalize = parse_bool(k, v)?,
            "selector_init_bias" => self.net.selector_init_bias = num(k, v)?,
            "weight_bits" => self.net.weight_bits = num(k, v)?,
            "rgb_mean" => {
                let parts: Vec<f32> = v.split(',').map(|p| num(k, p.trim())).collect::<Result<_, _>>()?;
                self.net.rgb_mean = parts
                    .try_into()
                    .map_err(|_| CliError::Config(format!("rgb_mean: expected three values, got `{v}`")))?;
            }
            "rgb_range" => self.net.rgb_range = num(k, v)?,
            "data_dir" => self.data_dir = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "synthetic_count" => self.synthetic_count = num(k, v)?,
            "synthetic_size" => self.synthetic_size = num(k, v)?,
            "heldout_count" => self.heldout_count = num(k, v)?,
            "tile_size" => self.tile_size = num(k, v)?,
            "tile_overlap" => self.tile_overlap = num(k, v)?,
            _ => return Err(CliError::Config(format!("unknown key `{k}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.net.validate().map_err(|e| CliError::Config(format!("{e}")))?;
        self.train.validate().map_err(|e| CliError::Config(format!("{e}")))?;
        if self.tile_size <= self.tile_overlap || self.tile_size < 8 {
            return Err(CliError::Config(format!(
                "tile_size {} must be at least 8 and exceed tile_overlap {}",
                self.tile_size, self.tile_overlap
            )));
        }
        if self.synthetic_size < self.train.patch * self.net.scale {
            return Err(CliError::Config(format!(
                "synthetic_size {} is smaller than one HR training patch ({})",
                self.synthetic_size,
                self.train.patch * self.net.scale
            )));
        }
        if !(self.pretrain_lr > 0.0) {
            return Err(CliError::Config(format!("pretrain_lr must be positive, got {}", self.pretrain_lr)));
        }
        Ok(())
    }

    /// Canonical text: every key, fixed order, shortest round-trip number
    /// formatting.
    pub fn serialize(&self) -> String {
        let n = &self.net;
        let t = &self.train;
        let w = &t.weights;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("blocks", n.blocks.to_string());
        put("channels", n.channels.to_string());
        put("scale", n.scale.to_string());
        put("candidate_bits", format_bits(&n.candidate_bits));
        put("quantizer", n.family.as_str().into());
        put("sensitivity", n.measure.as_str().into());
        put("loss", t.variant.as_str().into());
        put("seed", t.seed.to_string());
        put("w1", w.w1.to_string());
        put("w_kd", w.w_kd.to_string());
        put("w_kdf", w.w_kdf.to_string());
        put("w_reg_init", w.w_reg_init.to_string());
        put("w_reg_step", w.w_reg_step.to_string());
        put("w_reg_interval", w.w_reg_interval.to_string());
        put("ops_unit", w.ops_unit.to_string());
        put("kd_last", t.kd.last.to_string());
        put("kd_features", t.kd.features.to_string());
        put("iterations", t.iterations.to_string());
        put("pretrain_iterations", self.pretrain_iterations.to_string());
        put("pretrain_lr", self.pretrain_lr.to_string());
        put("batch", t.batch.to_string());
        put("patch_size", t.patch.to_string());
        put("lr", t.lr.to_string());
        put("scale_lr", t.scale_lr.to_string());
        put("augment", t.augment.to_string());
        put("selector_normalize", t.selector_normalize.to_string());
        put("selector_init_bias", n.selector_init_bias.to_string());
        put("weight_bits", n.weight_bits.to_string());
        put("rgb_mean", n.rgb_mean.iter().map(f32::to_string).collect::<Vec<_>>().join(","));
        put("rgb_range", n.rgb_range.to_string());
        put("data_dir", self.data_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
        put("synthetic_count", self.synthetic_count.to_string());
        put("synthetic_size", self.synthetic_size.to_string());
        put("heldout_count", self.heldout_count.to_string());
        put("tile_size", self.tile_size.to_string());
        put("tile_overlap", self.tile_overlap.to_string());
        s
    }

    /// First 16 hex digits of the SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        let d = Sha256::digest(self.serialize().as_bytes());
        d.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// The teacher pretraining schedule derived from this config.
    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.pretrain_iterations,
            lr: self.pretrain_lr,
            kd: KdSwitches { last: false, features: false },
            weights: LossWeights { ..self.train.weights },
            ..self.train.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "blocks = 2\nchannels = 8\nscale = 2\ncandidate_bits = 4,6,8\nquantizer = pams\nsensitivity = gradient+channel_std\nloss = wb\nseed = 7\n";

    #[test]
    fn round_trip_is_identity() {
        let a = Config::parse(MINIMAL).unwrap();
        let b = Config::parse(&a.serialize()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.serialize(), b.serialize());
        let mut c = a.clone();
        c.set("w_reg_init", "0.00012345678901").unwrap();
        c.set("rgb_mean", "0.1,0.2,0.3").unwrap();
        c.set("data_dir", "/tmp/x y").unwrap();
        assert_eq!(Config::parse(&c.serialize()).unwrap(), c);
    }

    #[test]
    fn missing_and_unknown_keys_are_named() {
        let text = MINIMAL.replace("seed = 7\n", "");
        match Config::parse(&text) {
            Err(CliError::Config(m)) => assert!(m.contains("seed"), "{m}"),
            other => panic!("{other:?}"),
        }
        match Config::parse(&format!("{MINIMAL}colour = red\n")) {
            Err(CliError::Config(m)) => assert!(m.contains("colour"), "{m}"),
            other => panic!("{other:?}"),
        }
        assert!(Config::parse(&format!("{MINIMAL}seed = 8\n")).is_err());
        assert!(Config::parse(&MINIMAL.replace("4,6,8", "4,9")).is_err());
        assert!(Config::parse(&MINIMAL.replace("pams", "lsq")).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = Config::parse(MINIMAL).unwrap();
        let b = Config::parse(&MINIMAL.replace("seed = 7", "seed = 8")).unwrap();
        assert_eq!(a.hash(), Config::parse(MINIMAL).unwrap().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }
}
