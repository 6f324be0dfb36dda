//! Flat run configuration with presets and `key=value` overrides.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneKind;
use crate::error::{Error, Result};
use crate::seghead::Upsampling;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Paper,
    Desk,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "desk" => Ok(Self::Desk),
            _ => Err(Error::Config(format!("unknown preset `{s}` (expected paper or desk)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adamw,
}

/// Every key a run accepts. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,

    // data
    pub data_dir: PathBuf,
    pub image_size: usize,
    pub train_per_domain: usize,
    pub test_per_domain: usize,
    pub val_ratio: f64,

    // backbone
    pub backbone: BackboneKind,
    /// Seed of the stand-in "pretrained" weights, fixed across runs.
    pub backbone_seed: u64,
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub backbone_frozen: bool,
    pub weights_dir: Option<PathBuf>,

    // adapter and head
    pub use_rein: bool,
    pub tokens: usize,
    pub rank: usize,
    pub hidden: usize,
    pub query_dim: usize,

    // optimization
    pub optimizer: OptimizerKind,
    pub lr_backbone: f64,
    pub lr_rein: f64,
    pub lr_head: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub crop_size: usize,
    /// Zero means `iterations / 5`.
    pub checkpoint_every: usize,

    // inference
    pub threshold: f64,
    pub upsampling: Upsampling,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let desk = Self {
            preset: Preset::Desk,
            seed: 0,
            data_dir: PathBuf::from("data"),
            image_size: 96,
            train_per_domain: 60,
            test_per_domain: 15,
            val_ratio: 0.8,
            backbone: BackboneKind::VitTiny,
            backbone_seed: 2024,
            layers: 12,
            width: 32,
            heads: 4,
            patch_size: 8,
            backbone_frozen: true,
            weights_dir: None,
            use_rein: true,
            tokens: 16,
            rank: 4,
            hidden: 64,
            query_dim: 16,
            optimizer: OptimizerKind::Adamw,
            lr_backbone: 1e-5,
            // 500 steps at 1e-4 under-train at this scale; see README.
            lr_rein: 1e-3,
            lr_head: 1e-3,
            weight_decay: 0.01,
            iterations: 500,
            batch_size: 8,
            crop_size: 64,
            checkpoint_every: 0,
            threshold: 0.5,
            upsampling: Upsampling::Bilinear,
        };
        match p {
            Preset::Desk => desk,
            Preset::Paper => Self {
                preset: Preset::Paper,
                image_size: 1500,
                patch_size: 16,
                iterations: 60_000,
                batch_size: 4,
                crop_size: 512,
                lr_rein: 1e-4,
                lr_head: 1e-4,
                ..desk
            },
        }
    }

    /// Layers preset defaults, then `file` keys, then `overrides`
    /// (`key=value`, value parsed as TOML, bare words taken as strings).
    /// `preset` picks the base; when absent, the merged `preset` key or desk.
    pub fn resolve(file: Option<toml::Table>, preset: Option<Preset>, overrides: &[String]) -> Result<Self> {
        let mut merged = file.unwrap_or_default();
        for item in overrides {
            let (k, v) = parse_override(item)?;
            merged.insert(k, v);
        }
        let preset = match (preset, merged.get("preset")) {
            (Some(p), _) => p,
            (None, Some(v)) => v
                .as_str()
                .ok_or_else(|| Error::Config("preset must be a string".into()))?
                .parse()?,
            (None, None) => Preset::Desk,
        };
        merged.insert("preset".into(), toml::Value::String(to_key(preset)));
        let base = toml::Table::try_from(Self::preset(preset)).map_err(|e| Error::Config(e.to_string()))?;
        let mut table = base;
        for (k, v) in merged {
            table.insert(k, v);
        }
        let cfg: Self = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, preset: Option<Preset>, overrides: &[String]) -> Result<Self> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(Error::io(p))?;
                Some(text.parse::<toml::Table>().map_err(|e| Error::Config(format!("{}: {}", p.display(), e.message())))?)
            }
            None => None,
        };
        Self::resolve(file, preset, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("train_per_domain", self.train_per_domain),
            ("test_per_domain", self.test_per_domain),
            ("iterations", self.iterations),
            ("batch_size", self.batch_size),
            ("crop_size", self.crop_size),
            ("patch_size", self.patch_size),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        for (k, v) in [("lr_backbone", self.lr_backbone), ("lr_rein", self.lr_rein), ("lr_head", self.lr_head), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be a nonnegative number, got {v}")));
            }
        }
        if !(self.val_ratio > 0.0 && self.val_ratio < 1.0) {
            return Err(Error::Config(format!("val_ratio {} must lie strictly between 0 and 1", self.val_ratio)));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} must lie in [0, 1]", self.threshold)));
        }
        if self.crop_size > self.image_size {
            return Err(Error::Config(format!("crop_size {} exceeds image_size {}", self.crop_size, self.image_size)));
        }
        Ok(())
    }

    pub fn checkpoint_interval(&self) -> usize {
        if self.checkpoint_every > 0 {
            self.checkpoint_every
        } else {
            (self.iterations / 5).max(1)
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn to_key(p: Preset) -> String {
    match p {
        Preset::Paper => "paper",
        Preset::Desk => "desk",
    }
    .to_string()
}

fn parse_override(item: &str) -> Result<(String, toml::Value)> {
    let (k, v) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
    let (k, v) = (k.trim(), v.trim());
    if k.is_empty() {
        return Err(Error::Config(format!("override `{item}` has an empty key")));
    }
    let value = format!("v = {v}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()));
    Ok((k.to_string(), value))
}
