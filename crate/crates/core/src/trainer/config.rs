//! Flat `key = value` training configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are rejected.
//! `w0` / `w1` accept `auto` (the default) to derive the cross-entropy class
//! weights from the training split.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossKind};
use crate::model::HaNetConfig;
use crate::pfbs::{Policy, SamplingSchedule};

use super::WeightDecay;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub weight_decay: f64,
    pub weight_decay_mode: WeightDecay,
    pub step_size: usize,
    pub gamma: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: SamplingSchedule,
    pub loss: LossConfig,
    /// Replace `loss.class_weights` by inverse class frequencies of the training split.
    pub auto_class_weights: bool,
    pub seed: u64,
    pub model: HaNetConfig,
    /// Stop after this many optimizer steps, even mid-epoch.
    pub max_steps: Option<usize>,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 5e-4,
            weight_decay: 5e-4,
            weight_decay_mode: WeightDecay::L2,
            step_size: 8,
            gamma: 0.5,
            batch_size: 8,
            epochs: 100,
            schedule: SamplingSchedule { policy: Policy::Normal, seed: 0 },
            loss: LossConfig::default(),
            auto_class_weights: true,
            seed: 0,
            model: HaNetConfig::default(),
            max_steps: None,
            deterministic: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list<const N: usize>(key: &str, value: &str) -> Result<[usize; N]> {
    let items = value.split(',').map(|v| parse::<usize>(key, v.trim())).collect::<Result<Vec<_>>>()?;
    items
        .try_into()
        .map_err(|_| Error::Config(format!("`{key}` needs exactly {N} comma-separated values")))
}

fn join<const N: usize>(xs: &[usize; N]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.initial_lr, self.gamma];
        if positive.iter().any(|v| !(*v > 0.0)) || self.weight_decay < 0.0 {
            return Err(Error::Config("initial_lr and gamma must be positive, weight_decay nonnegative".into()));
        }
        if self.step_size == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("step_size, batch_size and epochs must be at least 1".into()));
        }
        self.schedule.policy.validate()?;
        self.loss.validate()?;
        self.model.validate()
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "initial_lr" | "lr" => self.initial_lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "weight_decay_mode" => {
                self.weight_decay_mode = match value {
                    "l2" => WeightDecay::L2,
                    "decoupled" => WeightDecay::Decoupled,
                    other => return Err(Error::Config(format!("unknown weight_decay_mode `{other}`"))),
                }
            }
            "step_size" => self.step_size = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "policy" => self.schedule.policy = value.parse()?,
            "seed" => {
                self.seed = parse(key, value)?;
                self.schedule.seed = self.seed;
            }
            "loss" => {
                self.loss.kind = match value {
                    "hybrid" => LossKind::Hybrid,
                    "focal" => LossKind::Focal,
                    other => return Err(Error::Config(format!("unknown loss `{other}`"))),
                }
            }
            "w0" | "w1" => {
                if value == "auto" {
                    self.auto_class_weights = true;
                } else {
                    let idx = usize::from(key.trim() == "w1");
                    self.loss.class_weights[idx] = parse(key, value)?;
                    self.auto_class_weights = false;
                }
            }
            "dice_eps" => self.loss.dice_eps = parse(key, value)?,
            "focal_gamma" => self.loss.focal_gamma = parse(key, value)?,
            "focal_alpha" => self.loss.focal_alpha = parse(key, value)?,
            "tile" => self.model.tile = parse(key, value)?,
            "stage_channels" => self.model.stage_channels = parse_list(key, value)?,
            "pooled_sizes" => self.model.pooled_sizes = parse_list(key, value)?,
            "pcs_dilations" => self.model.pcs_dilations = parse_list(key, value)?,
            "max_steps" => self.max_steps = if value == "none" { None } else { Some(parse(key, value)?) },
            "deterministic" => self.deterministic = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let w = |auto: bool, v: f64| if auto { "auto".to_string() } else { v.to_string() };
        let _ = writeln!(s, "initial_lr = {}", self.initial_lr);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let mode = match self.weight_decay_mode {
            WeightDecay::L2 => "l2",
            WeightDecay::Decoupled => "decoupled",
        };
        let _ = writeln!(s, "weight_decay_mode = {mode}");
        let _ = writeln!(s, "step_size = {}", self.step_size);
        let _ = writeln!(s, "gamma = {}", self.gamma);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "policy = {}", self.schedule.policy);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "loss = {}", match self.loss.kind {
            LossKind::Hybrid => "hybrid",
            LossKind::Focal => "focal",
        });
        let _ = writeln!(s, "w0 = {}", w(self.auto_class_weights, self.loss.class_weights[0]));
        let _ = writeln!(s, "w1 = {}", w(self.auto_class_weights, self.loss.class_weights[1]));
        let _ = writeln!(s, "dice_eps = {}", self.loss.dice_eps);
        let _ = writeln!(s, "focal_gamma = {}", self.loss.focal_gamma);
        let _ = writeln!(s, "focal_alpha = {}", self.loss.focal_alpha);
        let _ = writeln!(s, "tile = {}", self.model.tile);
        let _ = writeln!(s, "stage_channels = {}", join(&self.model.stage_channels));
        let _ = writeln!(s, "pooled_sizes = {}", join(&self.model.pooled_sizes));
        let _ = writeln!(s, "pcs_dilations = {}", join(&self.model.pcs_dilations));
        let _ = writeln!(s, "max_steps = {}", self.max_steps.map_or("none".to_string(), |v| v.to_string()));
        let _ = writeln!(s, "deterministic = {}", self.deterministic);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_setup() {
        let c = TrainConfig::default();
        assert_eq!((c.initial_lr, c.weight_decay, c.step_size, c.gamma), (5e-4, 5e-4, 8, 0.5));
        assert_eq!((c.batch_size, c.epochs), (8, 100));
        assert_eq!(c.weight_decay_mode, WeightDecay::L2);
    }

    #[test]
    fn kv_roundtrip() {
        let mut c = TrainConfig::default();
        c.set("policy", "fixed-5-linear-10").unwrap();
        c.set("w1", "0.9").unwrap();
        c.set("w0", "0.1").unwrap();
        c.set("stage_channels", "4, 8, 8, 16").unwrap();
        c.set("seed", "17").unwrap();
        c.set("max_steps", "40").unwrap();
        c.set("weight_decay_mode", "decoupled").unwrap();
        let back = TrainConfig::from_kv_str(&c.to_kv_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(TrainConfig::from_kv_str("learning_rate = 1").is_err());
        assert!(TrainConfig::from_kv_str("epochs = many").is_err());
        assert!(TrainConfig::from_kv_str("epochs = 0").is_err());
        assert!(TrainConfig::from_kv_str("# comment only\n\nloss = focal # inline\n").is_ok());
    }
}
