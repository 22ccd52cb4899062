//! Training configuration as a flat `key = value` text file.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are an
//! error. Every key and its default is listed by [`TrainConfig::to_text`].

use std::fmt::Write as _;
use std::str::FromStr;

use crate::codec::{make_bins, BinGrid};
use crate::error::{Error, Result};
use crate::nn::{Architecture, ConcatMode};
use crate::optim::AdamConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Plain,
    Full,
}

impl ModelKind {
    pub const NAMES: [&'static str; 2] = ["plain", "full"];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Plain => "plain",
            ModelKind::Full => "full",
        }
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(ModelKind::Plain),
            "full" => Ok(ModelKind::Full),
            _ => Err(Error::invalid(format!(
                "unknown architecture {s:?} (valid: {})",
                Self::NAMES.join(", ")
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub concat: ConcatMode,
    pub use_se: bool,
    pub use_residual: bool,
    pub shared_weights: bool,
    pub crop_scales: [f64; 3],

    pub learning_rate: f64,
    pub dropout_rate: f64,
    pub momentum_beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub k: f64,
    pub bin_min: f64,
    pub bin_max: f64,
    pub seed: u64,
    pub val_fraction: f64,

    pub plateau_patience: usize,
    pub plateau_min_delta: f64,
    pub plateau_factor: f64,

    pub erase_probability: f64,
    pub erase_area_min: f64,
    pub erase_area_max: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::phase2()
    }
}

impl TrainConfig {
    /// Long schedule with block erasing: lr 5e-3, dropout 0.3, patience 20 at min_delta 5e-4.
    pub fn phase2() -> Self {
        TrainConfig {
            model: ModelKind::Plain,
            concat: ConcatMode::Flatten,
            use_se: false,
            use_residual: false,
            shared_weights: true,
            crop_scales: [1.0, 0.8, 0.6],
            learning_rate: 5e-3,
            dropout_rate: 0.3,
            momentum_beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            weight_decay: 1e-4,
            batch_size: 50,
            epochs: 600,
            alpha: crate::loss::DEFAULT_ALPHA,
            lambda: crate::loss::DEFAULT_LAMBDA,
            k: 10.0,
            bin_min: 0.0,
            bin_max: 110.0,
            seed: 0,
            val_fraction: 0.2,
            plateau_patience: 20,
            plateau_min_delta: 5e-4,
            plateau_factor: 0.5,
            erase_probability: 0.5,
            erase_area_min: 0.02,
            erase_area_max: 0.4,
        }
    }

    /// Short comparison schedule without erasing: lr 2e-3, dropout 0.2, patience 10 at min_delta 1e-4.
    pub fn phase1() -> Self {
        TrainConfig {
            learning_rate: 2e-3,
            dropout_rate: 0.2,
            epochs: 160,
            plateau_patience: 10,
            plateau_min_delta: 1e-4,
            erase_probability: 0.0,
            ..Self::phase2()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "phase1" => Ok(Self::phase1()),
            "phase2" => Ok(Self::phase2()),
            _ => Err(Error::Config(format!(
                "unknown preset {name:?} (valid: phase1, phase2)"
            ))),
        }
    }

    pub fn grid(&self) -> Result<BinGrid> {
        make_bins(self.bin_min, self.bin_max, self.k)
    }

    pub fn architecture(&self) -> Result<Architecture> {
        Ok(Architecture {
            branches: match self.model {
                ModelKind::Plain => 1,
                ModelKind::Full => 3,
            },
            concat: self.concat,
            use_se: self.use_se,
            use_residual: self.use_residual,
            shared_weights: self.shared_weights,
            dropout: self.dropout_rate,
            n_bins: self.grid()?.n_bins(),
        })
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.momentum_beta1,
            beta2: self.beta2,
            epsilon: self.adam_epsilon,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let positive = [
            ("learning_rate", self.learning_rate),
            ("momentum_beta1", self.momentum_beta1),
            ("beta2", self.beta2),
            ("adam_epsilon", self.adam_epsilon),
            ("k", self.k),
            ("plateau_factor", self.plateau_factor),
        ];
        for (key, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{key} must be positive, got {v}"));
            }
        }
        let non_negative = [
            ("weight_decay", self.weight_decay),
            ("alpha", self.alpha),
            ("lambda", self.lambda),
            ("plateau_min_delta", self.plateau_min_delta),
        ];
        for (key, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{key} must be non-negative, got {v}"));
            }
        }
        if self.momentum_beta1 >= 1.0 || self.beta2 >= 1.0 {
            return bad("Adam betas must be below 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            ));
        }
        if self.plateau_factor >= 1.0 {
            return bad(format!(
                "plateau_factor must be below 1, got {}",
                self.plateau_factor
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.plateau_patience == 0 {
            return bad("batch_size, epochs and plateau_patience must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!(
                "val_fraction must be in [0, 1), got {}",
                self.val_fraction
            ));
        }
        if !(0.0..=1.0).contains(&self.erase_probability)
            || !(0.0 < self.erase_area_min
                && self.erase_area_min <= self.erase_area_max
                && self.erase_area_max <= 1.0)
        {
            return bad(
                "erase_probability must be in [0, 1] and 0 < erase_area_min ≤ erase_area_max ≤ 1".into(),
            );
        }
        if !self.crop_scales.iter().all(|&s| s > 0.0 && s <= 1.0)
            || self.crop_scales.windows(2).any(|w| w[0] < w[1])
        {
            return bad(format!(
                "crop_scales must be descending in (0, 1], got {:?}",
                self.crop_scales
            ));
        }
        self.grid().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
        }
        fn flag(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
            }
        }
        match key {
            "model" => self.model = value.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "concat" => self.concat = value.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "use_se" => self.use_se = flag(key, value)?,
            "use_residual" => self.use_residual = flag(key, value)?,
            "shared_weights" => self.shared_weights = flag(key, value)?,
            "crop_scales" => {
                let v: Vec<f64> = value
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_>>()?;
                self.crop_scales = v
                    .try_into()
                    .map_err(|_| Error::Config("crop_scales needs exactly three values".into()))?;
            }
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "dropout_rate" => self.dropout_rate = parse(key, value)?,
            "momentum_beta1" => self.momentum_beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "adam_epsilon" => self.adam_epsilon = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "k" | "K" => self.k = parse(key, value)?,
            "bin_min" => self.bin_min = parse(key, value)?,
            "bin_max" => self.bin_max = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "val_fraction" => self.val_fraction = parse(key, value)?,
            "plateau_patience" => self.plateau_patience = parse(key, value)?,
            "plateau_min_delta" => self.plateau_min_delta = parse(key, value)?,
            "plateau_factor" => self.plateau_factor = parse(key, value)?,
            "erase_probability" => self.erase_probability = parse(key, value)?,
            "erase_area_min" => self.erase_area_min = parse(key, value)?,
            "erase_area_max" => self.erase_area_max = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses a config file. A leading `preset = name` line selects the base
    /// values that later keys override.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let applied = if key == "preset" {
                TrainConfig::preset(value).map(|p| cfg = p)
            } else {
                cfg.set(key, value)
            };
            applied.map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip(e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("model", self.model.as_str().into());
        kv("concat", self.concat.as_str().into());
        kv("use_se", self.use_se.to_string());
        kv("use_residual", self.use_residual.to_string());
        kv("shared_weights", self.shared_weights.to_string());
        kv("crop_scales", self.crop_scales.map(|v| v.to_string()).join(","));
        kv("learning_rate", self.learning_rate.to_string());
        kv("dropout_rate", self.dropout_rate.to_string());
        kv("momentum_beta1", self.momentum_beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("adam_epsilon", self.adam_epsilon.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("alpha", self.alpha.to_string());
        kv("lambda", self.lambda.to_string());
        kv("k", self.k.to_string());
        kv("bin_min", self.bin_min.to_string());
        kv("bin_max", self.bin_max.to_string());
        kv("seed", self.seed.to_string());
        kv("val_fraction", self.val_fraction.to_string());
        kv("plateau_patience", self.plateau_patience.to_string());
        kv("plateau_min_delta", self.plateau_min_delta.to_string());
        kv("plateau_factor", self.plateau_factor.to_string());
        kv("erase_probability", self.erase_probability.to_string());
        kv("erase_area_min", self.erase_area_min.to_string());
        kv("erase_area_max", self.erase_area_max.to_string());
        s
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}
