//! Flat `key = value` run configuration covering the optimizer and the
//! network hyperparameters. Unknown keys are errors, not warnings, so typos
//! can't silently fall back to defaults.

use crate::error::{KanetError, Result};
use crate::model::{HeadKind, NetworkConfig, SplineSettings};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Epochs between grid updates during the first quarter of training;
    /// 0 disables grid updates entirely.
    pub grid_update_every: usize,
    pub seed: u64,
    /// Compute width; only 64 is supported.
    pub precision: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grid_update_every: 1,
            seed: 0,
            precision: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(KanetError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(KanetError::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(KanetError::Config("learning_rate must be > 0".into()));
        }
        if !(self.beta1 >= 0.0 && self.beta1 < 1.0 && self.beta2 >= 0.0 && self.beta2 < 1.0) {
            return Err(KanetError::Config("adam betas must lie in [0, 1)".into()));
        }
        if self.precision != 64 {
            return Err(KanetError::Config(format!(
                "precision {} is not supported: this build computes at 64-bit only",
                self.precision
            )));
        }
        Ok(())
    }
}

/// Everything a config file can set: optimizer settings plus the network
/// hyperparameters that are not derived from the data (patch geometry and
/// class count come from the CLI and the cube).
#[derive(Debug, Clone, PartialEq)]
pub struct FileConfig {
    pub train: TrainConfig,
    pub stages: Vec<usize>,
    pub k0: usize,
    pub spline: SplineSettings,
    pub bottleneck_factor: usize,
    pub compression: f64,
    pub head: HeadKind,
}

impl Default for FileConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            stages: vec![4, 6, 8],
            k0: 8,
            spline: SplineSettings::default(),
            bottleneck_factor: 4,
            compression: 0.5,
            head: HeadKind::Linear,
        }
    }
}

impl FileConfig {
    pub fn network(&self, patch: (usize, usize, usize), classes: usize) -> NetworkConfig {
        NetworkConfig {
            stages: self.stages.clone(),
            k0: self.k0,
            spline: self.spline,
            patch,
            classes,
            bottleneck_factor: self.bottleneck_factor,
            compression: self.compression,
            head: self.head,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| {
        KanetError::Config(format!("invalid value {value:?} for key {key:?}"))
    })
}

/// Parses flat `key = value` text. `#` starts a comment; blank lines are
/// skipped; keys must match field names exactly and may appear once.
pub fn parse_config(text: &str) -> Result<FileConfig> {
    let mut cfg = FileConfig::default();
    let mut seen = std::collections::HashSet::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            KanetError::Config(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1))
        })?;
        let key = key.trim();
        let value = value.trim();
        if !seen.insert(key.to_string()) {
            return Err(KanetError::Config(format!("duplicate key {key:?}")));
        }
        match key {
            "epochs" => cfg.train.epochs = parse_num(key, value)?,
            "batch_size" => cfg.train.batch_size = parse_num(key, value)?,
            "learning_rate" => cfg.train.learning_rate = parse_num(key, value)?,
            "beta1" => cfg.train.beta1 = parse_num(key, value)?,
            "beta2" => cfg.train.beta2 = parse_num(key, value)?,
            "adam_eps" => cfg.train.adam_eps = parse_num(key, value)?,
            "grid_update_every" => cfg.train.grid_update_every = parse_num(key, value)?,
            "seed" => cfg.train.seed = parse_num(key, value)?,
            "precision" => cfg.train.precision = parse_num(key, value)?,
            "stages" => {
                cfg.stages = value
                    .split(',')
                    .map(|s| parse_num("stages", s))
                    .collect::<Result<Vec<usize>>>()?;
            }
            "k0" => cfg.k0 = parse_num(key, value)?,
            "grid_size" => cfg.spline.grid_size = parse_num(key, value)?,
            "spline_order" => cfg.spline.spline_order = parse_num(key, value)?,
            "epsilon" => cfg.spline.epsilon = parse_num(key, value)?,
            "margin" => cfg.spline.margin = parse_num(key, value)?,
            "shared_grids" => {
                cfg.spline.shared_grids = match value {
                    "true" => true,
                    "false" => false,
                    other => {
                        return Err(KanetError::Config(format!(
                            "shared_grids must be `true` or `false`, got {other:?}"
                        )))
                    }
                }
            }
            "bottleneck_factor" => cfg.bottleneck_factor = parse_num(key, value)?,
            "compression" => cfg.compression = parse_num(key, value)?,
            "head" => {
                cfg.head = match value {
                    "linear" => HeadKind::Linear,
                    "kan" => HeadKind::Kan,
                    other => {
                        return Err(KanetError::Config(format!(
                            "head must be `linear` or `kan`, got {other:?}"
                        )))
                    }
                }
            }
            other => {
                return Err(KanetError::Config(format!("unknown config key {other:?}")));
            }
        }
    }
    cfg.train.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_without_text() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg, FileConfig::default());
        assert_eq!(cfg.train.epochs, 80);
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.train.learning_rate, 1e-3);
    }

    #[test]
    fn parses_all_keys_with_comments() {
        let text = "
# run settings
epochs = 30
batch_size = 16   # small
learning_rate = 0.002
beta1 = 0.85
beta2 = 0.995
adam_eps = 1e-7
grid_update_every = 2
seed = 7
precision = 64
stages = 2, 2
k0 = 4
grid_size = 7
spline_order = 2
epsilon = 0.1
margin = 0.05
bottleneck_factor = 0
compression = 0.75
head = kan
";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.train.epochs, 30);
        assert_eq!(cfg.train.batch_size, 16);
        assert_eq!(cfg.train.beta1, 0.85);
        assert_eq!(cfg.train.grid_update_every, 2);
        assert_eq!(cfg.stages, vec![2, 2]);
        assert_eq!(cfg.spline.grid_size, 7);
        assert_eq!(cfg.spline.spline_order, 2);
        assert_eq!(cfg.head, HeadKind::Kan);
        assert_eq!(cfg.compression, 0.75);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = parse_config("epoches = 30").unwrap_err().to_string();
        assert!(err.contains("unknown") && err.contains("epoches"), "{err}");
    }

    #[test]
    fn duplicate_key_is_an_error() {
        let err = parse_config("epochs = 1\nepochs = 2").unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");
    }

    #[test]
    fn zero_epochs_rejected_at_parse() {
        assert!(parse_config("epochs = 0").is_err());
    }

    #[test]
    fn precision_32_rejected_with_clear_message() {
        let err = parse_config("precision = 32").unwrap_err().to_string();
        assert!(err.contains("64-bit"), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_config("epochs = 1\nnot a pair").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }
}
