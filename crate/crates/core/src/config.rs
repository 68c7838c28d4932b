//! Model and training hyperparameters.
//!
//! [`CctConfig`] round-trips through a flat `key = value` text format, one
//! entry per line with `#` comments. The same text is embedded verbatim in
//! checkpoints.

use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::autograd::{conv_output_len, Padding};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: invalid value `{value}` for `{key}`")]
    BadValue { line: usize, key: String, value: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

macro_rules! config_struct {
    ($( $(#[$doc:meta])* $field:ident : $ty:ty = $default:expr ),* $(,)?) => {
        /// Every architecture and training hyperparameter.
        #[derive(Debug, Clone, PartialEq)]
        pub struct CctConfig {
            $( $(#[$doc])* pub $field: $ty, )*
        }

        impl Default for CctConfig {
            fn default() -> Self {
                CctConfig { $( $field: $default, )* }
            }
        }

        impl CctConfig {
            /// Keys accepted by [`CctConfig::set`], in canonical order.
            pub const KEYS: &'static [&'static str] = &[$( stringify!($field), )*];

            /// Assign one field from its textual form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), SetError> {
                match key {
                    $( stringify!($field) => {
                        self.$field = <$ty>::from_str(value).map_err(|_| SetError::BadValue)?;
                    } )*
                    _ => return Err(SetError::UnknownKey),
                }
                Ok(())
            }

            /// Canonical `key = value` text, one line per field.
            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $( writeln!(out, "{} = {}", stringify!($field), self.$field).expect("string write"); )*
                out
            }
        }
    };
}

config_struct! {
    input_hw: usize = 28,
    input_channels: usize = 3,
    num_classes: usize = 8,
    embed_dim: usize = 128,
    tokenizer_conv_layers: usize = 2,
    tokenizer_kernel: usize = 3,
    tokenizer_pool: usize = 3,
    tokenizer_pool_stride: usize = 2,
    num_encoder_layers: usize = 8,
    num_heads: usize = 4,
    ffn_hidden: usize = 256,
    dropout: f64 = 0.1,
    attn_dropout: f64 = 0.1,
    /// Stochastic-depth rate of the last encoder block; earlier blocks ramp
    /// linearly from 0.
    stochastic_depth_max: f64 = 0.1,
    label_smoothing: f64 = 0.1,
    lr: f64 = 0.0018,
    weight_decay: f64 = 0.00012,
    batch_size: usize = 64,
    epochs: usize = 75,
    seed: u64 = 42,
}

/// Failure of a single [`CctConfig::set`] call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SetError {
    UnknownKey,
    BadValue,
}

/// Split `key = value` text into `(line number, key, value)` entries,
/// skipping blanks and `#` comments.
pub fn parse_entries(text: &str) -> Result<Vec<(usize, String, String)>, ConfigError> {
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::Syntax { line: i + 1, text: raw.to_string() });
        };
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || value.is_empty() {
            return Err(ConfigError::Syntax { line: i + 1, text: raw.to_string() });
        }
        if entries.iter().any(|(_, k, _): &(usize, String, String)| k == key) {
            return Err(ConfigError::DuplicateKey { line: i + 1, key: key.to_string() });
        }
        entries.push((i + 1, key.to_string(), value.to_string()));
    }
    Ok(entries)
}

impl CctConfig {
    /// Parse config text; absent keys keep their defaults.
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = CctConfig::default();
        for (line, key, value) in parse_entries(text)? {
            cfg.apply(line, &key, &value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// [`CctConfig::set`] with line-numbered errors.
    pub fn apply(&mut self, line: usize, key: &str, value: &str) -> Result<(), ConfigError> {
        self.set(key, value).map_err(|e| match e {
            SetError::UnknownKey => ConfigError::UnknownKey { line, key: key.to_string() },
            SetError::BadValue => ConfigError::BadValue { line, key: key.to_string(), value: value.to_string() },
        })
    }

    /// Output channels of tokenizer conv layer `i`: `d/2` for all but the
    /// last layer, which emits `d`.
    pub fn tokenizer_channels(&self, layer: usize) -> usize {
        if layer + 1 == self.tokenizer_conv_layers {
            self.embed_dim
        } else {
            self.embed_dim / 2
        }
    }

    /// Spatial side of the tokenizer's final feature map.
    pub fn token_grid(&self) -> Result<usize, ConfigError> {
        let mut side = self.input_hw;
        for _ in 0..self.tokenizer_conv_layers {
            side = conv_output_len(side, self.tokenizer_kernel, 1, Padding::Same)
                .and_then(|(s, _)| conv_output_len(s, self.tokenizer_pool, self.tokenizer_pool_stride, Padding::Same))
                .map_err(|e| ConfigError::Invalid(e.to_string()))?
                .0;
        }
        Ok(side)
    }

    /// Number of tokens the tokenizer produces per image.
    pub fn num_tokens(&self) -> Result<usize, ConfigError> {
        Ok(self.token_grid()?.pow(2))
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads.max(1)
    }

    /// Stochastic-depth rate of encoder block `i`: `max · i / (L − 1)`.
    pub fn drop_path_rate(&self, block: usize) -> f64 {
        if self.num_encoder_layers <= 1 {
            return 0.0;
        }
        self.stochastic_depth_max * block as f64 / (self.num_encoder_layers - 1) as f64
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |msg: String| Err(ConfigError::Invalid(msg));
        for (name, v) in [
            ("input_hw", self.input_hw),
            ("input_channels", self.input_channels),
            ("num_classes", self.num_classes),
            ("embed_dim", self.embed_dim),
            ("tokenizer_conv_layers", self.tokenizer_conv_layers),
            ("tokenizer_kernel", self.tokenizer_kernel),
            ("tokenizer_pool", self.tokenizer_pool),
            ("tokenizer_pool_stride", self.tokenizer_pool_stride),
            ("num_heads", self.num_heads),
            ("ffn_hidden", self.ffn_hidden),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return invalid(format!("{name} must be positive"));
            }
        }
        if self.embed_dim % self.num_heads != 0 {
            return invalid(format!("embed_dim {} not divisible by num_heads {}", self.embed_dim, self.num_heads));
        }
        if self.tokenizer_conv_layers > 1 && self.embed_dim < 2 {
            return invalid("embed_dim must be at least 2 with multiple tokenizer layers".into());
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.attn_dropout) {
            return invalid("dropout rates must lie in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.stochastic_depth_max) {
            return invalid("stochastic_depth_max must lie in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return invalid("label_smoothing must lie in [0, 1)".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) || !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return invalid("lr must be positive and weight_decay non-negative".into());
        }
        if self.num_tokens()? == 0 {
            return invalid("tokenizer produces no tokens".into());
        }
        Ok(())
    }

    /// Whether two configs describe the same parameter layout.
    pub fn same_architecture(&self, other: &CctConfig) -> bool {
        self.input_hw == other.input_hw
            && self.input_channels == other.input_channels
            && self.num_classes == other.num_classes
            && self.embed_dim == other.embed_dim
            && self.tokenizer_conv_layers == other.tokenizer_conv_layers
            && self.tokenizer_kernel == other.tokenizer_kernel
            && self.tokenizer_pool == other.tokenizer_pool
            && self.tokenizer_pool_stride == other.tokenizer_pool_stride
            && self.num_encoder_layers == other.num_encoder_layers
            && self.num_heads == other.num_heads
            && self.ffn_hidden == other.ffn_hidden
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_give_49_tokens() {
        let cfg = CctConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.token_grid().unwrap(), 7);
        assert_eq!(cfg.num_tokens().unwrap(), 49);
        assert_eq!(cfg.head_dim(), 32);
        assert_eq!((cfg.tokenizer_channels(0), cfg.tokenizer_channels(1)), (64, 128));
    }

    #[test]
    fn recipe_defaults() {
        let cfg = CctConfig::default();
        assert_eq!(cfg.lr, 0.0018);
        assert_eq!(cfg.weight_decay, 0.00012);
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(cfg.epochs, 75);
        assert_eq!(cfg.num_encoder_layers, 8);
        assert_eq!(cfg.num_heads, 4);
    }

    #[test]
    fn drop_path_schedule_is_linear() {
        let cfg = CctConfig::default();
        assert_eq!(cfg.drop_path_rate(0), 0.0);
        assert!((cfg.drop_path_rate(7) - 0.1).abs() < 1e-15);
        assert!((cfg.drop_path_rate(3) - 0.1 * 3.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn text_round_trip() {
        let cfg = CctConfig { lr: 3.3e-4, seed: u64::MAX, embed_dim: 32, ..CctConfig::default() };
        let back = CctConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(CctConfig::from_text("bogus = 1"), Err(ConfigError::UnknownKey { line: 1, .. })));
        assert!(matches!(CctConfig::from_text("# hi\nlr = fast"), Err(ConfigError::BadValue { line: 2, .. })));
        assert!(matches!(CctConfig::from_text("lr"), Err(ConfigError::Syntax { .. })));
        assert!(matches!(CctConfig::from_text("lr = 1\nlr = 2"), Err(ConfigError::DuplicateKey { .. })));
        assert!(matches!(CctConfig::from_text("num_heads = 3"), Err(ConfigError::Invalid(_))));
        let cfg = CctConfig::from_text("epochs = 5 # short run\n\n").unwrap();
        assert_eq!(cfg.epochs, 5);
    }
}
