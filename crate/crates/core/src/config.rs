//! Model and training hyperparameters, plus the line-based `key = value`
//! text format used by config files and checkpoints.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Temporal encoder placed after the MST blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    Transformer,
    /// Level-4 features equal level-3 features.
    None,
    /// Recognized so ablation tables can name the row; building it fails.
    BiLstm,
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderKind::Transformer => "transformer",
            EncoderKind::None => "none",
            EncoderKind::BiLstm => "bilstm",
        })
    }
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "transformer" | "transformers" => Ok(EncoderKind::Transformer),
            "none" => Ok(EncoderKind::None),
            "bilstm" => Ok(EncoderKind::BiLstm),
            other => Err(Error::Config(format!("unknown encoder `{other}`"))),
        }
    }
}

/// Learning-rate multiplier applied from the given epoch onwards.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrDrop {
    /// Number of completed epochs after which the drop takes effect.
    pub epoch: usize,
    pub factor: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_in: usize,
    pub c1: usize,
    pub c2: usize,
    pub fc_layers: usize,
    pub num_scales: usize,
    pub num_mst_blocks: usize,
    pub encoder: EncoderKind,
    pub encoder_layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub ctc_levels: usize,
    pub vocab_size: usize,
    pub fusion_relu: bool,
    pub shared_classifier: bool,
    pub grad_stop_p: f64,
    pub temporal_aug: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_drops: Vec<LrDrop>,
    pub epochs: usize,
    pub batch_size: usize,
    pub beam_width: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        Self {
            d_in: 16,
            c1: 32,
            c2: 64,
            fc_layers: 2,
            num_scales: 4,
            num_mst_blocks: 2,
            encoder: EncoderKind::Transformer,
            encoder_layers: 2,
            heads: 8,
            ff_mult: 4,
            ctc_levels: 4,
            vocab_size: 10,
            fusion_relu: true,
            shared_classifier: false,
            grad_stop_p: 0.5,
            temporal_aug: 0.2,
            lr: 1e-3,
            weight_decay: 1e-4,
            lr_drops: vec![
                LrDrop {
                    epoch: 40,
                    factor: 0.2,
                },
                LrDrop {
                    epoch: 50,
                    factor: 0.2,
                },
            ],
            epochs: 60,
            batch_size: 2,
            beam_width: 10,
            seed: 0,
        }
    }
}

const KEYS: &[&str] = &[
    "d_in",
    "c1",
    "c2",
    "fc_layers",
    "num_scales",
    "num_mst_blocks",
    "encoder",
    "encoder_layers",
    "heads",
    "ff_mult",
    "ctc_levels",
    "vocab_size",
    "fusion_relu",
    "shared_classifier",
    "grad_stop_p",
    "temporal_aug",
    "lr",
    "weight_decay",
    "lr_drops",
    "epochs",
    "batch_size",
    "beam_width",
    "seed",
];

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got `{value}`"))),
    }
}

fn parse_drops(value: &str) -> Result<Vec<LrDrop>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let (e, f) = item
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("lr_drops: expected epoch:factor, got `{item}`")))?;
            Ok(LrDrop {
                epoch: parse_num("lr_drops", e.trim())?,
                factor: parse_num("lr_drops", f.trim())?,
            })
        })
        .collect()
}

impl ModelConfig {
    /// Full-size widths with a learning rate of 1e-4.
    pub fn full_scale() -> Self {
        Self {
            c1: 512,
            c2: 1024,
            lr: 1e-4,
            ..Self::default()
        }
    }

    /// Small enough for a finite-difference check of every parameter.
    pub fn tiny() -> Self {
        Self {
            d_in: 4,
            c1: 8,
            c2: 16,
            num_scales: 2,
            encoder_layers: 1,
            heads: 2,
            vocab_size: 3,
            ..Self::default()
        }
    }

    /// Number of gloss feature levels: frame features, one per MST block,
    /// and the encoder output.
    pub fn num_levels(&self) -> usize {
        self.num_mst_blocks + 2
    }

    /// Input lengths must be a multiple of this.
    pub fn time_multiple(&self) -> usize {
        1 << self.num_mst_blocks
    }

    /// Largest branch kernel, `3 + 2(n-1)`.
    pub fn max_kernel(&self) -> usize {
        3 + 2 * (self.num_scales.max(1) - 1)
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr_drops
            .iter()
            .filter(|d| epoch >= d.epoch)
            .fold(self.lr, |lr, d| lr * d.factor)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d_in == 0 || self.c1 == 0 || self.c2 == 0 {
            return fail("d_in, c1 and c2 must be positive".into());
        }
        if self.fc_layers > 3 {
            return fail(format!("fc_layers must be 0..=3, got {}", self.fc_layers));
        }
        if self.fc_layers == 0 && self.c1 != self.c2 {
            return fail(format!(
                "fc_layers = 0 requires c1 == c2 (got {} and {})",
                self.c1, self.c2
            ));
        }
        if self.num_scales == 0 {
            return fail("num_scales must be at least 1".into());
        }
        if self.num_mst_blocks == 0 {
            return fail("num_mst_blocks must be at least 1".into());
        }
        if self.heads == 0 || !self.c2.is_multiple_of(self.heads) {
            return fail(format!("c2 = {} must be divisible by heads = {}", self.c2, self.heads));
        }
        if self.c2 < 2 {
            return fail("c2 must be at least 2 for layer normalization".into());
        }
        if self.ff_mult == 0 {
            return fail("ff_mult must be positive".into());
        }
        if self.encoder == EncoderKind::BiLstm {
            return fail("encoder `bilstm` is not implemented".into());
        }
        if self.ctc_levels == 0 || self.ctc_levels > self.num_levels() {
            return fail(format!(
                "ctc_levels must be 1..={}, got {}",
                self.num_levels(),
                self.ctc_levels
            ));
        }
        if self.vocab_size == 0 {
            return fail("vocab_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.grad_stop_p) {
            return fail(format!("grad_stop_p must be in [0,1], got {}", self.grad_stop_p));
        }
        if !(0.0..1.0).contains(&self.temporal_aug) {
            return fail(format!("temporal_aug must be in [0,1), got {}", self.temporal_aug));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return fail("lr must be positive and weight_decay non-negative".into());
        }
        if self.batch_size == 0 || self.beam_width == 0 {
            return fail("batch_size and beam_width must be positive".into());
        }
        Ok(())
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "d_in" => self.d_in = parse_num(key, v)?,
            "c1" => self.c1 = parse_num(key, v)?,
            "c2" => self.c2 = parse_num(key, v)?,
            "fc_layers" => self.fc_layers = parse_num(key, v)?,
            "num_scales" => self.num_scales = parse_num(key, v)?,
            "num_mst_blocks" => self.num_mst_blocks = parse_num(key, v)?,
            "encoder" => self.encoder = v.parse()?,
            "encoder_layers" => self.encoder_layers = parse_num(key, v)?,
            "heads" => self.heads = parse_num(key, v)?,
            "ff_mult" => self.ff_mult = parse_num(key, v)?,
            "ctc_levels" => self.ctc_levels = parse_num(key, v)?,
            "vocab_size" => self.vocab_size = parse_num(key, v)?,
            "fusion_relu" => self.fusion_relu = parse_bool(key, v)?,
            "shared_classifier" => self.shared_classifier = parse_bool(key, v)?,
            "grad_stop_p" => self.grad_stop_p = parse_num(key, v)?,
            "temporal_aug" => self.temporal_aug = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "lr_drops" => self.lr_drops = parse_drops(v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "beam_width" => self.beam_width = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "d_in" => self.d_in.to_string(),
            "c1" => self.c1.to_string(),
            "c2" => self.c2.to_string(),
            "fc_layers" => self.fc_layers.to_string(),
            "num_scales" => self.num_scales.to_string(),
            "num_mst_blocks" => self.num_mst_blocks.to_string(),
            "encoder" => self.encoder.to_string(),
            "encoder_layers" => self.encoder_layers.to_string(),
            "heads" => self.heads.to_string(),
            "ff_mult" => self.ff_mult.to_string(),
            "ctc_levels" => self.ctc_levels.to_string(),
            "vocab_size" => self.vocab_size.to_string(),
            "fusion_relu" => self.fusion_relu.to_string(),
            "shared_classifier" => self.shared_classifier.to_string(),
            "grad_stop_p" => self.grad_stop_p.to_string(),
            "temporal_aug" => self.temporal_aug.to_string(),
            "lr" => self.lr.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "lr_drops" => self
                .lr_drops
                .iter()
                .map(|d| format!("{}:{}", d.epoch, d.factor))
                .collect::<Vec<_>>()
                .join(","),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "beam_width" => self.beam_width.to_string(),
            "seed" => self.seed.to_string(),
            _ => return None,
        })
    }

    pub fn keys() -> &'static [&'static str] {
        KEYS
    }

    /// Parses `key = value` lines on top of the defaults. Blank lines and
    /// lines starting with `#` are ignored.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Canonical text form; `from_text(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("known key")))
            .collect()
    }
}
