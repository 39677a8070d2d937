//! Architecture configuration and its key-value text format.

use crate::error::{CosegError, Result};

/// Which semantic attention learner the model uses.
///
/// - CA: each image's channel attention is applied to the *other* image's
///   feature map.
/// - FCA: the two channel attentions are summed and passed through a learned
///   fusion layer; the fused selector multiplies both feature maps.
/// - CSA: CA's cross channel attention combined with each image's own
///   spatial attention map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Ca,
    Fca,
    Csa,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Ca => "ca",
            Variant::Fca => "fca",
            Variant::Csa => "csa",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "ca" => Ok(Variant::Ca),
            "fca" => Ok(Variant::Fca),
            "csa" => Ok(Variant::Csa),
            other => Err(CosegError::Config(format!(
                "unknown variant '{}', expected ca|fca|csa",
                other
            ))),
        }
    }
}

/// Encoder downsampling flavor. Average pooling keeps every path smooth for
/// gradient checking; max pooling is available for fidelity to the usual
/// VGG-style stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    Avg,
    Max,
}

impl Pooling {
    pub fn name(self) -> &'static str {
        match self {
            Pooling::Avg => "avg",
            Pooling::Max => "max",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "avg" => Ok(Pooling::Avg),
            "max" => Ok(Pooling::Max),
            other => Err(CosegError::Config(format!(
                "unknown pooling '{}', expected avg|max",
                other
            ))),
        }
    }
}

/// Full architecture description. The last stage width defines the attention
/// dimensionality; the decoder mirrors the stage count with halving widths.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub stage_channels: Vec<usize>,
    pub convs_per_stage: usize,
    pub input_size: usize,
    pub variant: Variant,
    pub dropout: f64,
    pub pooling: Pooling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stage_channels: vec![16, 32],
            convs_per_stage: 2,
            input_size: 64,
            variant: Variant::Ca,
            dropout: 0.1,
            pooling: Pooling::Avg,
        }
    }
}

impl ModelConfig {
    /// Desk-scale default, trainable in minutes on a CPU.
    pub fn desk(variant: Variant) -> Self {
        ModelConfig {
            variant,
            ..ModelConfig::default()
        }
    }

    /// Full-scale configuration with VGG16-like stage widths and 512x512
    /// inputs. Constructible, but far too slow to train here.
    pub fn full_scale(variant: Variant) -> Self {
        ModelConfig {
            stage_channels: vec![64, 128, 256, 512, 512],
            convs_per_stage: 2,
            input_size: 512,
            variant,
            dropout: 0.5,
            pooling: Pooling::Max,
        }
    }

    pub fn stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// Channel count of the encoder output, i.e. the attention dimension.
    pub fn feature_channels(&self) -> usize {
        *self.stage_channels.last().expect("validated non-empty")
    }

    /// Spatial extent of the encoder output.
    pub fn feature_extent(&self) -> usize {
        self.input_size >> self.stages()
    }

    /// (in, out) channel widths of the decoder conv chain: widths halve per
    /// up-stage and the final conv emits the two mask logit channels.
    pub fn decoder_widths(&self) -> Vec<(usize, usize)> {
        let stages = self.stages();
        let mut widths = Vec::with_capacity(stages);
        let mut cur = self.feature_channels();
        for i in 0..stages {
            let out = if i + 1 == stages { 2 } else { cur / 2 };
            widths.push((cur, out));
            cur = out;
        }
        widths
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() {
            return Err(CosegError::Config("stage_channels must be non-empty".into()));
        }
        if self.stage_channels.iter().any(|&c| c == 0) {
            return Err(CosegError::Config("stage widths must be >= 1".into()));
        }
        if self.convs_per_stage == 0 {
            return Err(CosegError::Config("convs_per_stage must be >= 1".into()));
        }
        let stages = self.stages();
        if self.input_size == 0 || self.input_size % (1 << stages) != 0 {
            return Err(CosegError::Config(format!(
                "input_size {} must be divisible by 2^{}",
                self.input_size, stages
            )));
        }
        if self.feature_extent() < 1 {
            return Err(CosegError::Config("input too small for the stage count".into()));
        }
        if self.feature_channels() >> (stages - 1) == 0 {
            return Err(CosegError::Config(
                "last stage width too small for the halving decoder".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CosegError::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Serializes as `key=value` lines.
    pub fn to_kv(&self) -> String {
        format!(
            "stage_channels={}\nconvs_per_stage={}\ninput_size={}\nvariant={}\ndropout={}\npooling={}\n",
            self.stage_channels
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(","),
            self.convs_per_stage,
            self.input_size,
            self.variant.name(),
            self.dropout,
            self.pooling.name()
        )
    }

    /// Parses `key=value` lines. Unknown keys are rejected; missing keys keep
    /// their defaults.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CosegError::Config(format!("line {}: expected key=value, got '{}'", lineno + 1, line))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| {
                CosegError::Config(format!("line {}: bad {} '{}'", lineno + 1, what, value))
            };
            match key {
                "stage_channels" => {
                    cfg.stage_channels = value
                        .split(',')
                        .map(|v| v.trim().parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad("stage_channels"))?;
                }
                "convs_per_stage" => {
                    cfg.convs_per_stage = value.parse().map_err(|_| bad("convs_per_stage"))?
                }
                "input_size" => cfg.input_size = value.parse().map_err(|_| bad("input_size"))?,
                "variant" => cfg.variant = Variant::from_name(value)?,
                "dropout" => cfg.dropout = value.parse().map_err(|_| bad("dropout"))?,
                "pooling" => cfg.pooling = Pooling::from_name(value)?,
                other => {
                    return Err(CosegError::Config(format!(
                        "line {}: unknown key '{}'",
                        lineno + 1,
                        other
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_shapes() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.feature_channels(), 32);
        assert_eq!(cfg.feature_extent(), 16);
        assert_eq!(cfg.decoder_widths(), vec![(32, 16), (16, 2)]);

        let three_stage = ModelConfig {
            stage_channels: vec![16, 32, 64],
            ..ModelConfig::default()
        };
        assert_eq!(three_stage.feature_channels(), 64);
        assert_eq!(three_stage.feature_extent(), 8);
        assert_eq!(
            three_stage.decoder_widths(),
            vec![(64, 32), (32, 16), (16, 2)]
        );
    }

    #[test]
    fn full_scale_shapes() {
        let cfg = ModelConfig::full_scale(Variant::Ca);
        cfg.validate().unwrap();
        assert_eq!(cfg.feature_channels(), 512);
        assert_eq!(cfg.feature_extent(), 16);
        assert_eq!(
            cfg.decoder_widths(),
            vec![(512, 256), (256, 128), (128, 64), (64, 32), (32, 2)]
        );
    }

    #[test]
    fn kv_roundtrip() {
        let cfg = ModelConfig {
            stage_channels: vec![8, 16],
            convs_per_stage: 1,
            input_size: 32,
            variant: Variant::Fca,
            dropout: 0.25,
            pooling: Pooling::Max,
        };
        let back = ModelConfig::from_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = ModelConfig::from_kv("input_size=64\nlearning=fast\n").unwrap_err();
        assert!(err.to_string().contains("unknown key"));
    }

    #[test]
    fn indivisible_input_rejected() {
        let err = ModelConfig::from_kv("stage_channels=8,16\ninput_size=30\n").unwrap_err();
        assert!(err.to_string().contains("divisible"));
    }
}
