use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// How the stride-4 feature map is produced from the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenizerKind {
    /// Conv-BN-ReLU blocks (first one at stride 2) followed by a 3×3/2 max-pool.
    Conv,
    /// A single 4×4 stride-4 linear patch embedding.
    Patch,
}

impl TokenizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TokenizerKind::Conv => "conv",
            TokenizerKind::Patch => "patch",
        }
    }
}

/// Complete architectural description; a model is a pure function of this
/// and a seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub tokenizer: TokenizerKind,
    /// Output channels of each tokenizer conv block; the last entry is C1.
    pub tokenizer_channels: Vec<usize>,
    /// Blocks in the first (stride-4) stage.
    pub conv_stage_blocks: usize,
    /// Width of the 1×1 → 3×3 → 1×1 bottleneck in conv-stage blocks.
    pub conv_stage_hidden: usize,
    /// Conv-MLP blocks per stage (M1, M2, M3).
    pub stage_depths: [usize; 3],
    /// (C1, C2, C3, C4).
    pub channels: [usize; 4],
    /// Hidden-width multiplier R of every channel MLP.
    pub mlp_ratio: usize,
    pub num_classes: usize,
    /// When false the first stage is made of Conv-MLP blocks at C1.
    pub use_conv_stage: bool,
    /// 3×3 stride-2 convolution between stages; otherwise 2×2 patch merging.
    pub use_conv_downsample: bool,
    /// Depthwise 3×3 convolution inside each Conv-MLP block.
    pub use_dw_conv: bool,
    pub dropout: f64,
}

/// Names accepted by [`ModelConfig::preset`].
pub const PRESET_NAMES: [&str; 11] =
    ["S", "M", "L", "pure_mlp_baseline", "A0", "A1", "A2", "A3", "A4", "A5", "tiny"];

impl ModelConfig {
    pub fn convmlp_s() -> Self {
        Self {
            tokenizer: TokenizerKind::Conv,
            tokenizer_channels: vec![32, 32, 64],
            conv_stage_blocks: 2,
            conv_stage_hidden: 128,
            stage_depths: [2, 4, 2],
            channels: [64, 128, 256, 512],
            mlp_ratio: 2,
            num_classes: 1000,
            use_conv_stage: true,
            use_conv_downsample: true,
            use_dw_conv: true,
            dropout: 0.0,
        }
    }

    pub fn convmlp_m() -> Self {
        Self { conv_stage_blocks: 3, stage_depths: [3, 6, 3], mlp_ratio: 3, ..Self::convmlp_s() }
    }

    pub fn convmlp_l() -> Self {
        Self {
            tokenizer_channels: vec![48, 48, 96],
            conv_stage_blocks: 3,
            conv_stage_hidden: 192,
            stage_depths: [4, 8, 3],
            channels: [96, 192, 384, 768],
            mlp_ratio: 3,
            ..Self::convmlp_s()
        }
    }

    /// Ablation ladder on top of ConvMLP-S. Rows 0-4 use the plain conv
    /// stage (bottleneck width C1); row 5 is the final ConvMLP-S with the
    /// widened (2·C1) conv stage.
    pub fn ablation(row: usize) -> Result<Self> {
        let plain = Self { conv_stage_hidden: 64, ..Self::convmlp_s() };
        let flags = |stage, down, dw| Self {
            use_conv_stage: stage,
            use_conv_downsample: down,
            use_dw_conv: dw,
            ..plain.clone()
        };
        Ok(match row {
            0 => flags(false, false, false),
            1 => flags(true, false, false),
            2 => flags(true, true, false),
            3 => flags(true, false, true),
            4 => flags(true, true, true),
            5 => Self::convmlp_s(),
            _ => return Err(Error::UnknownPreset(format!("A{row}"))),
        })
    }

    /// Small configuration for tests and desk-scale training.
    pub fn tiny(num_classes: usize) -> Self {
        Self {
            tokenizer: TokenizerKind::Conv,
            tokenizer_channels: vec![4, 4, 8],
            conv_stage_blocks: 1,
            conv_stage_hidden: 16,
            stage_depths: [1, 1, 1],
            channels: [8, 16, 32, 64],
            mlp_ratio: 2,
            num_classes,
            use_conv_stage: true,
            use_conv_downsample: true,
            use_dw_conv: true,
            dropout: 0.0,
        }
    }

    /// Looks up a named configuration. Case-insensitive; accepts the
    /// `convmlp-`/`convmlp_` prefix for S/M/L and `ablation_` for A0-A5.
    pub fn preset(name: &str) -> Result<Self> {
        let key = name.trim().to_ascii_lowercase();
        let key = key
            .strip_prefix("convmlp-")
            .or_else(|| key.strip_prefix("convmlp_"))
            .or_else(|| key.strip_prefix("ablation_"))
            .unwrap_or(&key);
        match key {
            "s" => Ok(Self::convmlp_s()),
            "m" => Ok(Self::convmlp_m()),
            "l" => Ok(Self::convmlp_l()),
            "pure_mlp_baseline" | "pure-mlp" | "baseline" => Self::ablation(0),
            "tiny" => Ok(Self::tiny(10)),
            _ => match key.strip_prefix('a').and_then(|r| r.parse::<usize>().ok()) {
                Some(row) if row <= 5 => Self::ablation(row),
                _ => Err(Error::UnknownPreset(name.to_string())),
            },
        }
    }

    pub fn c1(&self) -> usize {
        self.channels[0]
    }

    /// Checks every structural invariant, naming the offending field.
    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.channels.iter().position(|&c| c == 0) {
            return Err(Error::config("channels", format!("C{} must be positive", i + 1)));
        }
        if let Some(i) = self.stage_depths.iter().position(|&d| d == 0) {
            return Err(Error::config("stage_depths", format!("M{} must be at least 1", i + 1)));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config("mlp_ratio", "must be at least 1"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", format!("{} outside [0, 1)", self.dropout)));
        }
        if self.tokenizer == TokenizerKind::Conv {
            match self.tokenizer_channels.last() {
                None => return Err(Error::config("tokenizer_channels", "conv tokenizer needs at least one block")),
                Some(&last) if last != self.c1() => {
                    return Err(Error::config(
                        "tokenizer_channels",
                        format!("last entry {last} must equal C1 = {}", self.c1()),
                    ))
                }
                _ => {}
            }
            if self.tokenizer_channels.contains(&0) {
                return Err(Error::config("tokenizer_channels", "entries must be positive"));
            }
        }
        if self.use_conv_stage && self.conv_stage_blocks > 0 && self.conv_stage_hidden == 0 {
            return Err(Error::config("conv_stage_hidden", "must be positive when the conv stage is used"));
        }
        Ok(())
    }

    /// Name of the first field that differs from `other`, in declaration order.
    pub fn first_difference(&self, other: &Self) -> Option<&'static str> {
        let checks: [(&'static str, bool); 12] = [
            ("tokenizer", self.tokenizer == other.tokenizer),
            ("tokenizer_channels", self.tokenizer_channels == other.tokenizer_channels),
            ("conv_stage_blocks", self.conv_stage_blocks == other.conv_stage_blocks),
            ("conv_stage_hidden", self.conv_stage_hidden == other.conv_stage_hidden),
            ("stage_depths", self.stage_depths == other.stage_depths),
            ("channels", self.channels == other.channels),
            ("mlp_ratio", self.mlp_ratio == other.mlp_ratio),
            ("num_classes", self.num_classes == other.num_classes),
            ("use_conv_stage", self.use_conv_stage == other.use_conv_stage),
            ("use_conv_downsample", self.use_conv_downsample == other.use_conv_downsample),
            ("use_dw_conv", self.use_dw_conv == other.use_dw_conv),
            ("dropout", self.dropout.to_bits() == other.dropout.to_bits()),
        ];
        checks.iter().find(|(_, same)| !same).map(|(name, _)| *name)
    }

    /// Short human-readable description, e.g. for summaries.
    pub fn describe(&self) -> String {
        format!(
            "depths {:?}, channels {:?}, R={}, conv stage {}x{} (hidden {}), conv downsample {}, dw conv {}",
            self.stage_depths,
            self.channels,
            self.mlp_ratio,
            if self.use_conv_stage { "conv" } else { "mlp" },
            self.conv_stage_blocks,
            self.conv_stage_hidden,
            self.use_conv_downsample,
            self.use_dw_conv,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_presets() {
        let s = ModelConfig::preset("S").unwrap();
        assert_eq!(s.stage_depths, [2, 4, 2]);
        assert_eq!(s.mlp_ratio, 2);
        assert_eq!(s.channels, [64, 128, 256, 512]);
        let m = ModelConfig::preset("convmlp-m").unwrap();
        assert_eq!((m.stage_depths, m.mlp_ratio, m.channels), ([3, 6, 3], 3, [64, 128, 256, 512]));
        let l = ModelConfig::preset("L").unwrap();
        assert_eq!((l.stage_depths, l.mlp_ratio, l.channels), ([4, 8, 3], 3, [96, 192, 384, 768]));
        for name in PRESET_NAMES {
            ModelConfig::preset(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn baseline_has_no_conv_components() {
        let b = ModelConfig::preset("pure_mlp_baseline").unwrap();
        assert!(!b.use_conv_stage && !b.use_dw_conv && !b.use_conv_downsample);
        assert_eq!(ModelConfig::preset("ablation_a5").unwrap(), ModelConfig::convmlp_s());
    }

    #[test]
    fn unknown_preset_is_a_lookup_error() {
        assert!(matches!(ModelConfig::preset("XL"), Err(Error::UnknownPreset(_))));
        assert!(matches!(ModelConfig::preset("A6"), Err(Error::UnknownPreset(_))));
    }

    #[test]
    fn validation_names_the_field() {
        let mut c = ModelConfig::convmlp_s();
        c.tokenizer_channels = vec![32, 32, 48];
        assert!(matches!(c.validate(), Err(Error::Config { field: "tokenizer_channels", .. })));
        let mut c = ModelConfig::convmlp_s();
        c.stage_depths[1] = 0;
        assert!(matches!(c.validate(), Err(Error::Config { field: "stage_depths", .. })));
    }

    #[test]
    fn first_difference_reports_declaration_order() {
        let s = ModelConfig::convmlp_s();
        assert_eq!(s.first_difference(&s), None);
        assert_eq!(ModelConfig::tiny(2).first_difference(&s), Some("tokenizer_channels"));
        let r3 = ModelConfig { mlp_ratio: 3, ..s.clone() };
        assert_eq!(s.first_difference(&r3), Some("mlp_ratio"));
    }
}
