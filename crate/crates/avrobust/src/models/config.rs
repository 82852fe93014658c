use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where video features join the audio pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionStage {
    AudioOnly,
    Early,
    Mid1,
    Mid2,
    Late,
}

impl FusionStage {
    pub const ALL: [FusionStage; 5] = [
        FusionStage::AudioOnly,
        FusionStage::Early,
        FusionStage::Mid1,
        FusionStage::Mid2,
        FusionStage::Late,
    ];

    pub fn uses_video(self) -> bool {
        self != FusionStage::AudioOnly
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FusionStage::AudioOnly => "audioonly",
            FusionStage::Early => "early",
            FusionStage::Mid1 => "mid1",
            FusionStage::Mid2 => "mid2",
            FusionStage::Late => "late",
        }
    }
}

impl fmt::Display for FusionStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for FusionStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "audioonly" | "audio" | "none" => Ok(FusionStage::AudioOnly),
            "early" => Ok(FusionStage::Early),
            "mid1" => Ok(FusionStage::Mid1),
            "mid2" => Ok(FusionStage::Mid2),
            "late" => Ok(FusionStage::Late),
            _ => Err(Error::config(format!(
                "unknown fusion stage {s:?} (expected audioonly, early, mid1, mid2 or late)"
            ))),
        }
    }
}

/// Convolutional self-attention network settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsnConfig {
    /// Mel bins of the input features.
    pub n_mels: usize,
    /// Output channels of each conv block.
    pub channels: Vec<usize>,
    /// 3×3 convolutions per block before its pooling layer.
    pub convs_per_block: usize,
    /// Max-pool window (time, freq) closing each block.
    pub pools: Vec<(usize, usize)>,
    pub transformer_blocks: usize,
    pub heads: usize,
    pub d_model: usize,
    pub ff_hidden: usize,
    pub classes: usize,
    pub dropout: f64,
    pub fusion: FusionStage,
    /// Width `H` of the video features.
    pub video_dim: usize,
    /// Bins the video stream is projected to before early fusion.
    pub video_bins: usize,
    /// Width of the video adapter used by mid fusion.
    pub video_width: usize,
    /// Weight of the audio branch in late fusion; the video branch gets the rest.
    pub late_audio_weight: f64,
}

impl Default for CsnConfig {
    fn default() -> Self {
        Self {
            n_mels: 64,
            channels: vec![4, 8, 16, 16],
            convs_per_block: 1,
            pools: vec![(2, 2), (2, 2), (1, 2), (1, 2)],
            transformer_blocks: 2,
            heads: 4,
            d_model: 64,
            ff_hidden: 128,
            classes: 10,
            dropout: 0.25,
            fusion: FusionStage::AudioOnly,
            video_dim: 16,
            video_bins: 16,
            video_width: 16,
            late_audio_weight: 0.5,
        }
    }
}

impl CsnConfig {
    pub fn conv_blocks(&self) -> usize {
        self.channels.len()
    }

    pub fn time_downsample_total(&self) -> usize {
        self.pools.iter().map(|p| p.0).product()
    }

    fn freq_downsample_total(&self) -> usize {
        self.pools.iter().map(|p| p.1).product()
    }

    /// Frequency bins entering the conv stack.
    pub fn input_bins(&self) -> usize {
        match self.fusion {
            FusionStage::Early => self.n_mels + self.video_bins,
            _ => self.n_mels,
        }
    }

    /// Bins left after all pooling layers.
    pub fn pooled_bins(&self) -> usize {
        self.input_bins() / self.freq_downsample_total()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::config(m));
        if self.channels.is_empty() || self.channels.contains(&0) {
            return err("every conv block needs at least one channel".into());
        }
        if self.pools.len() != self.channels.len() {
            return err(format!(
                "{} pool windows for {} conv blocks",
                self.pools.len(),
                self.channels.len()
            ));
        }
        if self.pools.iter().any(|&(t, f)| t == 0 || f == 0) {
            return err("pool windows must be at least 1x1".into());
        }
        if self.time_downsample_total() != 4 {
            return err(format!(
                "pool schedule downsamples time by {}, must be 4",
                self.time_downsample_total()
            ));
        }
        if self.convs_per_block == 0 {
            return err("convs_per_block must be >= 1".into());
        }
        if self.pooled_bins() == 0 {
            return err(format!(
                "pool schedule reduces {} bins to nothing",
                self.input_bins()
            ));
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return err(format!(
                "model width {} is not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        if self.classes == 0 || self.ff_hidden == 0 {
            return err("classes and ff_hidden must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.fusion.uses_video() && (self.video_dim == 0 || self.video_bins == 0 || self.video_width == 0) {
            return err("video widths must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.late_audio_weight) {
            return err("late_audio_weight must be in [0, 1]".into());
        }
        Ok(())
    }
}

/// Residual-convolution baseline settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResNetConfig {
    pub n_mels: usize,
    pub channels: usize,
    /// Mean-pool window after each residual block; one entry per block.
    pub pools: Vec<(usize, usize)>,
    pub classes: usize,
}

impl Default for ResNetConfig {
    fn default() -> Self {
        Self {
            n_mels: 64,
            channels: 8,
            pools: vec![(2, 2), (2, 2)],
            classes: 10,
        }
    }
}

impl ResNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.classes == 0 || self.pools.is_empty() {
            return Err(Error::config("resnet needs channels, classes and at least one block"));
        }
        if self.pools.iter().any(|&(t, f)| t == 0 || f == 0) {
            return Err(Error::config("pool windows must be at least 1x1"));
        }
        Ok(())
    }
}

/// Architecture selector stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "lowercase")]
pub enum ModelConfig {
    Csn(CsnConfig),
    Resnet(ResNetConfig),
}

impl ModelConfig {
    pub fn classes(&self) -> usize {
        match self {
            ModelConfig::Csn(c) => c.classes,
            ModelConfig::Resnet(c) => c.classes,
        }
    }

    pub fn fusion(&self) -> FusionStage {
        match self {
            ModelConfig::Csn(c) => c.fusion,
            ModelConfig::Resnet(_) => FusionStage::AudioOnly,
        }
    }

    pub fn n_mels(&self) -> usize {
        match self {
            ModelConfig::Csn(c) => c.n_mels,
            ModelConfig::Resnet(c) => c.n_mels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::Csn(c) => c.validate(),
            ModelConfig::Resnet(c) => c.validate(),
        }
    }
}
