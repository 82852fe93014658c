//! Synthetic labeled audio, log-mel features, surrogate video features and
//! the on-disk formats that hold them.

pub mod container;
mod dataset;
pub mod manifest;
pub mod mel;
pub mod synth;
mod video;

pub use container::{read_feature_file, write_feature_file, DType};
pub use dataset::{synthesize_dataset, Clip, Dataset, DatasetSpec};
pub use manifest::{ClipRecord, DatasetManifest, Split};
pub use mel::{hz_to_mel, log_mel_spectrogram, mel_to_hz, FeatureParams, MelExtractor, MelFilterbank};
pub use synth::{synth_clip, ClassBank, ClassSpec, SynthParams, Timbre};
pub use video::{make_video_surrogate, VideoPrototypes};

use crate::diffengine::Tensor;
use crate::error::{Error, Result};

/// Mono samples in `[−1, 1]` at a fixed rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: f64,
}

impl Waveform {
    /// Values outside `[−1, 1]` are clipped.
    pub fn new(samples: Vec<f64>, sample_rate: f64) -> Result<Self> {
        if !(sample_rate > 0.0) || !sample_rate.is_finite() {
            return Err(Error::validation(format!("sample rate {sample_rate} must be positive")));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("waveform samples".into()));
        }
        let samples = samples.into_iter().map(|s| s.clamp(-1.0, 1.0)).collect();
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate
    }

    /// Multiplies every sample by `c`, clipping to `[−1, 1]`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.samples.iter().map(|s| s * c).collect(), self.sample_rate)
    }
}

/// `T × F` log-mel energies; the surface every attack perturbs.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix(Tensor);

impl FeatureMatrix {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.ndim() != 2 || t.is_empty() {
            return Err(Error::dim(format!("feature matrix must be T×F, got {:?}", t.shape())));
        }
        Ok(Self(t))
    }

    pub fn frames(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn bins(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Multi-hot clip-level labels with at least one positive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector(Vec<u8>);

impl LabelVector {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::validation("label entries must be 0 or 1"));
        }
        if !bits.contains(&1) {
            return Err(Error::validation("label vector has no positive class"));
        }
        Ok(Self(bits))
    }

    pub fn from_ids(ids: &[usize], n_classes: usize) -> Result<Self> {
        let mut bits = vec![0; n_classes];
        for &id in ids {
            *bits
                .get_mut(id)
                .ok_or_else(|| Error::validation(format!("class id {id} out of {n_classes}")))? = 1;
        }
        Self::new(bits)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn active(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &b)| b == 1).map(|(i, _)| i)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.0.len()], self.0.iter().map(|&b| b as f64).collect())
    }
}

/// `H × N` video embedding: `H` features per window, `N` windows.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoFeatures(Tensor);

impl VideoFeatures {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.ndim() != 2 || t.is_empty() {
            return Err(Error::dim(format!("video features must be H×N, got {:?}", t.shape())));
        }
        Ok(Self(t))
    }

    pub fn dim(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn windows(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// `⌈frames / window⌉`.
pub fn window_count(frames: usize, window: usize) -> usize {
    frames.div_ceil(window.max(1))
}
