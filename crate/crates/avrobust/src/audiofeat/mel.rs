use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{FeatureMatrix, Waveform};
use crate::diffengine::Tensor;
use crate::error::{Error, Result};

/// HTK mel scale.
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters with peak 1 at mel-spaced centers over
/// `[0, sample_rate/2]`; rows are filters, columns FFT bins.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    n_mels: usize,
    n_bins: usize,
    /// `n_mels + 2` edge frequencies in Hz: lower edge, centers, upper edge.
    edges_hz: Vec<f64>,
    weights: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, sample_rate: f64, n_fft: usize) -> Result<Self> {
        if n_mels < 2 {
            return Err(Error::config(format!("need at least 2 mel filters, got {n_mels}")));
        }
        if n_fft < 2 || !n_fft.is_power_of_two() {
            return Err(Error::config(format!("n_fft {n_fft} is not a power of two")));
        }
        if !(sample_rate > 0.0) {
            return Err(Error::config(format!("sample rate {sample_rate} must be positive")));
        }
        let n_bins = n_fft / 2 + 1;
        let top = hz_to_mel(sample_rate / 2.0);
        let edges_hz: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate / n_fft as f64;
        let mut weights = vec![0.0; n_mels * n_bins];
        for m in 0..n_mels {
            let (lo, c, hi) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let up = (f - lo) / (c - lo);
                let down = (hi - f) / (hi - c);
                weights[m * n_bins + k] = up.min(down).max(0.0);
            }
        }
        Ok(Self {
            n_mels,
            n_bins,
            edges_hz,
            weights,
        })
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn center_hz(&self, m: usize) -> f64 {
        self.edges_hz[m + 1]
    }

    pub fn centers_hz(&self) -> Vec<f64> {
        self.edges_hz[1..=self.n_mels].to_vec()
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.n_mels, self.n_bins], self.weights.clone())
    }

    /// Index of the filter whose center is nearest to `hz` on the mel axis.
    pub fn bin_for_hz(&self, hz: f64) -> usize {
        let target = hz_to_mel(hz);
        (0..self.n_mels)
            .min_by(|&a, &b| {
                let da = (hz_to_mel(self.center_hz(a)) - target).abs();
                let db = (hz_to_mel(self.center_hz(b)) - target).abs();
                da.total_cmp(&db)
            })
            .unwrap_or(0)
    }

    /// Frequency range whose energy stays inside filters `[lo, hi)`.
    pub fn band_hz(&self, lo: usize, hi: usize) -> (f64, f64) {
        (self.center_hz(lo), self.center_hz(hi.saturating_sub(1).max(lo)))
    }
}

/// STFT and mel projection settings.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureParams {
    pub sample_rate: f64,
    pub frame_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub log_floor: f64,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self {
            sample_rate: 16_000.0,
            frame_ms: 25.0,
            hop_ms: 25.0,
            n_mels: 64,
            log_floor: 1e-6,
        }
    }
}

impl FeatureParams {
    pub fn frame_len(&self) -> usize {
        (self.sample_rate * self.frame_ms / 1000.0).round() as usize
    }

    pub fn hop_len(&self) -> usize {
        (self.sample_rate * self.hop_ms / 1000.0).round() as usize
    }

    pub fn n_fft(&self) -> usize {
        self.frame_len().next_power_of_two()
    }

    /// Frames produced for `n` samples; a partial trailing frame is dropped.
    pub fn frames_for(&self, n: usize) -> usize {
        let frame = self.frame_len();
        if n < frame {
            0
        } else {
            1 + (n - frame) / self.hop_len()
        }
    }
}

/// Reusable extractor holding the FFT plan, window and filterbank.
pub struct MelExtractor {
    params: FeatureParams,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    bank: MelFilterbank,
}

impl MelExtractor {
    pub fn new(params: FeatureParams) -> Result<Self> {
        let frame = params.frame_len();
        if frame == 0 || params.hop_len() == 0 {
            return Err(Error::config("frame and hop must span at least one sample"));
        }
        let n_fft = params.n_fft();
        let bank = MelFilterbank::new(params.n_mels, params.sample_rate, n_fft)?;
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        // Periodic Hann.
        let window = (0..frame)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / frame as f64).cos())
            .collect();
        Ok(Self {
            params,
            fft,
            window,
            bank,
        })
    }

    pub fn params(&self) -> &FeatureParams {
        &self.params
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.bank
    }

    /// Power spectrogram `[frames × (n_fft/2+1)]` of a Hann-windowed STFT.
    pub fn power_spectrogram(&self, w: &Waveform) -> Result<Tensor> {
        self.check_rate(w)?;
        let frames = self.params.frames_for(w.samples().len());
        if frames == 0 {
            return Err(Error::validation(format!(
                "waveform of {} samples is shorter than one {}-sample frame",
                w.samples().len(),
                self.params.frame_len()
            )));
        }
        let n_fft = self.params.n_fft();
        let n_bins = n_fft / 2 + 1;
        let hop = self.params.hop_len();
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut out = Vec::with_capacity(frames * n_bins);
        for fi in 0..frames {
            let start = fi * hop;
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = match self.window.get(i) {
                    Some(&win) => Complex::new(w.samples()[start + i] * win, 0.0),
                    None => Complex::new(0.0, 0.0),
                };
            }
            self.fft.process(&mut buf);
            out.extend(buf[..n_bins].iter().map(|c| c.norm_sqr()));
        }
        Ok(Tensor::from_parts(vec![frames, n_bins], out))
    }

    /// Mel power before the logarithm, `[frames × n_mels]`.
    pub fn mel_power(&self, w: &Waveform) -> Result<Tensor> {
        let spec = self.power_spectrogram(w)?;
        let frames = spec.shape()[0];
        let (n_mels, n_bins) = (self.bank.n_mels(), self.bank.n_bins());
        let mut out = vec![0.0; frames * n_mels];
        for (fi, row) in spec.data().chunks(n_bins).enumerate() {
            for m in 0..n_mels {
                out[fi * n_mels + m] = self.bank.row(m).iter().zip(row).map(|(a, b)| a * b).sum();
            }
        }
        Ok(Tensor::from_parts(vec![frames, n_mels], out))
    }

    /// `ln(mel_power + floor)` as a `[frames × n_mels]` feature matrix.
    pub fn log_mel(&self, w: &Waveform) -> Result<FeatureMatrix> {
        let p = self.mel_power(w)?;
        let floor = self.params.log_floor;
        let data = p.data().iter().map(|v| (v + floor).ln()).collect();
        FeatureMatrix::new(Tensor::from_parts(p.shape().to_vec(), data))
    }

    fn check_rate(&self, w: &Waveform) -> Result<()> {
        if (w.sample_rate() - self.params.sample_rate).abs() > 1e-9 {
            return Err(Error::validation(format!(
                "waveform at {} Hz, extractor expects {} Hz",
                w.sample_rate(),
                self.params.sample_rate
            )));
        }
        Ok(())
    }
}

/// One-shot convenience around [`MelExtractor::log_mel`].
pub fn log_mel_spectrogram(w: &Waveform, params: &FeatureParams) -> Result<FeatureMatrix> {
    MelExtractor::new(params.clone())?.log_mel(w)
}
