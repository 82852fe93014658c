//! Synthetic weakly-labeled clips whose classes live in known mel bands.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::mel::MelFilterbank;
use super::{LabelVector, Waveform};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Timbre {
    Tone,
    Harmonic,
    Chirp,
    NoiseBurst,
}

impl Timbre {
    pub const ALL: [Timbre; 4] = [Timbre::Tone, Timbre::Harmonic, Timbre::Chirp, Timbre::NoiseBurst];

    pub fn name(self) -> &'static str {
        match self {
            Timbre::Tone => "tone",
            Timbre::Harmonic => "harmonic",
            Timbre::Chirp => "chirp",
            Timbre::NoiseBurst => "noise",
        }
    }
}

/// One synthetic class: a half-open mel band `[lo, hi)` and a timbre.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub band: (usize, usize),
    pub timbre: Timbre,
}

/// Class-to-band assignment used by the synthesizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassBank {
    pub classes: Vec<ClassSpec>,
}

impl ClassBank {
    pub fn new(classes: Vec<ClassSpec>, n_mels: usize) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::validation("class bank is empty"));
        }
        let mut bands: Vec<(usize, usize)> = classes.iter().map(|c| c.band).collect();
        for &(lo, hi) in &bands {
            if lo >= hi || hi > n_mels {
                return Err(Error::validation(format!(
                    "band [{lo}, {hi}) is empty or outside {n_mels} mel bins"
                )));
            }
        }
        bands.sort_unstable();
        if bands.windows(2).any(|w| w[0].1 > w[1].0) {
            return Err(Error::validation("class bands overlap"));
        }
        Ok(Self { classes })
    }

    /// Splits `[lo, hi)` into `n` equal, non-overlapping bands separated
    /// by one guard bin, cycling through the timbre families.
    pub fn within(n: usize, lo: usize, hi: usize, n_mels: usize) -> Result<Self> {
        Self::from_regions(&[(lo, hi, n)], n_mels)
    }

    /// Places `count` classes in each `(lo, hi, count)` region.
    pub fn from_regions(regions: &[(usize, usize, usize)], n_mels: usize) -> Result<Self> {
        let mut classes = Vec::new();
        for &(lo, hi, count) in regions {
            if count == 0 {
                continue;
            }
            let width = (hi.saturating_sub(lo)) / count;
            if width < 2 {
                return Err(Error::validation(format!(
                    "region [{lo}, {hi}) too narrow for {count} classes"
                )));
            }
            for k in 0..count {
                let b_lo = lo + k * width;
                // Leave one guard bin at the top of each band.
                let b_hi = b_lo + width - 1;
                let idx = classes.len();
                let timbre = Timbre::ALL[idx % Timbre::ALL.len()];
                classes.push(ClassSpec {
                    name: format!("c{idx:02}_{}_{b_lo}_{b_hi}", timbre.name()),
                    band: (b_lo, b_hi),
                    timbre,
                });
            }
        }
        Self::new(classes, n_mels)
    }

    /// Default layout: classes spread over the `0–20`, `20–40` and `40–64`
    /// regions of a 64-bin feature.
    pub fn default_for(n_classes: usize, n_mels: usize) -> Result<Self> {
        let third = n_classes / 3;
        let rem = n_classes - 2 * third;
        let r1 = n_mels * 20 / 64;
        let r2 = n_mels * 40 / 64;
        Self::from_regions(&[(0, r1, third), (r1, r2, third), (r2, n_mels, rem)], n_mels)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }
}

/// Mixing parameters shared by every clip of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub sample_rate: f64,
    /// Event length range in seconds.
    pub event_seconds: (f64, f64),
    /// Event peak amplitude range before the final peak normalization.
    pub event_gain: (f64, f64),
    /// Standard deviation of the white background noise.
    pub noise_level: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            sample_rate: 16_000.0,
            event_seconds: (1.0, 4.0),
            event_gain: (0.3, 1.0),
            noise_level: 0.003,
        }
    }
}

/// Renders a clip containing one event per class in `class_set`.
pub fn synth_clip(
    class_set: &[usize],
    bank: &ClassBank,
    filters: &MelFilterbank,
    duration: f64,
    seed: u64,
    params: &SynthParams,
) -> Result<(Waveform, LabelVector)> {
    if class_set.is_empty() {
        return Err(Error::validation("class set is empty"));
    }
    if let Some(&bad) = class_set.iter().find(|&&c| c >= bank.len()) {
        return Err(Error::validation(format!(
            "unknown class id {bad} (bank has {})",
            bank.len()
        )));
    }
    let sr = params.sample_rate;
    let n = (duration * sr).round() as usize;
    if n == 0 {
        return Err(Error::validation("clip duration is zero"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mix = vec![0.0; n];
    if params.noise_level > 0.0 {
        let normal = Normal::new(0.0, params.noise_level)
            .map_err(|e| Error::config(format!("noise level: {e}")))?;
        for s in mix.iter_mut() {
            *s = normal.sample(&mut rng);
        }
    }
    let mut labels = vec![0u8; bank.len()];
    for &c in class_set {
        labels[c] = 1;
        let spec = &bank.classes[c];
        let (lo_hz, hi_hz) = filters.band_hz(spec.band.0, spec.band.1);
        let (emin, emax) = params.event_seconds;
        let len_s = rng.gen_range(emin.min(duration)..=emax.min(duration));
        let len = ((len_s * sr).round() as usize).clamp(1, n);
        let onset = rng.gen_range(0..=n - len);
        let gain = rng.gen_range(params.event_gain.0..=params.event_gain.1);
        let event = render_event(spec.timbre, lo_hz, hi_hz, len, sr, &mut rng);
        for (i, v) in event.into_iter().enumerate() {
            mix[onset + i] += gain * v;
        }
    }
    let peak = mix.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        for s in mix.iter_mut() {
            *s /= peak;
        }
    }
    Ok((Waveform::new(mix, sr)?, LabelVector::new(labels)?))
}

/// Unit-peak event of `len` samples with 10 ms raised-cosine fades.
fn render_event(timbre: Timbre, lo: f64, hi: f64, len: usize, sr: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mid = crate::audiofeat::mel::mel_to_hz(
        0.5 * (crate::audiofeat::mel::hz_to_mel(lo) + crate::audiofeat::mel::hz_to_mel(hi)),
    );
    let phase0 = rng.gen_range(0.0..2.0 * PI);
    let mut out: Vec<f64> = match timbre {
        Timbre::Tone => (0..len)
            .map(|i| (2.0 * PI * mid * i as f64 / sr + phase0).sin())
            .collect(),
        Timbre::Harmonic => {
            // Three consecutive harmonics of a fundamental that keeps all
            // of them inside [lo, hi].
            let f0 = ((hi - lo) / 2.0).max(1.0);
            let k0 = (lo / f0).ceil().max(1.0);
            let partials: Vec<(f64, f64)> = (0..3)
                .map(|j| ((k0 + j as f64) * f0, 1.0 / (1.0 + j as f64)))
                .filter(|(f, _)| *f <= hi + 1e-9)
                .collect();
            (0..len)
                .map(|i| {
                    partials
                        .iter()
                        .map(|(f, a)| a * (2.0 * PI * f * i as f64 / sr + phase0).sin())
                        .sum()
                })
                .collect()
        }
        Timbre::Chirp => {
            let dur = len as f64 / sr;
            let rate = (hi - lo) / dur.max(1e-9);
            (0..len)
                .map(|i| {
                    let t = i as f64 / sr;
                    (2.0 * PI * (lo * t + 0.5 * rate * t * t) + phase0).sin()
                })
                .collect()
        }
        Timbre::NoiseBurst => {
            let comps: Vec<(f64, f64)> = (0..24)
                .map(|_| (rng.gen_range(lo..=hi), rng.gen_range(0.0..2.0 * PI)))
                .collect();
            (0..len)
                .map(|i| {
                    comps
                        .iter()
                        .map(|(f, ph)| (2.0 * PI * f * i as f64 / sr + ph).sin())
                        .sum()
                })
                .collect()
        }
    };
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        for v in out.iter_mut() {
            *v /= peak;
        }
    }
    let fade = ((0.010 * sr) as usize).min(len / 2);
    for i in 0..fade {
        let g = 0.5 - 0.5 * (PI * i as f64 / fade as f64).cos();
        out[i] *= g;
        out[len - 1 - i] *= g;
    }
    out
}
