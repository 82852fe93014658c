//! Log-mel features of a pure tone: the energy lands in the bins around
//! the tone's frequency.

use avrobust::audiofeat::{log_mel_spectrogram, FeatureParams, Waveform};

fn main() -> avrobust::Result<()> {
    let sr = 16_000.0;
    let freq = 1_000.0;
    let samples = (0..16_000)
        .map(|n| 0.5 * (2.0 * std::f64::consts::PI * freq * n as f64 / sr).sin())
        .collect();
    let params = FeatureParams::default();
    let feats = log_mel_spectrogram(&Waveform::new(samples, sr)?, &params)?;
    println!("{} frames x {} mel bins", feats.frames(), feats.bins());

    let x = feats.tensor();
    let mean: Vec<f64> = (0..feats.bins())
        .map(|b| (0..feats.frames()).map(|t| x.get2(t, b)).sum::<f64>() / feats.frames() as f64)
        .collect();
    let peak = (0..mean.len()).max_by(|&a, &b| mean[a].total_cmp(&mean[b])).unwrap();
    println!("loudest bin {peak} (mean log energy {:.2}), quietest {:.2}", mean[peak], mean.iter().cloned().fold(f64::INFINITY, f64::min));
    Ok(())
}
