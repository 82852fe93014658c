use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{splitmix, Mode};
use super::params::ParamGroup;
use super::Model;
use crate::audiofeat::Clip;
use crate::diffengine::{AdamConfig, AdamState, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Equalize audio and video gradient norms on fusion models.
    pub balance: bool,
    /// Stops after this many updates when set.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch: 32,
            lr: 1e-3,
            seed: 0,
            balance: true,
            max_steps: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Mean batch loss of every update, in order.
    pub losses: Vec<f64>,
    /// `(‖g_audio‖₂, ‖g_video‖₂)` after balancing, one entry per balanced update.
    pub balanced_norms: Vec<(f64, f64)>,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
}

impl TrainOutcome {
    pub fn steps(&self) -> usize {
        self.losses.len()
    }
}

fn group_norm(grads: &[Tensor], groups: &[ParamGroup], which: ParamGroup) -> f64 {
    grads
        .iter()
        .zip(groups)
        .filter(|(_, &g)| g == which)
        .map(|(t, _)| t.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales the audio and video gradient blocks so both have ℓ2 norm equal
/// to the mean of their original norms. Returns the norms after rescaling,
/// or `None` (gradients untouched) when either block is zero or absent.
pub fn balance_gradients(grads: &mut [Tensor], groups: &[ParamGroup]) -> Option<(f64, f64)> {
    let na = group_norm(grads, groups, ParamGroup::Audio);
    let nv = group_norm(grads, groups, ParamGroup::Video);
    if na == 0.0 || nv == 0.0 {
        return None;
    }
    let target = 0.5 * (na + nv);
    for (t, &g) in grads.iter_mut().zip(groups) {
        let s = if g == ParamGroup::Audio { target / na } else { target / nv };
        for v in t.data_mut() {
            *v *= s;
        }
    }
    Some((
        group_norm(grads, groups, ParamGroup::Audio),
        group_norm(grads, groups, ParamGroup::Video),
    ))
}

/// Minimizes mean multi-label BCE over `clips` with Adam. Batches are drawn
/// from a seeded shuffle each epoch; clip gradients are accumulated in
/// batch order, so runs are bit-reproducible.
pub fn train(model: &mut Model, clips: &[&Clip], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if clips.is_empty() {
        return Err(Error::validation("training split is empty"));
    }
    if cfg.batch == 0 {
        return Err(Error::config("batch size must be >= 1"));
    }
    if !(cfg.lr > 0.0) {
        return Err(Error::config(format!("learning rate {} must be positive", cfg.lr)));
    }
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(adam_cfg, model.params().tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let groups = model.params().groups().to_vec();
    let balance = cfg.balance && model.fusion().uses_video();
    let targets: Vec<Tensor> = clips.iter().map(|c| c.labels.to_tensor()).collect();
    let mut order: Vec<usize> = (0..clips.len()).collect();
    let mut losses = Vec::new();
    let mut balanced_norms = Vec::new();
    let limit = cfg.max_steps.unwrap_or(usize::MAX);

    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch) {
            if losses.len() >= limit {
                break 'epochs;
            }
            let step = losses.len() as u64;
            let scale = 1.0 / batch.len() as f64;
            let mut acc: Vec<Tensor> = model.params().tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            let mut batch_loss = 0.0;
            for (slot, &i) in batch.iter().enumerate() {
                let mode = Mode::train(splitmix(cfg.seed ^ splitmix(step) ^ splitmix(slot as u64 + 1)));
                let clip = clips[i];
                let (loss, grads) = model.param_gradients(
                    clip.features.tensor(),
                    Some(clip.video.tensor()),
                    &targets[i],
                    mode,
                )?;
                batch_loss += loss * scale;
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += scale * y;
                    }
                }
            }
            if balance {
                if let Some(norms) = balance_gradients(&mut acc, &groups) {
                    balanced_norms.push(norms);
                }
            }
            adam.step(model.params_mut().tensors_mut(), &acc)?;
            log::debug!("epoch {epoch} step {step} loss {batch_loss:.6}");
            losses.push(batch_loss);
        }
    }
    Ok(TrainOutcome {
        losses,
        balanced_norms,
        adam,
        rng,
    })
}
