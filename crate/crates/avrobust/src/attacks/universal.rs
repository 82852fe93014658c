use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::pgd::{pgd_step, AttackConfig, Direction, Mask, Range};
use super::project::{project, LinfStep, Norm};
use crate::audiofeat::container::{read_tensor_file, write_atomic, write_tensor_file};
use crate::audiofeat::{Clip, DType, FeatureMatrix};
use crate::diffengine::Tensor;
use crate::error::{Error, Result};
use crate::models::Model;

/// Slack allowed on the ball constraint when a perturbation is reloaded.
pub const BALL_TOLERANCE: f64 = 1e-9;

/// A universal perturbation with the settings that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub delta: Tensor,
    pub config: AttackConfig,
    /// Hash of the manifest whose training split produced `delta`.
    pub manifest_hash: String,
    /// PGD updates actually made.
    pub steps_run: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct MaskRecord {
    f_lo: Option<usize>,
    f_hi: Option<usize>,
    t_lo: Option<usize>,
    t_hi: Option<usize>,
}

impl MaskRecord {
    fn from_mask(m: &Mask) -> Self {
        Self {
            f_lo: m.freq.map(|r| r.lo),
            f_hi: m.freq.map(|r| r.hi),
            t_lo: m.time.map(|r| r.lo),
            t_hi: m.time.map(|r| r.hi),
        }
    }

    fn to_mask(self) -> Result<Mask> {
        let range = |lo: Option<usize>, hi: Option<usize>, axis: &str| match (lo, hi) {
            (None, None) => Ok(None),
            (Some(lo), Some(hi)) => Range::new(lo, hi).map(Some),
            _ => Err(Error::validation(format!("{axis} mask has only one bound"))),
        };
        Ok(Mask {
            freq: range(self.f_lo, self.f_hi, "frequency")?,
            time: range(self.t_lo, self.t_hi, "temporal")?,
        })
    }
}

/// The JSON sidecar stored next to the perturbation tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    norm: Norm,
    epsilon: f64,
    alpha: f64,
    steps: usize,
    mask: MaskRecord,
    manifest_hash: String,
    seed: u64,
    #[serde(default = "default_batch")]
    batch: usize,
    #[serde(default)]
    direction: Direction,
    #[serde(default)]
    linf_step: LinfStep,
    #[serde(default)]
    random_start: bool,
    #[serde(default)]
    steps_run: usize,
}

fn default_batch() -> usize {
    32
}

/// `<path>.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl Perturbation {
    /// Checks the ball constraint and the mask support.
    pub fn check(&self) -> Result<()> {
        if self.delta.ndim() != 2 {
            return Err(Error::validation(format!(
                "perturbation must be 2-D, got {:?}",
                self.delta.shape()
            )));
        }
        self.config.mask.validate(self.delta.shape()[0], self.delta.shape()[1])?;
        let n = self.config.norm.of(&self.delta);
        if !(n <= self.config.epsilon + BALL_TOLERANCE) {
            return Err(Error::validation(format!(
                "perturbation {} norm {n} exceeds epsilon {}",
                self.config.norm, self.config.epsilon
            )));
        }
        if !self.config.mask.supports(&self.delta) {
            return Err(Error::validation("perturbation is non-zero outside its mask"));
        }
        Ok(())
    }

    /// Writes the tensor as f64 AVFB at `path` and the sidecar at `<path>.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.check()?;
        let c = &self.config;
        let side = Sidecar {
            norm: c.norm,
            epsilon: c.epsilon,
            alpha: c.alpha,
            steps: c.steps,
            mask: MaskRecord::from_mask(&c.mask),
            manifest_hash: self.manifest_hash.clone(),
            seed: c.seed,
            batch: c.batch,
            direction: c.direction,
            linf_step: c.linf_step,
            random_start: c.random_start,
            steps_run: self.steps_run,
        };
        write_tensor_file(path, &self.delta, DType::F64)?;
        let mut json = serde_json::to_string_pretty(&side)?;
        json.push('\n');
        write_atomic(&sidecar_path(path), json.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let delta = read_tensor_file(path)?;
        let sp = sidecar_path(path);
        let text = fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
        let side: Sidecar = serde_json::from_str(&text)?;
        let config = AttackConfig {
            norm: side.norm,
            epsilon: side.epsilon,
            alpha: side.alpha,
            steps: side.steps,
            mask: side.mask.to_mask()?,
            seed: side.seed,
            batch: side.batch,
            direction: side.direction,
            linf_step: side.linf_step,
            random_start: side.random_start,
        };
        config.validate()?;
        let p = Self {
            delta,
            config,
            manifest_hash: side.manifest_hash,
            steps_run: side.steps_run,
        };
        p.check()?;
        Ok(p)
    }

    /// `x + δ`.
    pub fn apply(&self, features: &FeatureMatrix) -> Result<FeatureMatrix> {
        apply_perturbation(features, &self.delta)
    }
}

pub fn apply_perturbation(features: &FeatureMatrix, delta: &Tensor) -> Result<FeatureMatrix> {
    let x = features.tensor();
    if x.shape() != delta.shape() {
        return Err(Error::dim(format!(
            "perturbation {:?} does not match features {:?}",
            delta.shape(),
            x.shape()
        )));
    }
    let data = x.data().iter().zip(delta.data()).map(|(a, b)| a + b).collect();
    FeatureMatrix::new(Tensor::new(x.shape(), data)?)
}

/// Universal PGD against an arbitrary differentiable objective.
///
/// `grad_fn(batch, δ)` returns the mean gradient of the loss over the
/// sample indices in `batch` at the current `δ`. Samples are reshuffled
/// every pass with a generator seeded from `cfg.seed`; exactly `cfg.steps`
/// updates are made. `observe(step, δ)` sees every iterate.
pub fn train_universal_with<G, O>(
    n_samples: usize,
    shape: [usize; 2],
    cfg: &AttackConfig,
    mut grad_fn: G,
    mut observe: O,
) -> Result<Tensor>
where
    G: FnMut(&[usize], &Tensor) -> Result<Tensor>,
    O: FnMut(usize, &Tensor),
{
    cfg.validate()?;
    if n_samples == 0 {
        return Err(Error::validation("cannot train a perturbation on an empty split"));
    }
    cfg.mask.validate(shape[0], shape[1])?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut delta = Tensor::zeros(&shape);
    if cfg.random_start {
        let data = (0..shape[0] * shape[1])
            .map(|_| rng.gen_range(-cfg.epsilon..=cfg.epsilon))
            .collect();
        delta = project(&Tensor::new(&shape, data)?, cfg.norm, cfg.epsilon)?;
        cfg.mask.apply(&mut delta);
    }
    let mut order: Vec<usize> = (0..n_samples).collect();
    let mut step = 0;
    'outer: while step < cfg.steps {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch) {
            if step == cfg.steps {
                break 'outer;
            }
            let grad = grad_fn(batch, &delta)?;
            delta = pgd_step(&delta, &grad, cfg)?;
            step += 1;
            observe(step, &delta);
        }
    }
    Ok(delta)
}

/// Trains one perturbation shared by all `clips` against `model`. The
/// gradient is taken through the full (possibly fused) model with video
/// held fixed.
pub fn train_universal_perturbation(
    model: &Model,
    clips: &[&Clip],
    cfg: &AttackConfig,
    manifest_hash: &str,
) -> Result<Perturbation> {
    train_universal_observed(model, clips, cfg, manifest_hash, |_, _| {})
}

pub fn train_universal_observed<O: FnMut(usize, &Tensor)>(
    model: &Model,
    clips: &[&Clip],
    cfg: &AttackConfig,
    manifest_hash: &str,
    observe: O,
) -> Result<Perturbation> {
    let first = clips
        .first()
        .ok_or_else(|| Error::validation("cannot train a perturbation on an empty split"))?;
    let shape = [first.features.frames(), first.features.bins()];
    let targets: Vec<Tensor> = clips.iter().map(|c| c.labels.to_tensor()).collect();
    let delta = train_universal_with(
        clips.len(),
        shape,
        cfg,
        |batch, delta| {
            let mut sum = Tensor::zeros(&shape);
            for &i in batch {
                let c = clips[i];
                let (_, g) = model.input_gradient(c.features.tensor(), delta, Some(c.video.tensor()), &targets[i])?;
                for (s, v) in sum.data_mut().iter_mut().zip(g.data()) {
                    *s += v;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            sum.data_mut().iter_mut().for_each(|s| *s *= inv);
            Ok(sum)
        },
        observe,
    )?;
    Ok(Perturbation {
        delta,
        config: cfg.clone(),
        manifest_hash: manifest_hash.to_string(),
        steps_run: cfg.steps,
    })
}
