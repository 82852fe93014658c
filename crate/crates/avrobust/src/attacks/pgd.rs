use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::project::{normalize_gradient_with, project, LinfStep, Norm};
use crate::diffengine::Tensor;
use crate::error::{Error, Result};

/// Half-open `[lo, hi)` index range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Range {
    pub lo: usize,
    pub hi: usize,
}

impl Range {
    pub fn new(lo: usize, hi: usize) -> Result<Self> {
        if lo >= hi {
            return Err(Error::validation(format!("range {lo}:{hi} is empty")));
        }
        Ok(Self { lo, hi })
    }

    pub fn contains(&self, i: usize) -> bool {
        (self.lo..self.hi).contains(&i)
    }
}

impl fmt::Display for Range {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.lo, self.hi)
    }
}

impl FromStr for Range {
    type Err = Error;

    /// Parses `lo:hi`.
    fn from_str(s: &str) -> Result<Self> {
        let (lo, hi) = s
            .split_once(':')
            .ok_or_else(|| Error::config(format!("range {s:?} is not lo:hi")))?;
        let parse = |x: &str| {
            x.trim()
                .parse::<usize>()
                .map_err(|_| Error::config(format!("range bound {x:?} is not a non-negative integer")))
        };
        let (lo, hi) = (parse(lo)?, parse(hi)?);
        if lo >= hi {
            return Err(Error::config(format!("range {s:?} is empty")));
        }
        Ok(Self { lo, hi })
    }
}

/// Frequency (mel bin) and temporal (frame) support of a perturbation.
/// An absent range means the whole axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct Mask {
    pub freq: Option<Range>,
    pub time: Option<Range>,
}

impl Mask {
    pub const NONE: Mask = Mask { freq: None, time: None };

    pub fn freq(lo: usize, hi: usize) -> Result<Self> {
        Ok(Self {
            freq: Some(Range::new(lo, hi)?),
            time: None,
        })
    }

    pub fn time(lo: usize, hi: usize) -> Result<Self> {
        Ok(Self {
            freq: None,
            time: Some(Range::new(lo, hi)?),
        })
    }

    pub fn is_full(&self) -> bool {
        self.freq.is_none() && self.time.is_none()
    }

    /// Both ranges must fit inside a `frames × bins` feature matrix.
    pub fn validate(&self, frames: usize, bins: usize) -> Result<()> {
        if let Some(f) = self.freq {
            if f.hi > bins {
                return Err(Error::validation(format!("frequency mask {f} exceeds {bins} mel bins")));
            }
        }
        if let Some(t) = self.time {
            if t.hi > frames {
                return Err(Error::validation(format!("temporal mask {t} exceeds {frames} frames")));
            }
        }
        Ok(())
    }

    pub fn contains(&self, frame: usize, bin: usize) -> bool {
        self.freq.map_or(true, |r| r.contains(bin)) && self.time.map_or(true, |r| r.contains(frame))
    }

    /// Zeroes every cell of a `[T × F]` tensor outside the mask.
    pub fn apply(&self, t: &mut Tensor) {
        if self.is_full() {
            return;
        }
        let bins = t.shape()[1];
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            if !self.contains(i / bins, i % bins) {
                *v = 0.0;
            }
        }
    }

    /// True when every cell outside the mask is exactly zero.
    pub fn supports(&self, t: &Tensor) -> bool {
        let bins = t.shape()[1];
        t.data()
            .iter()
            .enumerate()
            .all(|(i, &v)| v == 0.0 || self.contains(i / bins, i % bins))
    }
}

/// Which way the attack moves the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Increase the classification loss (untargeted attack).
    #[default]
    Ascent,
    /// Decrease it, matching the literal minus sign of the textbook update.
    Descent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub norm: Norm,
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    pub mask: Mask,
    pub seed: u64,
    /// Clips per universal-perturbation update.
    pub batch: usize,
    pub direction: Direction,
    pub linf_step: LinfStep,
    /// Start from a random point in the ball instead of zero.
    pub random_start: bool,
}

impl AttackConfig {
    /// `steps` defaults to `⌈ε/α⌉`.
    pub fn new(norm: Norm, epsilon: f64, alpha: f64) -> Result<Self> {
        let cfg = Self {
            norm,
            epsilon,
            alpha,
            steps: (epsilon / alpha).ceil().max(1.0) as usize,
            mask: Mask::NONE,
            seed: 0,
            batch: 32,
            direction: Direction::Ascent,
            linf_step: LinfStep::Sign,
            random_start: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::config(format!("epsilon {} must be positive", self.epsilon)));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::config(format!("alpha {} must be positive", self.alpha)));
        }
        if self.batch == 0 {
            return Err(Error::config("attack batch must be >= 1"));
        }
        Ok(())
    }
}

/// One projected step: `P_ε(δ ± α·normalize(mask ⊙ g))`, re-masked. The
/// sign follows `cfg.direction`.
pub fn pgd_step(delta: &Tensor, grad: &Tensor, cfg: &AttackConfig) -> Result<Tensor> {
    if delta.shape() != grad.shape() || delta.ndim() != 2 {
        return Err(Error::dim(format!(
            "pgd_step: delta {:?} vs gradient {:?}",
            delta.shape(),
            grad.shape()
        )));
    }
    let mut g = grad.clone();
    cfg.mask.apply(&mut g);
    let dir = normalize_gradient_with(&g, cfg.norm, cfg.linf_step);
    let sign = match cfg.direction {
        Direction::Ascent => 1.0,
        Direction::Descent => -1.0,
    };
    let stepped: Vec<f64> = delta
        .data()
        .iter()
        .zip(dir.data())
        .map(|(d, n)| d + sign * cfg.alpha * n)
        .collect();
    let mut out = project(&Tensor::new(delta.shape(), stepped)?, cfg.norm, cfg.epsilon)?;
    cfg.mask.apply(&mut out);
    Ok(out)
}

/// The multimodal update. The rule is the same as [`pgd_step`]; `grad_audio`
/// must be `∇_δ L(f((x_audio + δ) ⊕ x_video), y)` with the video input held
/// fixed, as produced by [`crate::models::Model::input_gradient`].
pub fn multimodal_pgd_step(delta_audio: &Tensor, grad_audio: &Tensor, cfg: &AttackConfig) -> Result<Tensor> {
    pgd_step(delta_audio, grad_audio, cfg)
}
