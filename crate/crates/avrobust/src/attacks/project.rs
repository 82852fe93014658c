use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffengine::Tensor;
use crate::error::{Error, Result};

/// Norm order of the perturbation ball.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L1,
    L2,
    Linf,
}

impl Norm {
    pub fn as_str(self) -> &'static str {
        match self {
            Norm::L1 => "l1",
            Norm::L2 => "l2",
            Norm::Linf => "linf",
        }
    }

    pub fn of(self, t: &Tensor) -> f64 {
        match self {
            Norm::L1 => t.norm_l1(),
            Norm::L2 => t.norm_l2(),
            Norm::Linf => t.norm_linf(),
        }
    }
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" | "1" => Ok(Norm::L1),
            "l2" | "2" => Ok(Norm::L2),
            "linf" | "inf" | "l_inf" => Ok(Norm::Linf),
            _ => Err(Error::config(format!("unknown norm {s:?} (expected l1, l2 or linf)"))),
        }
    }
}

/// How the ℓ∞ step direction is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinfStep {
    /// `sign(g)`, the steepest-ascent direction in the ℓ∞ geometry.
    #[default]
    Sign,
    /// `g / ‖g‖∞`.
    Literal,
}

/// Euclidean projection onto the ℓp ball of radius `eps`.
pub fn project(v: &Tensor, p: Norm, eps: f64) -> Result<Tensor> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::config(format!("projection radius {eps} must be positive")));
    }
    let data = match p {
        Norm::Linf => v.data().iter().map(|x| x.clamp(-eps, eps)).collect(),
        Norm::L2 => {
            let n = v.norm_l2();
            if n > eps {
                let s = eps / n;
                v.data().iter().map(|x| x * s).collect()
            } else {
                v.data().to_vec()
            }
        }
        Norm::L1 => {
            if v.norm_l1() <= eps {
                v.data().to_vec()
            } else {
                let theta = l1_threshold(v.data(), eps);
                v.data()
                    .iter()
                    .map(|&x| x.signum() * (x.abs() - theta).max(0.0))
                    .collect()
            }
        }
    };
    Tensor::new(v.shape(), data)
}

/// The `θ ≥ 0` with `Σ max(|vᵢ| − θ, 0) = eps`, by sorting magnitudes.
/// Requires `‖v‖₁ > eps`.
fn l1_threshold(v: &[f64], eps: f64) -> f64 {
    let mut mags: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    mags.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (k, &m) in mags.iter().enumerate() {
        cumsum += m;
        let t = (cumsum - eps) / (k + 1) as f64;
        if m > t {
            theta = t;
        } else {
            break;
        }
    }
    theta.max(0.0)
}

/// Unit-norm steepest-ascent direction for `g`; zero stays zero.
pub fn normalize_gradient(g: &Tensor, p: Norm) -> Tensor {
    normalize_gradient_with(g, p, LinfStep::Sign)
}

pub fn normalize_gradient_with(g: &Tensor, p: Norm, linf: LinfStep) -> Tensor {
    let scale = |d: f64| {
        if d > 0.0 {
            g.map(|x| x / d).expect("finite quotient")
        } else {
            Tensor::zeros(g.shape())
        }
    };
    match (p, linf) {
        (Norm::L1, _) => scale(g.norm_l1()),
        (Norm::L2, _) => scale(g.norm_l2()),
        (Norm::Linf, LinfStep::Literal) => scale(g.norm_linf()),
        (Norm::Linf, LinfStep::Sign) => g
            .map(|x| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
            .expect("signs are finite"),
    }
}
