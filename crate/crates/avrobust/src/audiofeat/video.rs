use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{LabelVector, VideoFeatures};
use crate::diffengine::Tensor;
use crate::error::{Error, Result};

/// Fixed per-class prototype embeddings of width `H`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoPrototypes {
    dim: usize,
    protos: Vec<Vec<f64>>,
}

impl VideoPrototypes {
    pub fn new(n_classes: usize, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("video embedding width must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let protos = (0..n_classes)
            .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        Ok(Self { dim, protos })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_classes(&self) -> usize {
        self.protos.len()
    }

    pub fn prototype(&self, class: usize) -> &[f64] {
        &self.protos[class]
    }
}

/// Class-conditioned stand-in for a frozen video backbone: the sum of the
/// active classes' prototypes, tiled over `windows` columns, plus Gaussian
/// noise of standard deviation `noise_scale`.
pub fn make_video_surrogate(
    labels: &LabelVector,
    protos: &VideoPrototypes,
    windows: usize,
    noise_scale: f64,
    seed: u64,
) -> Result<VideoFeatures> {
    if windows == 0 {
        return Err(Error::config("video window count must be >= 1"));
    }
    if labels.len() != protos.n_classes() {
        return Err(Error::dim(format!(
            "{} labels for {} prototypes",
            labels.len(),
            protos.n_classes()
        )));
    }
    let h = protos.dim();
    let mut column = vec![0.0; h];
    for c in labels.active() {
        for (o, p) in column.iter_mut().zip(protos.prototype(c)) {
            *o += p;
        }
    }
    let mut data = vec![0.0; h * windows];
    for (r, &base) in column.iter().enumerate() {
        data[r * windows..(r + 1) * windows].fill(base);
    }
    if noise_scale > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise_scale).map_err(|e| Error::config(format!("video noise: {e}")))?;
        for v in data.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    VideoFeatures::new(Tensor::new(&[h, windows], data)?)
}
