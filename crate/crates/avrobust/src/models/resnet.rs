use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ResNetConfig;
use super::params::{Conv, Linear, ParamBuilder, ParamSet};
use crate::diffengine::{Graph, PoolMode, Var, PROB_CLAMP};
use crate::error::{Error, Result};

/// Pure convolutional baseline: stem conv, residual blocks
/// `relu(x + conv(relu(conv(x))))` with mean pooling between them, global
/// mean pooling and a per-class sigmoid.
#[derive(Debug, Clone)]
pub struct ResNetModel {
    config: ResNetConfig,
    params: ParamSet,
    stem: Conv,
    blocks: Vec<(Conv, Conv)>,
    out: Linear,
}

impl ResNetModel {
    pub fn new(config: ResNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder::new(&mut rng);
        let c = config.channels;
        let stem = b.conv("stem", 1, c);
        let blocks = (0..config.pools.len())
            .map(|i| (b.conv(&format!("res{i}.a"), c, c), b.conv(&format!("res{i}.b"), c, c)))
            .collect();
        let out = b.linear("out", c, config.classes);
        Ok(Self {
            params: b.finish(),
            config,
            stem,
            blocks,
            out,
        })
    }

    pub fn config(&self) -> &ResNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Stem output after ReLU, `[C × T × F]`.
    pub fn stem_forward(&self, g: &mut Graph, p: &[Var], audio: Var) -> Result<Var> {
        let (t, f) = match *g.shape(audio) {
            [t, f] if f == self.config.n_mels && t > 0 && t % 4 == 0 => (t, f),
            ref s => {
                return Err(Error::dim(format!(
                    "audio features {s:?}, model expects T×{} with T a positive multiple of 4",
                    self.config.n_mels
                )))
            }
        };
        let x = g.reshape(audio, &[1, t, f])?;
        let x = self.stem.apply(g, p, x)?;
        g.relu(x)
    }

    /// Clip-level class probabilities `[C]`.
    pub fn forward(&self, g: &mut Graph, p: &[Var], audio: Var) -> Result<Var> {
        let mut x = self.stem_forward(g, p, audio)?;
        for ((a, b), &window) in self.blocks.iter().zip(&self.config.pools) {
            let r = a.apply(g, p, x)?;
            let r = g.relu(r)?;
            let r = b.apply(g, p, r)?;
            let y = g.add(x, r)?;
            x = g.relu(y)?;
            x = g.pool(x, window, PoolMode::Mean)?;
        }
        let (c, t, f) = (g.shape(x)[0], g.shape(x)[1], g.shape(x)[2]);
        let flat = g.reshape(x, &[c, t * f])?;
        let pooled = g.mean_axis(flat, 1)?;
        let pooled = g.reshape(pooled, &[1, c])?;
        let z = self.out.apply(g, p, pooled)?;
        let z = g.reshape(z, &[self.config.classes])?;
        let p = g.sigmoid(z)?;
        g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    }
}
