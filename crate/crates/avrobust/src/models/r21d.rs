use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{Conv, Linear, ParamBuilder, ParamSet};
use crate::diffengine::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct R21dConfig {
    /// Frames per window, `k`.
    pub window: usize,
    pub height: usize,
    pub width: usize,
    pub spatial_channels: usize,
    pub temporal_channels: usize,
    /// Output embedding width `H`.
    pub out_dim: usize,
}

impl Default for R21dConfig {
    fn default() -> Self {
        Self {
            window: 8,
            height: 8,
            width: 8,
            spatial_channels: 4,
            temporal_channels: 8,
            out_dim: 16,
        }
    }
}

/// Factorized spatio-temporal block: a 3×3 spatial convolution on every
/// frame, a `k`-tap temporal convolution collapsing the window, ReLU,
/// spatial mean and a projection to `H`.
#[derive(Debug, Clone)]
pub struct R21dBlock {
    config: R21dConfig,
    params: ParamSet,
    spatial: Conv,
    temporal: usize,
    temporal_bias: usize,
    out: Linear,
}

impl R21dBlock {
    pub fn new(config: R21dConfig, seed: u64) -> Result<Self> {
        let c = &config;
        if [c.window, c.height, c.width, c.spatial_channels, c.temporal_channels, c.out_dim].contains(&0) {
            return Err(Error::config("R(2+1)D extents must all be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder::new(&mut rng);
        let spatial = b.conv("r21d.spatial", 1, c.spatial_channels);
        let fan_in = c.window * c.spatial_channels;
        let temporal = b.glorot("r21d.temporal.w", &[c.temporal_channels, fan_in], fan_in, c.temporal_channels);
        let temporal_bias = b.zeros("r21d.temporal.b", &[c.temporal_channels]);
        let out = b.linear("r21d.out", c.temporal_channels, c.out_dim);
        Ok(Self {
            params: b.finish(),
            config,
            spatial,
            temporal,
            temporal_bias,
            out,
        })
    }

    pub fn config(&self) -> &R21dConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// One `[k × h × w]` window to a `[H]` embedding.
    pub fn forward(&self, g: &mut Graph, p: &[Var], clip: Var) -> Result<Var> {
        let c = &self.config;
        let expect = [c.window, c.height, c.width];
        if g.shape(clip) != expect {
            return Err(Error::dim(format!(
                "R(2+1)D window {:?}, block expects {expect:?}",
                g.shape(clip)
            )));
        }
        let hw = c.height * c.width;
        let frames = g.reshape(clip, &[c.window, hw])?;
        let mut maps = Vec::with_capacity(c.window);
        for t in 0..c.window {
            let f = g.slice_rows(frames, t, 1)?;
            let f = g.reshape(f, &[1, c.height, c.width])?;
            let s = self.spatial.apply(g, p, f)?;
            let s = g.relu(s)?;
            maps.push(g.reshape(s, &[c.spatial_channels, hw])?);
        }
        let stacked = g.concat_rows(&maps)?;
        let y = g.matmul(p[self.temporal], stacked)?;
        let y = g.add_channel_bias(y, p[self.temporal_bias])?;
        let y = g.relu(y)?;
        let y = g.mean_axis(y, 1)?;
        let y = g.reshape(y, &[1, c.temporal_channels])?;
        let y = self.out.apply(g, p, y)?;
        g.reshape(y, &[c.out_dim])
    }

    /// Encodes `M` frames `[M × h × w]` as `[H × N]` with `N = ⌈M/k⌉`; the
    /// last window is zero-padded when `k` does not divide `M`.
    pub fn encode_video(&self, g: &mut Graph, p: &[Var], video: Var) -> Result<Var> {
        let c = &self.config;
        let m = match *g.shape(video) {
            [m, h, w] if h == c.height && w == c.width && m > 0 => m,
            ref s => {
                return Err(Error::dim(format!(
                    "video {s:?}, block expects M×{}×{}",
                    c.height, c.width
                )))
            }
        };
        let hw = c.height * c.width;
        let n = m.div_ceil(c.window);
        let flat = g.reshape(video, &[m, hw])?;
        let padded = if n * c.window > m {
            let pad = g.constant(Tensor::zeros(&[n * c.window - m, hw]));
            g.concat_rows(&[flat, pad])?
        } else {
            flat
        };
        let mut cols = Vec::with_capacity(n);
        for i in 0..n {
            let w = g.slice_rows(padded, i * c.window, c.window)?;
            let w = g.reshape(w, &[c.window, c.height, c.width])?;
            let e = self.forward(g, p, w)?;
            cols.push(g.reshape(e, &[1, c.out_dim])?);
        }
        let rows = g.concat_rows(&cols)?;
        g.transpose(rows)
    }

    /// Inference helper returning `[H × N]` embeddings.
    pub fn embed(&self, video: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let v = g.constant(video.clone());
        let out = self.encode_video(&mut g, &p, v)?;
        Ok(g.value(out).clone())
    }
}
