use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{CsnConfig, FusionStage};
use super::layers::{AttentionPool, Mode, TransformerBlock};
use super::params::{Conv, Linear, ParamBuilder, ParamGroup, ParamSet};
use crate::diffengine::{Graph, PoolMode, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
struct LateBranch {
    input: Linear,
    blocks: Vec<TransformerBlock>,
    head: AttentionPool,
}

#[derive(Debug, Clone)]
struct Layout {
    convs: Vec<Vec<Conv>>,
    proj: Linear,
    blocks: Vec<TransformerBlock>,
    head: AttentionPool,
    early: Option<Linear>,
    mid: Option<(Linear, Linear)>,
    late: Option<LateBranch>,
}

/// Convolutional self-attention network: conv/pool encoder, transformer
/// blocks without positional encoding, attention pooling, and an optional
/// video fusion path.
#[derive(Debug, Clone)]
pub struct CsnModel {
    config: CsnConfig,
    params: ParamSet,
    layout: Layout,
}

impl CsnModel {
    pub fn new(config: CsnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder::new(&mut rng);
        let c = &config;

        let mut convs = Vec::new();
        let mut c_in = 1;
        for (i, &c_out) in c.channels.iter().enumerate() {
            let mut block = Vec::new();
            for j in 0..c.convs_per_block {
                block.push(b.conv(&format!("enc.conv{i}_{j}"), c_in, c_out));
                c_in = c_out;
            }
            convs.push(block);
        }
        let flat = c_in * c.pooled_bins();
        let proj = b.linear("enc.proj", flat, c.d_model);
        let blocks = (0..c.transformer_blocks)
            .map(|i| TransformerBlock::build(&mut b, &format!("tf{i}"), c.d_model, c.ff_hidden, c.heads, c.dropout))
            .collect();
        let head = AttentionPool::build(&mut b, "head", c.d_model, c.classes);

        let (mut early, mut mid, mut late) = (None, None, None);
        match c.fusion {
            FusionStage::AudioOnly => {}
            FusionStage::Early => {
                b.group(ParamGroup::Video);
                early = Some(b.linear("early.v", c.video_dim, c.video_bins));
            }
            FusionStage::Mid1 | FusionStage::Mid2 => {
                let fuse = b.linear("mid.fuse", c.d_model + c.video_width, c.d_model);
                b.group(ParamGroup::Video);
                let adapter = b.linear("mid.v", c.video_dim, c.video_width);
                mid = Some((adapter, fuse));
            }
            FusionStage::Late => {
                b.group(ParamGroup::Video);
                let input = b.linear("late.v", c.video_dim, c.d_model);
                let blocks = (0..c.transformer_blocks)
                    .map(|i| {
                        TransformerBlock::build(&mut b, &format!("late.tf{i}"), c.d_model, c.ff_hidden, c.heads, c.dropout)
                    })
                    .collect();
                let head = AttentionPool::build(&mut b, "late.head", c.d_model, c.classes);
                late = Some(LateBranch { input, blocks, head });
            }
        }
        let params = b.finish();
        Ok(Self {
            config,
            params,
            layout: Layout {
                convs,
                proj,
                blocks,
                head,
                early,
                mid,
                late,
            },
        })
    }

    pub fn config(&self) -> &CsnConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn check_audio(&self, g: &Graph, audio: Var) -> Result<(usize, usize)> {
        match *g.shape(audio) {
            [t, f] if f == self.config.n_mels && t % 4 == 0 && t > 0 => Ok((t, f)),
            [t, f] if f == self.config.n_mels => Err(Error::dim(format!(
                "{t} frames is not a positive multiple of 4"
            ))),
            ref s => Err(Error::dim(format!(
                "audio features {s:?}, model expects T×{}",
                self.config.n_mels
            ))),
        }
    }

    fn check_video(&self, g: &Graph, video: Option<Var>) -> Result<Var> {
        let v = video.ok_or_else(|| {
            Error::validation(format!("{} fusion model needs video features", self.config.fusion))
        })?;
        match *g.shape(v) {
            [h, n] if h == self.config.video_dim && n > 0 => Ok(v),
            ref s => Err(Error::dim(format!(
                "video features {s:?}, model expects {}×N",
                self.config.video_dim
            ))),
        }
    }

    /// Nearest-neighbour time upsampling of `[H × N]` video to `[frames × H]`.
    fn video_rows(g: &mut Graph, video: Var, frames: usize) -> Result<Var> {
        let n = g.shape(video)[1];
        let vt = g.transpose(video)?;
        let idx: Vec<usize> = (0..frames).map(|t| t * n / frames).collect();
        g.gather_rows(vt, &idx)
    }

    /// Conv/pool stack over `[T × F']`, flattened and projected to `[T/4 × d]`.
    fn encode(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let (t, f) = (g.shape(x)[0], g.shape(x)[1]);
        let mut h = g.reshape(x, &[1, t, f])?;
        for (block, &window) in self.layout.convs.iter().zip(&self.config.pools) {
            for conv in block {
                h = conv.apply(g, p, h)?;
                h = g.relu(h)?;
            }
            h = g.pool(h, window, PoolMode::Max)?;
        }
        let (c, tq, fq) = (g.shape(h)[0], g.shape(h)[1], g.shape(h)[2]);
        let h = g.permute(h, &[1, 0, 2])?;
        let h = g.reshape(h, &[tq, c * fq])?;
        self.layout.proj.apply(g, p, h)
    }

    /// `[T × F]` features to the `[T/4 × d]` bottleneck sequence (audio only).
    pub fn audio_encoder_forward(&self, g: &mut Graph, p: &[Var], audio: Var) -> Result<Var> {
        self.check_audio(g, audio)?;
        if self.config.fusion == FusionStage::Early {
            return Err(Error::validation("early fusion encodes audio and video jointly"));
        }
        self.encode(g, p, audio)
    }

    pub fn transformer_block_forward(&self, g: &mut Graph, p: &[Var], block: usize, seq: Var, mode: Mode) -> Result<Var> {
        let b = self
            .layout
            .blocks
            .get(block)
            .ok_or_else(|| Error::validation(format!("no transformer block {block}")))?;
        b.forward(g, p, seq, mode, block as u64)
    }

    pub fn attention_pool(&self, g: &mut Graph, p: &[Var], seq: Var) -> Result<Var> {
        self.layout.head.forward(g, p, seq)
    }

    fn mid_fuse(&self, g: &mut Graph, p: &[Var], h: Var, video: Var) -> Result<Var> {
        let (adapter, fuse) = self.layout.mid.as_ref().expect("mid layout");
        let frames = g.shape(h)[0];
        let v = Self::video_rows(g, video, frames)?;
        let v = adapter.apply(g, p, v)?;
        let v = g.relu(v)?;
        let hv = g.concat_cols(&[h, v])?;
        fuse.apply(g, p, hv)
    }

    fn transformers(&self, g: &mut Graph, p: &[Var], mut h: Var, blocks: &[TransformerBlock], mode: Mode, tag: u64) -> Result<Var> {
        for (i, b) in blocks.iter().enumerate() {
            h = b.forward(g, p, h, mode, tag + i as u64)?;
        }
        Ok(h)
    }

    /// Clip-level class probabilities `[C]`.
    pub fn forward(&self, g: &mut Graph, p: &[Var], audio: Var, video: Option<Var>, mode: Mode) -> Result<Var> {
        let (t, _) = self.check_audio(g, audio)?;
        let fusion = self.config.fusion;
        let video = if fusion.uses_video() {
            Some(self.check_video(g, video)?)
        } else {
            None
        };
        let blocks = &self.layout.blocks;
        match fusion {
            FusionStage::AudioOnly => {
                let h = self.encode(g, p, audio)?;
                let h = self.transformers(g, p, h, blocks, mode, 0)?;
                self.layout.head.forward(g, p, h)
            }
            FusionStage::Early => {
                let v = Self::video_rows(g, video.expect("checked"), t)?;
                let v = self.layout.early.as_ref().expect("early layout").apply(g, p, v)?;
                let x = g.concat_cols(&[audio, v])?;
                let h = self.encode(g, p, x)?;
                let h = self.transformers(g, p, h, blocks, mode, 0)?;
                self.layout.head.forward(g, p, h)
            }
            FusionStage::Mid1 => {
                let h = self.encode(g, p, audio)?;
                let h = self.mid_fuse(g, p, h, video.expect("checked"))?;
                let h = self.transformers(g, p, h, blocks, mode, 0)?;
                self.layout.head.forward(g, p, h)
            }
            FusionStage::Mid2 => {
                let h = self.encode(g, p, audio)?;
                let h = self.transformers(g, p, h, blocks, mode, 0)?;
                let h = self.mid_fuse(g, p, h, video.expect("checked"))?;
                self.layout.head.forward(g, p, h)
            }
            FusionStage::Late => {
                let late = self.layout.late.as_ref().expect("late layout");
                let h = self.encode(g, p, audio)?;
                let h = self.transformers(g, p, h, blocks, mode, 0)?;
                let pa = self.layout.head.forward(g, p, h)?;
                let vt = g.transpose(video.expect("checked"))?;
                let v = late.input.apply(g, p, vt)?;
                let v = self.transformers(g, p, v, &late.blocks, mode, 1000)?;
                let pv = late.head.forward(g, p, v)?;
                let w = self.config.late_audio_weight;
                let pa = g.scale(pa, w)?;
                let pv = g.scale(pv, 1.0 - w)?;
                g.add(pa, pv)
            }
        }
    }
}
