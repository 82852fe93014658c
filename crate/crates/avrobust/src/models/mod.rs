//! Toy-scale audio/visual classifiers, their training loop and checkpoints.

mod checkpoint;
mod config;
mod csn;
mod layers;
mod params;
mod r21d;
mod resnet;
mod train;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, file_hash, load_checkpoint, load_checkpoint_expecting, save_checkpoint, Checkpoint, RngState};
pub use config::{CsnConfig, FusionStage, ModelConfig, ResNetConfig};
pub use csn::CsnModel;
pub use layers::Mode;
pub use params::{ParamGroup, ParamSet};
pub use r21d::{R21dBlock, R21dConfig};
pub use resnet::ResNetModel;
pub use train::{balance_gradients, train, TrainConfig, TrainOutcome};

use crate::diffengine::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Any classifier the attacks and metrics can run against.
#[derive(Debug, Clone)]
pub enum Model {
    Csn(CsnModel),
    Resnet(ResNetModel),
}

impl Model {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(match config {
            ModelConfig::Csn(c) => Model::Csn(CsnModel::new(c.clone(), seed)?),
            ModelConfig::Resnet(c) => Model::Resnet(ResNetModel::new(c.clone(), seed)?),
        })
    }

    pub fn config(&self) -> ModelConfig {
        match self {
            Model::Csn(m) => ModelConfig::Csn(m.config().clone()),
            Model::Resnet(m) => ModelConfig::Resnet(m.config().clone()),
        }
    }

    pub fn params(&self) -> &ParamSet {
        match self {
            Model::Csn(m) => m.params(),
            Model::Resnet(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        match self {
            Model::Csn(m) => m.params_mut(),
            Model::Resnet(m) => m.params_mut(),
        }
    }

    pub fn fusion(&self) -> FusionStage {
        self.config().fusion()
    }

    pub fn classes(&self) -> usize {
        self.config().classes()
    }

    /// Records the forward pass on `g`; `p` are the bound parameters.
    /// Returns `[C]` probabilities.
    pub fn forward(&self, g: &mut Graph, p: &[Var], audio: Var, video: Option<Var>, mode: Mode) -> Result<Var> {
        match self {
            Model::Csn(m) => m.forward(g, p, audio, video, mode),
            Model::Resnet(m) => m.forward(g, p, audio),
        }
    }

    fn bind_video(&self, g: &mut Graph, video: Option<&Tensor>) -> Option<Var> {
        if self.fusion().uses_video() {
            video.map(|v| g.constant(v.clone()))
        } else {
            None
        }
    }

    /// Inference-mode probabilities for one clip.
    pub fn predict(&self, audio: &Tensor, video: Option<&Tensor>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.params().bind(&mut g, false);
        let a = g.constant(audio.clone());
        let v = self.bind_video(&mut g, video);
        let out = self.forward(&mut g, &p, a, v, Mode::EVAL)?;
        Ok(g.value(out).data().to_vec())
    }

    /// Inference-mode loss at `audio + delta` and its gradient with
    /// respect to `delta`. Video, when used, is held constant.
    pub fn input_gradient(&self, audio: &Tensor, delta: &Tensor, video: Option<&Tensor>, targets: &Tensor) -> Result<(f64, Tensor)> {
        if audio.shape() != delta.shape() {
            return Err(Error::dim(format!(
                "perturbation {:?} does not match features {:?}",
                delta.shape(),
                audio.shape()
            )));
        }
        let mut g = Graph::new();
        let p = self.params().bind(&mut g, false);
        let x = g.constant(audio.clone());
        let d = g.leaf(delta.clone().with_grad());
        let xd = g.add(x, d)?;
        let v = self.bind_video(&mut g, video);
        let probs = self.forward(&mut g, &p, xd, v, Mode::EVAL)?;
        let loss = g.bce_probs(probs, targets)?;
        let value = g.value(loss).item();
        let mut grads = g.backward(loss)?;
        let grad = grads.take(d).expect("delta requires grad");
        Ok((value, grad))
    }

    /// Loss and gradients for every parameter, in parameter order.
    pub fn param_gradients(&self, audio: &Tensor, video: Option<&Tensor>, targets: &Tensor, mode: Mode) -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let p = self.params().bind(&mut g, true);
        let a = g.constant(audio.clone());
        let v = self.bind_video(&mut g, video);
        let probs = self.forward(&mut g, &p, a, v, mode)?;
        let loss = g.bce_probs(probs, targets)?;
        let value = g.value(loss).item();
        let mut grads = g.backward(loss)?;
        let out = p
            .iter()
            .map(|&v| grads.take(v).expect("parameters require grad"))
            .collect();
        Ok((value, out))
    }
}
