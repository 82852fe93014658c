use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffengine::{glorot_uniform, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Which modality branch a parameter belongs to, for gradient balancing.
/// Parameters only the video stream reaches are `Video`; all others are
/// `Audio`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Audio,
    Video,
}

/// Named, ordered parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    groups: Vec<ParamGroup>,
}

impl ParamSet {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    /// Total scalar parameter count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces a tensor, checking its shape.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let i = self
            .position(name)
            .ok_or_else(|| Error::validation(format!("no parameter named {name}")))?;
        if t.shape() != self.tensors[i].shape() {
            return Err(Error::dim(format!(
                "tensor {name}: shape {:?}, expected {:?}",
                t.shape(),
                self.tensors[i].shape()
            )));
        }
        self.tensors[i] = t;
        Ok(())
    }

    /// Records every parameter as a graph leaf; with `trainable` they
    /// receive gradients.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.set_requires_grad(trainable);
                g.leaf(t)
            })
            .collect()
    }
}

/// Accumulates named parameters while a model is laid out.
pub(crate) struct ParamBuilder<'r, R: Rng> {
    set: ParamSet,
    rng: &'r mut R,
    group: ParamGroup,
}

impl<'r, R: Rng> ParamBuilder<'r, R> {
    pub fn new(rng: &'r mut R) -> Self {
        Self {
            set: ParamSet::default(),
            rng,
            group: ParamGroup::Audio,
        }
    }

    pub fn group(&mut self, group: ParamGroup) {
        self.group = group;
    }

    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.set.names.push(name);
        self.set.tensors.push(t);
        self.set.groups.push(self.group);
        self.set.tensors.len() - 1
    }

    pub fn glorot(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, fan_out: usize) -> usize {
        let t = glorot_uniform(shape, fan_in, fan_out, self.rng);
        self.push(name.into(), t)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> usize {
        self.push(name.into(), Tensor::zeros(shape))
    }

    /// `[fan_in × fan_out]` weight plus a zero bias.
    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.glorot(format!("{name}.w"), &[fan_in, fan_out], fan_in, fan_out),
            b: self.zeros(format!("{name}.b"), &[fan_out]),
        }
    }

    pub fn conv(&mut self, name: &str, c_in: usize, c_out: usize) -> Conv {
        Conv {
            w: self.glorot(format!("{name}.w"), &[c_out, c_in, 3, 3], c_in * 9, c_out * 9),
            b: self.zeros(format!("{name}.b"), &[c_out]),
        }
    }

    pub fn finish(self) -> ParamSet {
        self.set
    }
}

/// Parameter indices of an affine layer `x·W + b`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn apply(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.w])?;
        g.add_row_bias(y, p[self.b])
    }
}

/// Parameter indices of a padded 3×3 convolution with channel bias.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv {
    pub w: usize,
    pub b: usize,
}

impl Conv {
    pub fn apply(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let y = g.conv2d(x, p[self.w], (1, 1))?;
        g.add_channel_bias(y, p[self.b])
    }
}
