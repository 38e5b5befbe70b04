//! Small parameterized building blocks shared by the fusion and refinement modules.

use rand::Rng;

use crate::numerics::{Graph, Tensor, Var};
use crate::params::{fan_in_uniform, Binding, ParamStore};
use crate::Result;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    prefix: String,
    dim: usize,
}

impl LayerNorm {
    pub fn new(prefix: impl Into<String>, dim: usize) -> Self {
        Self {
            prefix: prefix.into(),
            dim,
        }
    }

    pub fn gamma(&self) -> String {
        format!("{}.gamma", self.prefix)
    }

    pub fn beta(&self) -> String {
        format!("{}.beta", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore) -> Result<()> {
        store.insert(self.gamma(), Tensor::ones(&[self.dim]))?;
        store.insert(self.beta(), Tensor::zeros(&[self.dim]))?;
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding, x: Var) -> Result<Var> {
        let gamma = b.var(&self.gamma())?;
        let beta = b.var(&self.beta())?;
        Ok(g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)?)
    }
}

/// Two linear layers with a rectifier between them.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    prefix: String,
    dim: usize,
    hidden: usize,
}

impl FeedForward {
    pub fn new(prefix: impl Into<String>, dim: usize, hidden: usize) -> Self {
        Self {
            prefix: prefix.into(),
            dim,
            hidden,
        }
    }

    pub fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let (d, h) = (self.dim, self.hidden);
        store.insert(self.name("w1"), fan_in_uniform(&[d, h], d, rng))?;
        store.insert(self.name("b1"), fan_in_uniform(&[h], d, rng))?;
        store.insert(self.name("w2"), fan_in_uniform(&[h, d], h, rng))?;
        store.insert(self.name("b2"), fan_in_uniform(&[d], h, rng))?;
        Ok(())
    }

    /// Names of the tensors feeding the residual branch output.
    pub fn output_names(&self) -> [String; 2] {
        [self.name("w2"), self.name("b2")]
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding, x: Var) -> Result<Var> {
        let h = g.linear(x, b.var(&self.name("w1"))?, b.var(&self.name("b1"))?)?;
        let h = g.relu(h);
        Ok(g.linear(h, b.var(&self.name("w2"))?, b.var(&self.name("b2"))?)?)
    }
}

/// `norm(x + branch)`.
pub fn residual_norm(
    g: &mut Graph,
    b: &Binding,
    norm: &LayerNorm,
    x: Var,
    branch: Var,
) -> Result<Var> {
    let s = g.add(x, branch)?;
    norm.forward(g, b, s)
}
