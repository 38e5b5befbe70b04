use rand::Rng;

use super::MemoryBank;
use crate::layers::{residual_norm, FeedForward, LayerNorm};
use crate::numerics::{matmul, softmax_in_place, Graph, Tensor, Var};
use crate::params::{fan_in_uniform, Binding, ParamStore};
use crate::{Error, Result};

pub const MAR_PREFIX: &str = "mar.";

/// Refinement block: attention of each pixel feature over the memory keys,
/// reading out class prototypes, followed by residual norm and an FFN.
#[derive(Clone, Debug, PartialEq)]
pub struct Mar {
    dim: usize,
    ffn: FeedForward,
    norm1: LayerNorm,
    norm2: LayerNorm,
}

impl Mar {
    pub fn new(dim: usize, ffn_dim: usize) -> Result<Self> {
        if dim == 0 || ffn_dim == 0 {
            return Err(Error::Config("refinement dims must be positive".into()));
        }
        Ok(Self {
            dim,
            ffn: FeedForward::new("mar.ffn", dim, ffn_dim),
            norm1: LayerNorm::new("mar.norm1", dim),
            norm2: LayerNorm::new("mar.norm2", dim),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn theta_name(&self) -> &'static str {
        "mar.w_theta"
    }

    pub fn phi_name(&self) -> &'static str {
        "mar.w_phi"
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let d = self.dim;
        store.insert(self.theta_name(), fan_in_uniform(&[d, d], d, rng))?;
        store.insert(self.phi_name(), fan_in_uniform(&[d, d], d, rng))?;
        self.ffn.init(store, rng)?;
        self.norm1.init(store)?;
        self.norm2.init(store)?;
        Ok(())
    }

    /// Names of the tensors producing each residual branch's output.
    pub fn residual_branch_outputs(&self) -> Vec<String> {
        self.ffn.output_names().into()
    }

    fn check(&self, g: &Graph, q: Var, bank: &MemoryBank) -> Result<()> {
        let s = g.shape(q);
        if s.len() != 2 || s[1] != self.dim || bank.dim() != self.dim {
            return Err(Error::Shape {
                what: "refinement query vs memory",
                expected: vec![s.first().copied().unwrap_or(0), self.dim],
                found: vec![
                    s.first().copied().unwrap_or(0),
                    s.last().copied().unwrap_or(0),
                    bank.dim(),
                ],
            });
        }
        Ok(())
    }

    /// Attention weights `[n, C·K_L]` of the queries `[n, d]` over the keys.
    pub fn scores(&self, g: &mut Graph, b: &Binding, q: Var, bank: &MemoryBank) -> Result<Var> {
        self.check(g, q, bank)?;
        let keys = g.constant(bank.keys().clone());
        let qt = g.matmul(q, b.var(self.theta_name())?)?;
        let kt = g.matmul(keys, b.var(self.phi_name())?)?;
        let kt = g.transpose(kt)?;
        let logits = g.matmul(qt, kt)?;
        Ok(g.softmax(logits, 1)?)
    }

    /// Reads the prototypes out with the given weights, `[n, d]`.
    pub fn attend(&self, g: &mut Graph, weights: Var, bank: &MemoryBank) -> Result<Var> {
        let values = g.constant(bank.values_by_key());
        Ok(g.matmul(weights, values)?)
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding, q: Var, bank: &MemoryBank) -> Result<Var> {
        let s = self.scores(g, b, q, bank)?;
        let read = self.attend(g, s, bank)?;
        let x = residual_norm(g, b, &self.norm1, q, read)?;
        let f = self.ffn.forward(g, b, x)?;
        residual_norm(g, b, &self.norm2, x, f)
    }

    /// Tape-free convenience wrapper over [`Mar::forward`].
    pub fn infer(&self, store: &ParamStore, q: &Tensor, bank: &MemoryBank) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = Binding::frozen(&mut g, store);
        let q = g.constant(q.clone());
        let out = self.forward(&mut g, &b, q, bank)?;
        Ok(g.value(out).clone())
    }
}

/// `softmax((q W_θ)(K W_φ)ᵀ)` row by row, without scaling.
pub fn mar_scores(q: &Tensor, keys: &Tensor, w_theta: &Tensor, w_phi: &Tensor) -> Result<Tensor> {
    let qt = matmul(q, w_theta)?;
    let kt = matmul(keys, w_phi)?;
    let kt_t = kt.permute(&[1, 0])?;
    let mut s = matmul(&qt, &kt_t)?;
    let m = s.last_dim();
    for row in s.data_mut().chunks_mut(m) {
        softmax_in_place(row);
    }
    Ok(s)
}

/// Weighted sum of each key's class prototype.
pub fn mar_attend(scores: &Tensor, bank: &MemoryBank) -> Result<Tensor> {
    Ok(matmul(scores, &bank.values_by_key())?)
}
