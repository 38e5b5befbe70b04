//! Spatial-temporal fusion transformer.
//!
//! The encoder runs self ICSA over the three neighboring frames stacked along
//! time; the decoder enhances the current frame with its own ICSA, then
//! retrieves from the encoded volume with a cross ICSA (current frame as
//! query, encoded volume as key and value). Every attention and FFN sublayer
//! is wrapped as `norm(x + sublayer(x))`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{BlockPartition, Icsa, VolumeShape, VolumeVar};
use crate::layers::{residual_norm, FeedForward, LayerNorm};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{Binding, ParamStore};
use crate::{Error, Result};

pub const STF_PREFIX: &str = "stf.";

/// Number of frames in the fusion window.
pub const WINDOW: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StfConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub partition: BlockPartition,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub height: usize,
    pub width: usize,
}

impl StfConfig {
    /// One encoder and one decoder layer, `d_ff = 2d`, 2×2 blocks.
    pub fn new(dim: usize, heads: usize, height: usize, width: usize) -> Self {
        Self {
            dim,
            heads,
            ffn_dim: 2 * dim,
            partition: BlockPartition::default(),
            encoder_layers: 1,
            decoder_layers: 1,
            height,
            width,
        }
    }

    pub fn frame_shape(&self) -> VolumeShape {
        VolumeShape::new(self.dim, 1, self.height, self.width)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct EncoderLayer {
    attn: Icsa,
    ffn: FeedForward,
    norm1: LayerNorm,
    norm2: LayerNorm,
}

#[derive(Clone, Debug, PartialEq)]
struct DecoderLayer {
    self_attn: Icsa,
    cross_attn: Icsa,
    ffn: FeedForward,
    norm1: LayerNorm,
    norm2: LayerNorm,
    norm3: LayerNorm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stf {
    config: StfConfig,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
}

impl Stf {
    pub fn new(config: StfConfig) -> Result<Self> {
        if config.ffn_dim < config.dim {
            return Err(Error::Config(format!(
                "ffn dim {} must be at least the feature dim {}",
                config.ffn_dim, config.dim
            )));
        }
        if config.encoder_layers == 0 || config.decoder_layers == 0 {
            return Err(Error::Config(
                "need at least one encoder and one decoder layer".into(),
            ));
        }
        let frame = config.frame_shape();
        let volume = frame.with_t(WINDOW);
        let (d, h, p) = (config.dim, config.heads, config.partition);
        let encoder = (0..config.encoder_layers)
            .map(|i| {
                let pre = format!("stf.enc{i}");
                Ok(EncoderLayer {
                    attn: Icsa::new(format!("{pre}.attn"), h, p, volume, volume)?,
                    ffn: FeedForward::new(format!("{pre}.ffn"), d, config.ffn_dim),
                    norm1: LayerNorm::new(format!("{pre}.norm1"), d),
                    norm2: LayerNorm::new(format!("{pre}.norm2"), d),
                })
            })
            .collect::<Result<_>>()?;
        let decoder = (0..config.decoder_layers)
            .map(|i| {
                let pre = format!("stf.dec{i}");
                Ok(DecoderLayer {
                    self_attn: Icsa::new(format!("{pre}.self"), h, p, frame, frame)?,
                    cross_attn: Icsa::new(format!("{pre}.cross"), h, p, frame, volume)?,
                    ffn: FeedForward::new(format!("{pre}.ffn"), d, config.ffn_dim),
                    norm1: LayerNorm::new(format!("{pre}.norm1"), d),
                    norm2: LayerNorm::new(format!("{pre}.norm2"), d),
                    norm3: LayerNorm::new(format!("{pre}.norm3"), d),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &StfConfig {
        &self.config
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        for l in &self.encoder {
            l.attn.init(store, rng)?;
            l.ffn.init(store, rng)?;
            l.norm1.init(store)?;
            l.norm2.init(store)?;
        }
        for l in &self.decoder {
            l.self_attn.init(store, rng)?;
            l.cross_attn.init(store, rng)?;
            l.ffn.init(store, rng)?;
            l.norm1.init(store)?;
            l.norm2.init(store)?;
            l.norm3.init(store)?;
        }
        Ok(())
    }

    /// Names of the tensors producing each residual branch's output: the
    /// short-range output projection of every ICSA and the second FFN layer.
    pub fn residual_branch_outputs(&self) -> Vec<String> {
        let icsa_out = |a: &Icsa| [a.short().weight_name("o"), a.short().bias_name("o")];
        let mut names = Vec::new();
        for l in &self.encoder {
            names.extend(icsa_out(&l.attn));
            names.extend(l.ffn.output_names());
        }
        for l in &self.decoder {
            names.extend(icsa_out(&l.self_attn));
            names.extend(icsa_out(&l.cross_attn));
            names.extend(l.ffn.output_names());
        }
        names
    }

    fn check_frame(&self, g: &Graph, f: Var) -> Result<()> {
        let expected = self.config.frame_shape().matrix_shape();
        if g.shape(f) != expected {
            return Err(Error::Shape {
                what: "stf frame feature",
                expected: expected.to_vec(),
                found: g.shape(f).to_vec(),
            });
        }
        Ok(())
    }

    /// Encodes the stacked `[prev, cur, next]` frames, each `[H·W, d]`.
    pub fn encode(
        &self,
        g: &mut Graph,
        b: &Binding,
        prev: Var,
        cur: Var,
        next: Var,
    ) -> Result<VolumeVar> {
        for f in [prev, cur, next] {
            self.check_frame(g, f)?;
        }
        let stacked = g.concat(&[prev, cur, next])?;
        let mut x = VolumeVar::new(g, stacked, self.config.frame_shape().with_t(WINDOW))?;
        for l in &self.encoder {
            let a = l.attn.forward(g, b, x, x)?;
            let y = residual_norm(g, b, &l.norm1, x.var, a.var)?;
            let f = l.ffn.forward(g, b, y)?;
            let y = residual_norm(g, b, &l.norm2, y, f)?;
            x = VolumeVar::new(g, y, x.shape)?;
        }
        Ok(x)
    }

    /// Retrieves the current frame `[H·W, d]` from the encoded volume.
    pub fn decode(&self, g: &mut Graph, b: &Binding, cur: Var, encoded: VolumeVar) -> Result<Var> {
        self.check_frame(g, cur)?;
        let frame = self.config.frame_shape();
        if encoded.shape != frame.with_t(WINDOW) {
            return Err(Error::Shape {
                what: "encoded volume",
                expected: frame.with_t(WINDOW).matrix_shape().to_vec(),
                found: encoded.shape.matrix_shape().to_vec(),
            });
        }
        let mut x = cur;
        for l in &self.decoder {
            let q = VolumeVar::new(g, x, frame)?;
            let a = l.self_attn.forward(g, b, q, q)?;
            let y = residual_norm(g, b, &l.norm1, x, a.var)?;
            let q = VolumeVar::new(g, y, frame)?;
            let c = l.cross_attn.forward(g, b, q, encoded)?;
            let y = residual_norm(g, b, &l.norm2, y, c.var)?;
            let f = l.ffn.forward(g, b, y)?;
            x = residual_norm(g, b, &l.norm3, y, f)?;
        }
        Ok(x)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Binding,
        prev: Var,
        cur: Var,
        next: Var,
    ) -> Result<Var> {
        let enc = self.encode(g, b, prev, cur, next)?;
        self.decode(g, b, cur, enc)
    }

    /// Tape-free convenience wrapper over [`Stf::forward`].
    pub fn infer(
        &self,
        store: &ParamStore,
        prev: &Tensor,
        cur: &Tensor,
        next: &Tensor,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = Binding::frozen(&mut g, store);
        let (p, c, n) = (
            g.constant(prev.clone()),
            g.constant(cur.clone()),
            g.constant(next.clone()),
        );
        let out = self.forward(&mut g, &b, p, c, n)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use crate::rng;

    fn setup(cfg: StfConfig, seed: u64) -> (Stf, ParamStore) {
        let stf = Stf::new(cfg).unwrap();
        let mut store = ParamStore::new();
        stf.init(&mut store, &mut rng::stream(seed, "stf")).unwrap();
        (stf, store)
    }

    fn frames(cfg: &StfConfig, seed: u64) -> [Tensor; 3] {
        let mut r = rng::stream(seed, "frames");
        let shape = cfg.frame_shape().matrix_shape();
        [0, 1, 2].map(|_| Tensor::uniform(&shape, 1.0, &mut r))
    }

    #[test]
    fn output_has_frame_shape() {
        let cfg = StfConfig::new(8, 2, 4, 6);
        let (stf, store) = setup(cfg, 0);
        let [p, c, n] = frames(&cfg, 0);
        let out = stf.infer(&store, &p, &c, &n).unwrap();
        assert_eq!(out.shape(), &[24, 8]);

        let mut g = Graph::new();
        let b = Binding::frozen(&mut g, &store);
        let (p, c, n) = (g.constant(p), g.constant(c), g.constant(n));
        let enc = stf.encode(&mut g, &b, p, c, n).unwrap();
        assert_eq!(enc.shape, VolumeShape::new(8, 3, 4, 6));
    }

    #[test]
    fn rejects_mismatched_frames() {
        let cfg = StfConfig::new(4, 1, 4, 4);
        let (stf, store) = setup(cfg, 0);
        let [p, c, _] = frames(&cfg, 0);
        assert!(stf.infer(&store, &p, &c, &Tensor::zeros(&[8, 4])).is_err());
        let mut bad = cfg;
        bad.ffn_dim = 2;
        assert!(Stf::new(bad).is_err());
    }

    #[test]
    fn identical_frames_encode_identically_along_time() {
        let cfg = StfConfig::new(4, 2, 4, 4);
        let (stf, mut store) = setup(cfg, 1);
        // Positional encodings that vary over space but not time.
        let mut r = rng::stream(1, "pe");
        let pe_frame = Tensor::uniform(&[16, 4], 0.5, &mut r);
        let pe_volume = Tensor::concat(&[&pe_frame, &pe_frame, &pe_frame]).unwrap();
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        for n in names
            .iter()
            .filter(|n| n.starts_with("stf.enc") && n.contains(".pe_"))
        {
            store.set(n.clone(), pe_volume.clone());
        }
        let [f, _, _] = frames(&cfg, 1);
        let mut g = Graph::new();
        let b = Binding::frozen(&mut g, &store);
        let x = g.constant(f);
        let enc = stf.encode(&mut g, &b, x, x, x).unwrap();
        let e = g.value(enc.var);
        let first = e.slice_rows(0, 16).unwrap();
        for t in 1..3 {
            assert!(
                e.slice_rows(16 * t, 16 * (t + 1))
                    .unwrap()
                    .max_abs_diff(&first)
                    < 1e-12
            );
        }
    }

    #[test]
    fn same_seed_gives_bit_identical_output() {
        let cfg = StfConfig::new(8, 2, 4, 4);
        let run = || {
            let (stf, store) = setup(cfg, 7);
            let [p, c, n] = frames(&cfg, 7);
            stf.infer(&store, &p, &c, &n).unwrap()
        };
        assert_eq!(run().data(), run().data());
    }

    #[test]
    fn norm_sites_are_standardized() {
        let cfg = StfConfig::new(8, 2, 4, 4);
        let (stf, store) = setup(cfg, 3);
        let [p, c, n] = frames(&cfg, 3);
        // gamma = 1, beta = 0 at init, so the output is the pre-affine value.
        let out = stf.infer(&store, &p, &c, &n).unwrap();
        for r in 0..out.rows() {
            let row = out.row(r);
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-3, "var {var}");
        }
    }

    #[test]
    fn zeroed_residual_branches_reduce_to_normalized_identity() {
        let cfg = StfConfig::new(4, 2, 4, 4);
        let (stf, mut store) = setup(cfg, 4);
        for name in stf.residual_branch_outputs() {
            let shape = store.get(&name).unwrap().shape().to_vec();
            store.set(name, Tensor::zeros(&shape));
        }
        let [p, c, n] = frames(&cfg, 4);
        let out = stf.infer(&store, &p, &c, &n).unwrap();
        // Three normalizations of the current frame in sequence.
        let mut g = Graph::new();
        let x = g.constant(c);
        let one = g.constant(Tensor::ones(&[4]));
        let zero = g.constant(Tensor::zeros(&[4]));
        let mut y = x;
        for _ in 0..3 {
            y = g
                .layer_norm(y, one, zero, crate::layers::LAYER_NORM_EPS)
                .unwrap();
        }
        assert!(out.max_abs_diff(g.value(y)) < 1e-12);
    }

    #[test]
    fn gradients_reach_current_frame_and_encoding() {
        let cfg = StfConfig::new(4, 2, 4, 4);
        let (stf, store) = setup(cfg, 5);
        let [p, c, n] = frames(&cfg, 5);
        let mut g = Graph::new();
        let b = Binding::frozen(&mut g, &store);
        let enc_in = Tensor::concat(&[&p, &c, &n]).unwrap();
        let cur = g.leaf(c);
        let enc_var = g.leaf(enc_in);
        let enc = VolumeVar::new(&g, enc_var, cfg.frame_shape().with_t(3)).unwrap();
        let out = stf.decode(&mut g, &b, cur, enc).unwrap();
        let probe = g.constant(Tensor::uniform(&[64, 1], 1.0, &mut rng::stream(5, "probe")));
        let flat = g.reshape(out, &[1, 64]).unwrap();
        let m = g.matmul(flat, probe).unwrap();
        let loss = g.sum(m);
        let grads = g.backward(loss).unwrap();
        for v in [cur, enc_var] {
            let gr = grads.get(v).expect("gradient reached input");
            assert!(gr.data().iter().any(|x| x.abs() > 1e-8));
        }
    }

    #[test]
    fn end_to_end_gradcheck() {
        let cfg = StfConfig::new(4, 2, 4, 4);
        for seed in 0..3 {
            let (stf, store) = setup(cfg, 100 + seed);
            let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
            let mut inputs = frames(&cfg, seed).to_vec();
            let mut r = rng::stream(seed, "pe");
            for n in &names {
                let t = store.get(n).unwrap();
                // Nonzero encodings so their gradients are exercised too.
                inputs.push(if n.contains(".pe_") {
                    Tensor::uniform(t.shape(), 0.3, &mut r)
                } else {
                    t.clone()
                });
            }
            let probe = Tensor::uniform(&[16, 4], 1.0, &mut r);
            let err = grad_check(
                |g, x| {
                    let b = Binding::from_vars(names.iter().cloned().zip(x[3..].iter().copied()));
                    let out = stf.forward(g, &b, x[0], x[1], x[2])?;
                    let pr = g.constant(probe.clone());
                    let d = g.sub(out, pr)?;
                    let t = g.transpose(d)?;
                    let m = g.matmul(t, d)?;
                    Ok::<_, crate::Error>(g.sum(m))
                },
                &inputs,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }
}
