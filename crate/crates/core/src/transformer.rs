//! Post-norm transformer encoder over third-level gloss features.

use crate::config::ModelConfig;
use crate::error::{Error, Result, TensorError};
use crate::nn::{LayerNorm, Linear};
use crate::params::{BoundParams, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

/// Sinusoidal table of shape `len×dim`: even columns `sin(pos/10000^(2i/dim))`,
/// odd columns the matching cosine.
pub fn positional_encoding(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for j in 0..dim {
            let i = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / dim as f64);
            data[pos * dim + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, dim], data).expect("positive shape")
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
}

/// Output of [`EncoderLayer::mhsa`]: the projected result and, per head, the
/// `T×T` attention weights.
pub struct Attention {
    pub output: Var,
    pub weights: Vec<Var>,
}

impl EncoderLayer {
    fn new(name: &str, c: usize, ff_mult: usize, store: &mut ParamStore, rng: &mut Rng) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.attn.q"), c, c, rng),
            k: Linear::new(store, &format!("{name}.attn.k"), c, c, rng),
            v: Linear::new(store, &format!("{name}.attn.v"), c, c, rng),
            o: Linear::new(store, &format!("{name}.attn.o"), c, c, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), c),
            ff1: Linear::new(store, &format!("{name}.ff1"), c, c * ff_mult, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), c * ff_mult, c, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), c),
        }
    }

    /// Multi-head scaled dot-product self-attention, unmasked.
    pub fn mhsa(&self, g: &mut Graph, p: &BoundParams, x: Var, heads: usize) -> Result<Attention, TensorError> {
        let c = g.shape(x)[1];
        if heads == 0 || !c.is_multiple_of(heads) {
            return Err(TensorError::Shape {
                op: "mhsa",
                detail: format!("{c} channels not divisible by {heads} heads"),
            });
        }
        let dh = c / heads;
        let q = self.q.forward(g, p, x)?;
        let k = self.k.forward(g, p, x)?;
        let v = self.v.forward(g, p, x)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        let mut weights = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale)?;
            let attn = g.softmax_rows(scores)?;
            outs.push(g.matmul(attn, vh)?);
            weights.push(attn);
        }
        let cat = g.concat_cols(&outs)?;
        let output = self.o.forward(g, p, cat)?;
        Ok(Attention { output, weights })
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var, heads: usize) -> Result<Var, TensorError> {
        let a = self.mhsa(g, p, x, heads)?.output;
        let x = g.add(x, a)?;
        let x = self.norm1.forward(g, p, x)?;
        let h = self.ff1.forward(g, p, x)?;
        let h = g.relu(h)?;
        let h = self.ff2.forward(g, p, h)?;
        let x = g.add(x, h)?;
        self.norm2.forward(g, p, x)
    }
}

#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    pub layers: Vec<EncoderLayer>,
    pub heads: usize,
    /// Add positional information before the first layer. Disabling it is a
    /// test hook for checking permutation equivariance.
    pub use_positional: bool,
}

impl TransformerEncoder {
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        if cfg.heads == 0 || !cfg.c2.is_multiple_of(cfg.heads) {
            return Err(Error::Config(format!(
                "c2 = {} must be divisible by heads = {}",
                cfg.c2, cfg.heads
            )));
        }
        let layers = (0..cfg.encoder_layers)
            .map(|i| EncoderLayer::new(&format!("enc{i}"), cfg.c2, cfg.ff_mult, store, rng))
            .collect();
        Ok(Self {
            layers,
            heads: cfg.heads,
            use_positional: true,
        })
    }

    /// `T2×c2` in, `T2×c2` out (fourth-level gloss features).
    pub fn encode(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var, TensorError> {
        let (t, c) = (g.shape(x)[0], g.shape(x)[1]);
        let mut x = x;
        if self.use_positional {
            let pe = g.constant(positional_encoding(t, c));
            x = g.add(x, pe)?;
        }
        for layer in &self.layers {
            x = layer.forward(g, p, x, self.heads)?;
        }
        Ok(x)
    }
}
