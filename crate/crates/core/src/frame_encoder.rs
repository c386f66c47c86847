//! Frame-wise features: a linear+ReLU frame embedder followed by the fully
//! connected stack that produces first-level gloss features.

use crate::config::ModelConfig;
use crate::error::{Error, Result, TensorError};
use crate::nn::Linear;
use crate::params::{BoundParams, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

/// Time-major frame matrix of one video, zero-padded at the end to a
/// multiple of the pipeline's downsampling factor.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    /// `T×D_in`, `T` a multiple of the downsampling factor.
    pub frames: Tensor,
    /// Number of real frames before padding.
    pub valid_len: usize,
    pub sample_id: u64,
}

impl FeatureSequence {
    /// Pads `rows` (each of length `d_in`) with zero frames up to the next
    /// multiple of `multiple`, and to at least `multiple` frames.
    pub fn padded(rows: &[Vec<f64>], d_in: usize, multiple: usize, sample_id: u64) -> Result<Self> {
        if rows.iter().any(|r| r.len() != d_in) {
            return Err(Error::Data(format!("sample {sample_id}: frame width differs from {d_in}")));
        }
        let valid_len = rows.len();
        let padded_len = valid_len.max(1).div_ceil(multiple) * multiple;
        let mut data = Vec::with_capacity(padded_len * d_in);
        for r in rows {
            data.extend_from_slice(r);
        }
        data.resize(padded_len * d_in, 0.0);
        Ok(Self {
            frames: Tensor::new(vec![padded_len, d_in], data)?,
            valid_len,
            sample_id,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.valid_len == 0
    }

    pub fn d_in(&self) -> usize {
        self.frames.cols()
    }

    /// The real (unpadded) frames as rows.
    pub fn valid_rows(&self) -> Vec<Vec<f64>> {
        (0..self.valid_len).map(|r| self.frames.row(r).to_vec()).collect()
    }
}

/// First-level gloss features on a graph.
#[derive(Clone, Copy, Debug)]
pub struct FrameFeatures {
    /// `T×c2`.
    pub level1: Var,
}

#[derive(Clone, Debug)]
pub struct FrameEncoder {
    pub embed: Linear,
    pub fc: Vec<Linear>,
    d_in: usize,
}

impl FrameEncoder {
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut Rng) -> Self {
        let embed = Linear::new(store, "embed", cfg.d_in, cfg.c1, rng);
        let fc = (0..cfg.fc_layers)
            .map(|i| {
                let c_in = if i == 0 { cfg.c1 } else { cfg.c2 };
                Linear::new(store, &format!("fc{i}"), c_in, cfg.c2, rng)
            })
            .collect();
        Self {
            embed,
            fc,
            d_in: cfg.d_in,
        }
    }

    /// Embeds frames, optionally blocks gradient flow for some frames, then
    /// runs the FC stack (ReLU between layers, none after the last).
    pub fn encode_frames(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        frames: Var,
        stopped: Option<Vec<bool>>,
    ) -> Result<FrameFeatures> {
        let d = g.shape(frames)[1];
        if d != self.d_in {
            return Err(Error::Data(format!(
                "frame width {d} does not match configured d_in {}",
                self.d_in
            )));
        }
        let mut x = self.embed.forward(g, p, frames)?;
        x = g.relu(x)?;
        if let Some(mask) = stopped {
            x = g.grad_stop_rows(x, mask)?;
        }
        for (i, layer) in self.fc.iter().enumerate() {
            if i > 0 {
                x = g.relu(x)?;
            }
            x = layer.forward(g, p, x)?;
        }
        Ok(FrameFeatures { level1: x })
    }
}

/// Per-frame gradient-stop decisions: each frame is stopped independently
/// with probability `p` while training, never at inference.
pub fn gradient_stop_mask(frames: usize, p: f64, rng: &mut Rng, training: bool) -> Option<Vec<bool>> {
    if !training || p <= 0.0 {
        return None;
    }
    Some((0..frames).map(|_| rng.bernoulli(p)).collect())
}

/// Applies stochastic gradient stopping to embedded frames `x` (`T×c1`).
/// Forward values are untouched.
pub fn stochastic_gradient_stop(
    g: &mut Graph,
    x: Var,
    p: f64,
    rng: &mut Rng,
    training: bool,
) -> Result<Var, TensorError> {
    match gradient_stop_mask(g.shape(x)[0], p, rng, training) {
        Some(mask) => g.grad_stop_rows(x, mask),
        None => Ok(x),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(fc_layers: usize) -> ModelConfig {
        ModelConfig {
            d_in: 8,
            c1: if fc_layers == 0 { 64 } else { 32 },
            c2: 64,
            fc_layers,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn shape_chain_for_every_fc_depth() {
        for fc in 0..=3 {
            let c = cfg(fc);
            c.validate().unwrap();
            let mut store = ParamStore::new();
            let enc = FrameEncoder::new(&c, &mut store, &mut Rng::new(0));
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let x = g.constant(Tensor::filled(&[16, 8], 0.3));
            let out = enc.encode_frames(&mut g, &p, x, None).unwrap();
            assert_eq!(g.shape(out.level1), &[16, 64], "fc_layers = {fc}");
        }
    }

    #[test]
    fn zero_frames_and_zero_biases_give_zero_features() {
        let c = cfg(2);
        let mut store = ParamStore::new();
        let enc = FrameEncoder::new(&c, &mut store, &mut Rng::new(1));
        for (_, name, _) in store.clone().iter() {
            if name.ends_with(".bias") {
                let id = store.find(name).unwrap();
                store.get_mut(id).data_mut().fill(0.0);
            }
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[16, 8]));
        let out = enc.encode_frames(&mut g, &p, x, None).unwrap();
        assert!(g.value(out.level1).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_frame_width_is_rejected() {
        let c = cfg(2);
        let mut store = ParamStore::new();
        let enc = FrameEncoder::new(&c, &mut store, &mut Rng::new(0));
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[16, 9]));
        assert!(matches!(enc.encode_frames(&mut g, &p, x, None), Err(Error::Data(_))));
    }

    fn embed_grad_norm(p_stop: f64, seed: u64) -> (Vec<f64>, f64) {
        let c = cfg(2);
        let mut store = ParamStore::new();
        let enc = FrameEncoder::new(&c, &mut store, &mut Rng::new(5));
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let mut data_rng = Rng::new(11);
        let x = g.constant(
            Tensor::new(vec![16, 8], (0..128).map(|_| data_rng.normal()).collect()).unwrap(),
        );
        let mask = gradient_stop_mask(16, p_stop, &mut Rng::new(seed), true);
        let out = enc.encode_frames(&mut g, &p, x, mask).unwrap();
        let loss = g.sum(out.level1).unwrap();
        let value = g.value(loss).data()[0];
        let grads = g.backward(loss).unwrap();
        (grads.get_or_zeros(p.var(enc.embed.weight), 8 * 32), value)
    }

    #[test]
    fn stop_probability_zero_matches_plain_pass() {
        let (with_stop, v1) = embed_grad_norm(0.0, 3);
        let c = cfg(2);
        let mut store = ParamStore::new();
        let enc = FrameEncoder::new(&c, &mut store, &mut Rng::new(5));
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let mut data_rng = Rng::new(11);
        let x = g.constant(
            Tensor::new(vec![16, 8], (0..128).map(|_| data_rng.normal()).collect()).unwrap(),
        );
        let out = enc.encode_frames(&mut g, &p, x, None).unwrap();
        let loss = g.sum(out.level1).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(with_stop, grads.get(p.var(enc.embed.weight)).unwrap());
        assert_eq!(v1, g.value(loss).data()[0]);
    }

    #[test]
    fn stop_probability_one_zeroes_embedder_grads_without_changing_values() {
        let (grad, v_stopped) = embed_grad_norm(1.0, 3);
        let (_, v_plain) = embed_grad_norm(0.0, 3);
        assert!(grad.iter().all(|&v| v == 0.0));
        assert_eq!(v_stopped.to_bits(), v_plain.to_bits());
    }

    #[test]
    fn half_stop_rate_concentrates() {
        let mask = gradient_stop_mask(1000, 0.5, &mut Rng::new(42), true).unwrap();
        let frac = mask.iter().filter(|&&s| s).count() as f64 / 1000.0;
        assert!((0.45..=0.55).contains(&frac), "{frac}");
        assert!(gradient_stop_mask(1000, 0.5, &mut Rng::new(42), false).is_none());
    }

    #[test]
    fn padding_rounds_up_to_multiple() {
        let rows = vec![vec![1.0, 2.0]; 5];
        let s = FeatureSequence::padded(&rows, 2, 4, 0).unwrap();
        assert_eq!(s.len(), 8);
        assert_eq!(s.valid_len, 5);
        assert_eq!(s.frames.row(7), &[0.0, 0.0]);
        let s = FeatureSequence::padded(&rows[..1], 2, 4, 0).unwrap();
        assert_eq!(s.len(), 4);
    }
}
