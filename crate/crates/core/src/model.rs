//! The full recognizer: frame encoder → MST blocks → temporal encoder, with
//! a classifier on every gloss level.

use crate::config::{EncoderKind, ModelConfig};
use crate::ctc::{multi_level_ctc, GlossSequence, LevelLogits, LevelLoss};
use crate::error::{Error, Result};
use crate::frame_encoder::{FeatureSequence, FrameEncoder};
use crate::mst::MstStack;
use crate::nn::Linear;
use crate::params::{BoundParams, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Graph, Var};
use crate::transformer::TransformerEncoder;

const INIT_TAG: u64 = 0x494e_4954;

/// One gloss level on a graph.
#[derive(Clone, Copy, Debug)]
pub struct LevelOutput {
    pub features: Var,
    pub logits: Var,
    /// Frames at this level that cover real (unpadded) input.
    pub valid_len: usize,
}

/// Value and parameter gradients of the multi-level loss for one sample.
#[derive(Clone, Debug)]
pub struct LossAndGrads {
    pub loss: f64,
    /// `(level, loss)` for each retained level.
    pub per_level: Vec<(usize, f64)>,
    /// In parameter-store order.
    pub grads: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub frame_encoder: FrameEncoder,
    pub mst: MstStack,
    pub encoder: Option<TransformerEncoder>,
    /// One per level, or a single shared head.
    pub classifiers: Vec<Linear>,
}

/// Valid frame counts at every level for `valid_len` real input frames.
pub fn level_valid_lengths(cfg: &ModelConfig, valid_len: usize) -> Vec<usize> {
    let mut v = valid_len;
    let mut out = vec![v];
    for _ in 0..cfg.num_mst_blocks {
        v = v.div_ceil(2);
        out.push(v);
    }
    out.push(v);
    out
}

impl Network {
    /// Builds the network with freshly initialized parameters drawn from
    /// `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed).derive(INIT_TAG);
        let mut params = ParamStore::new();
        let frame_encoder = FrameEncoder::new(&config, &mut params, &mut rng);
        let mst = MstStack::new(&config, &mut params, &mut rng)?;
        let encoder = match config.encoder {
            EncoderKind::Transformer => Some(TransformerEncoder::new(&config, &mut params, &mut rng)?),
            EncoderKind::None => None,
            EncoderKind::BiLstm => return Err(Error::Config("encoder `bilstm` is not implemented".into())),
        };
        let heads = if config.shared_classifier { 1 } else { config.num_levels() };
        let classifiers = (0..heads)
            .map(|i| Linear::new(&mut params, &format!("cls{i}"), config.c2, config.vocab_size + 1, &mut rng))
            .collect();
        Ok(Self {
            config,
            params,
            frame_encoder,
            mst,
            encoder,
            classifiers,
        })
    }

    /// Rebuilds the layer structure for `config` and installs `params`,
    /// which must match it name for name and shape for shape.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut net = Self::new(config)?;
        if net.params.len() != params.len() {
            return Err(Error::Data(format!(
                "parameter count {} does not match the configured network ({})",
                params.len(),
                net.params.len()
            )));
        }
        for ((_, n1, t1), (_, n2, t2)) in net.params.iter().zip(params.iter()) {
            if n1 != n2 || t1.shape() != t2.shape() {
                return Err(Error::Data(format!(
                    "parameter `{n2}` {:?} does not match expected `{n1}` {:?}",
                    t2.shape(),
                    t1.shape()
                )));
            }
        }
        net.params = params;
        Ok(net)
    }

    /// Re-pads a sequence whose length is not a multiple of the network's
    /// downsampling factor.
    pub fn prepare(&self, seq: &FeatureSequence) -> Result<FeatureSequence> {
        let m = self.config.time_multiple();
        if seq.len().is_multiple_of(m) && !seq.is_empty() {
            return Ok(seq.clone());
        }
        FeatureSequence::padded(&seq.valid_rows(), seq.d_in(), m, seq.sample_id)
    }

    /// Forward pass through every level.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        seq: &FeatureSequence,
        stopped: Option<Vec<bool>>,
    ) -> Result<Vec<LevelOutput>> {
        let m = self.config.time_multiple();
        if !seq.len().is_multiple_of(m) {
            return Err(Error::Data(format!(
                "sequence length {} is not a multiple of {m}",
                seq.len()
            )));
        }
        let frames = g.constant(seq.frames.clone());
        let level1 = self.frame_encoder.encode_frames(g, p, frames, stopped)?.level1;
        let mut features = vec![level1];
        features.extend(self.mst.forward(g, p, level1)?.levels);
        let last = *features.last().expect("at least one level");
        features.push(match &self.encoder {
            Some(enc) => enc.encode(g, p, last)?,
            None => last,
        });
        let valid = level_valid_lengths(&self.config, seq.valid_len);
        features
            .into_iter()
            .zip(valid)
            .enumerate()
            .map(|(i, (f, valid_len))| {
                let head = &self.classifiers[i.min(self.classifiers.len() - 1)];
                Ok(LevelOutput {
                    features: f,
                    logits: head.forward(g, p, f)?,
                    valid_len,
                })
            })
            .collect()
    }

    /// Logits of every level, without gradient tracking.
    pub fn level_logits(&self, seq: &FeatureSequence) -> Result<Vec<LevelLogits>> {
        let seq = self.prepare(seq)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let levels = self.forward(&mut g, &p, &seq, None)?;
        Ok(levels
            .iter()
            .map(|l| LevelLogits::new(g.value(l.logits).clone(), l.valid_len))
            .collect())
    }

    /// Logits of the last level, the one used for decoding.
    pub fn decode_logits(&self, seq: &FeatureSequence) -> Result<LevelLogits> {
        Ok(self.level_logits(seq)?.pop().expect("at least one level"))
    }

    /// Multi-level CTC loss over the retained levels and its gradient with
    /// respect to every parameter.
    pub fn loss_and_grads(
        &self,
        seq: &FeatureSequence,
        target: &GlossSequence,
        stopped: Option<Vec<bool>>,
    ) -> Result<LossAndGrads> {
        let seq = self.prepare(seq)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let levels = self.forward(&mut g, &p, &seq, stopped)?;
        let inputs: Vec<LevelLoss> = levels
            .iter()
            .map(|l| LevelLoss {
                logits: l.logits,
                valid_len: l.valid_len,
            })
            .collect();
        let loss = multi_level_ctc(&mut g, &inputs, target, self.config.ctc_levels)?;
        let value = g.value(loss.total).data()[0];
        let per_level = loss
            .per_level
            .iter()
            .map(|&(lvl, v)| (lvl, g.value(v).data()[0]))
            .collect();
        let grads = g.backward(loss.total)?;
        Ok(LossAndGrads {
            loss: value,
            per_level,
            grads: p.collect_grads(&self.params, &grads),
        })
    }

    /// Loss value only.
    pub fn loss(&self, seq: &FeatureSequence, target: &GlossSequence) -> Result<f64> {
        let seq = self.prepare(seq)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let levels = self.forward(&mut g, &p, &seq, None)?;
        let inputs: Vec<LevelLoss> = levels
            .iter()
            .map(|l| LevelLoss {
                logits: l.logits,
                valid_len: l.valid_len,
            })
            .collect();
        let loss = multi_level_ctc(&mut g, &inputs, target, self.config.ctc_levels)?;
        Ok(g.value(loss.total).data()[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_lengths_halve_per_block() {
        let cfg = ModelConfig::default();
        assert_eq!(level_valid_lengths(&cfg, 32), vec![32, 16, 8, 8]);
        assert_eq!(level_valid_lengths(&cfg, 29), vec![29, 15, 8, 8]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Network::new(ModelConfig::default()).unwrap();
        let b = Network::new(ModelConfig::default()).unwrap();
        assert_eq!(a.params, b.params);
        let c = Network::new(ModelConfig {
            seed: 1,
            ..ModelConfig::default()
        })
        .unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn bilstm_is_a_config_error() {
        let cfg = ModelConfig {
            encoder: EncoderKind::BiLstm,
            ..ModelConfig::default()
        };
        assert!(matches!(Network::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn from_params_rejects_mismatched_store() {
        let a = Network::new(ModelConfig::default()).unwrap();
        let other = Network::new(ModelConfig {
            num_scales: 3,
            ..ModelConfig::default()
        })
        .unwrap();
        assert!(Network::from_params(ModelConfig::default(), other.params).is_err());
        assert!(Network::from_params(ModelConfig::default(), a.params).is_ok());
    }
}
