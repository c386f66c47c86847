//! Multi-scale temporal (MST) block.
//!
//! `n` parallel 1-D convolutions with kernel sizes 3, 5, …, 3+2(n-1) look at
//! the same `c2×T` sequence with different temporal receptive fields. Their
//! outputs are stacked along a new scale axis (`c2×n×T`) and a 2-D
//! convolution with kernel `(n, 2)` and stride `(1, 2)` fuses the scales
//! while halving the time axis. Two blocks in sequence give the second- and
//! third-level gloss features.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Graph, Var};

#[derive(Clone, Debug)]
pub struct Branch {
    pub kernel: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct MstBlock {
    pub branches: Vec<Branch>,
    pub fusion_weight: ParamId,
    pub fusion_bias: ParamId,
    pub fusion_relu: bool,
    channels: usize,
}

impl MstBlock {
    pub fn new(
        name: &str,
        channels: usize,
        num_scales: usize,
        fusion_relu: bool,
        store: &mut ParamStore,
        rng: &mut Rng,
    ) -> Result<Self> {
        if num_scales == 0 {
            return Err(Error::Config("MST block needs at least one scale".into()));
        }
        let branches = (0..num_scales)
            .map(|i| {
                let kernel = 3 + 2 * i;
                let fan_in = channels * kernel;
                Branch {
                    kernel,
                    weight: store.add_uniform(
                        format!("{name}.conv{kernel}.weight"),
                        &[channels, channels, kernel],
                        fan_in,
                        rng,
                    ),
                    bias: store.add_uniform(format!("{name}.conv{kernel}.bias"), &[channels], fan_in, rng),
                }
            })
            .collect();
        let fan_in = channels * num_scales * 2;
        let fusion_weight = store.add_uniform(
            format!("{name}.fusion.weight"),
            &[channels, channels, num_scales, 2],
            fan_in,
            rng,
        );
        let fusion_bias = store.add_uniform(format!("{name}.fusion.bias"), &[channels], fan_in, rng);
        Ok(Self {
            branches,
            fusion_weight,
            fusion_bias,
            fusion_relu,
            channels,
        })
    }

    pub fn num_scales(&self) -> usize {
        self.branches.len()
    }

    /// Branch outputs in kernel-size order, each `c2×T`, taking the
    /// channel-major input `c2×T`.
    pub fn branch_outputs(&self, g: &mut Graph, p: &BoundParams, xt: Var) -> Result<Vec<Var>> {
        self.branches
            .iter()
            .map(|b| {
                g.conv1d(xt, p.var(b.weight), p.var(b.bias), (b.kernel - 1) / 2, 1)
                    .map_err(Into::into)
            })
            .collect()
    }

    /// `T×c2` in, `T/2×c2` out.
    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        let (t, c) = (g.shape(x)[0], g.shape(x)[1]);
        if t % 2 != 0 || t < 2 {
            return Err(Error::Data(format!(
                "MST block needs an even number of frames (got {t}); pad the sequence"
            )));
        }
        if c != self.channels {
            return Err(Error::Data(format!(
                "MST block expects {} channels, got {c}",
                self.channels
            )));
        }
        let xt = g.transpose(x)?;
        let branches = self.branch_outputs(g, p, xt)?;
        let stacked = g.stack_scales(&branches)?;
        let fused = g.conv2d(stacked, p.var(self.fusion_weight), p.var(self.fusion_bias), 1, 2)?;
        let fused = g.reshape(fused, &[c, t / 2])?;
        let mut out = g.transpose(fused)?;
        if self.fusion_relu {
            out = g.relu(out)?;
        }
        Ok(out)
    }
}

/// Second- and third-level gloss features (more levels with more blocks).
#[derive(Clone, Debug)]
pub struct LevelFeatures {
    /// One entry per block, each half the length of the previous.
    pub levels: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct MstStack {
    pub blocks: Vec<MstBlock>,
}

impl MstStack {
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        let blocks = (0..cfg.num_mst_blocks)
            .map(|i| MstBlock::new(&format!("mst{i}"), cfg.c2, cfg.num_scales, cfg.fusion_relu, store, rng))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn downsample_factor(&self) -> usize {
        1 << self.blocks.len()
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, level1: Var) -> Result<LevelFeatures> {
        let t = g.shape(level1)[0];
        let factor = self.downsample_factor();
        if !t.is_multiple_of(factor) || t == 0 {
            return Err(Error::Data(format!(
                "sequence length {t} is not a positive multiple of {factor}"
            )));
        }
        let mut levels = Vec::with_capacity(self.blocks.len());
        let mut x = level1;
        for block in &self.blocks {
            x = block.forward(g, p, x)?;
            levels.push(x);
        }
        Ok(LevelFeatures { levels })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn block(c: usize, n: usize, relu: bool, seed: u64) -> (MstBlock, ParamStore) {
        let mut store = ParamStore::new();
        let b = MstBlock::new("b", c, n, relu, &mut store, &mut Rng::new(seed)).unwrap();
        (b, store)
    }

    fn run(b: &MstBlock, store: &ParamStore, x: Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xv = g.constant(x);
        let y = b.forward(&mut g, &p, xv)?;
        Ok(g.value(y).clone())
    }

    #[test]
    fn halves_time_axis() {
        let (b, store) = block(64, 4, true, 0);
        let y = run(&b, &store, Tensor::filled(&[16, 64], 0.1)).unwrap();
        assert_eq!(y.shape(), &[8, 64]);
        let kernels: Vec<_> = b.branches.iter().map(|br| br.kernel).collect();
        assert_eq!(kernels, vec![3, 5, 7, 9]);
        assert_eq!(store.get(b.fusion_weight).shape(), &[64, 64, 4, 2]);
    }

    #[test]
    fn single_scale_degenerates_to_one_conv_and_strided_fusion() {
        let (b, store) = block(8, 1, false, 0);
        assert_eq!(store.get(b.fusion_weight).shape(), &[8, 8, 1, 2]);
        let y = run(&b, &store, Tensor::filled(&[6, 8], 1.0)).unwrap();
        assert_eq!(y.shape(), &[3, 8]);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let (b, mut store) = block(8, 3, true, 2);
        for br in &b.branches {
            store.get_mut(br.bias).data_mut().fill(0.0);
        }
        store.get_mut(b.fusion_bias).data_mut().fill(0.0);
        let y = run(&b, &store, Tensor::zeros(&[8, 8])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn odd_length_is_rejected() {
        let (b, store) = block(4, 2, true, 0);
        assert!(matches!(run(&b, &store, Tensor::zeros(&[7, 4])), Err(Error::Data(_))));
    }

    #[test]
    fn parameter_count_is_linear_in_scales() {
        let c = 6;
        let counts: Vec<usize> = (1..=5).map(|n| block(c, n, true, 0).1.total_numel()).collect();
        // Branch k adds c·c·k + c; fusion adds c·c·2 per scale.
        for n in 1..=5usize {
            let kernels: usize = (0..n).map(|i| 3 + 2 * i).sum();
            let expected = c * c * kernels + c * n + c * c * n * 2 + c;
            assert_eq!(counts[n - 1], expected);
        }
        let diffs: Vec<isize> = counts.windows(2).map(|w| w[1] as isize - w[0] as isize).collect();
        // Kernel sizes grow by 2, so the increments grow by exactly 2·c·c.
        for d in diffs.windows(2) {
            assert_eq!(d[1] - d[0], 2 * (c * c) as isize);
        }
    }
}
