//! Synthetic "toy sign language" corpus.
//!
//! Each gloss owns a fixed multi-frame prototype. A sentence is realized by
//! time-warping every gloss prototype by its own random factor and adding
//! Gaussian noise, so the same gloss spans a different number of frames in
//! every occurrence. Train and test share prototypes but never share warp or
//! noise draws.

use std::io::{self, Read, Write};

use crate::ctc::GlossSequence;
use crate::error::{Error, Result};
use crate::frame_encoder::FeatureSequence;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Samples are padded to a multiple of this many frames.
pub const PAD_MULTIPLE: usize = 4;
/// Per-occurrence warp factors are drawn log-uniformly from this range.
pub const WARP_RANGE: (f64, f64) = (0.8, 1.25);

const CORPUS_MAGIC: &[u8; 4] = b"MSTC";
const CORPUS_VERSION: u8 = 1;
const PROTOTYPE_TAG: u64 = 0x5052_4f54;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrammarConfig {
    pub vocab_size: usize,
    pub d_in: usize,
    /// Prototype durations are drawn from `duration_range` (inclusive).
    pub duration_range: (usize, usize),
    pub noise_sigma: f64,
    /// Sentence lengths are drawn from `sentence_len_range` (inclusive).
    pub sentence_len_range: (usize, usize),
    pub seed: u64,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        Self {
            vocab_size: 10,
            d_in: 16,
            duration_range: (4, 12),
            noise_sigma: 0.05,
            sentence_len_range: (2, 5),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyGrammar {
    pub config: GrammarConfig,
    /// One `d_proto×d_in` prototype per gloss.
    pub prototypes: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: FeatureSequence,
    pub target: GlossSequence,
    /// Realized frame count of each gloss, in order.
    pub durations: Vec<usize>,
}

impl ToyGrammar {
    pub fn new(config: GrammarConfig) -> Result<Self> {
        let (lo, hi) = config.duration_range;
        let (smin, smax) = config.sentence_len_range;
        if config.vocab_size == 0 || config.d_in == 0 || lo == 0 || lo > hi || smin > smax {
            return Err(Error::Config(format!("invalid grammar {config:?}")));
        }
        if config.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        let mut rng = Rng::new(config.seed).derive(PROTOTYPE_TAG);
        let prototypes = (0..config.vocab_size)
            .map(|_| {
                let d = rng.int_inclusive(lo, hi);
                let data = (0..d * config.d_in).map(|_| rng.normal()).collect();
                Tensor::new(vec![d, config.d_in], data).expect("positive shape")
            })
            .collect();
        Ok(Self { config, prototypes })
    }

    fn sample_rng(&self, split: Split, index: usize) -> Rng {
        Rng::new(self.config.seed).derive((split.tag() << 48) | index as u64)
    }

    /// Sample `index` of `split`; depends only on the grammar seed, the split
    /// and the index.
    pub fn sample(&self, split: Split, index: usize) -> Sample {
        let mut rng = self.sample_rng(split, index);
        let (smin, smax) = self.config.sentence_len_range;
        let len = rng.int_inclusive(smin, smax);
        let labels: Vec<usize> = (0..len)
            .map(|_| rng.int_inclusive(0, self.config.vocab_size - 1))
            .collect();
        let (wlo, whi) = (WARP_RANGE.0.ln(), WARP_RANGE.1.ln());
        let mut rows = Vec::new();
        let mut durations = Vec::with_capacity(len);
        for &gloss in &labels {
            let proto = &self.prototypes[gloss];
            let d = proto.rows();
            let factor = rng.uniform_range(wlo, whi).exp();
            let realized = ((d as f64 * factor).round() as usize).max(1);
            durations.push(realized);
            for j in 0..realized {
                let src = j * d / realized;
                rows.push(
                    proto
                        .row(src)
                        .iter()
                        .map(|&v| v + self.config.noise_sigma * rng.normal())
                        .collect::<Vec<f64>>(),
                );
            }
        }
        let features = FeatureSequence::padded(&rows, self.config.d_in, PAD_MULTIPLE, index as u64)
            .expect("rows have d_in columns");
        Sample {
            features,
            target: GlossSequence(labels),
            durations,
        }
    }

    pub fn generate(&self, count: usize, split: Split) -> Vec<Sample> {
        (0..count).map(|i| self.sample(split, i)).collect()
    }
}

/// Resamples the real frames of `seq` to a random length within
/// `±max_frac` by evenly spaced frame duplication or deletion, keeping frame
/// order, then re-pads to `multiple`.
pub fn temporal_augment(seq: &FeatureSequence, rng: &mut Rng, max_frac: f64, multiple: usize) -> FeatureSequence {
    let t = seq.valid_len;
    if t == 0 {
        return seq.clone();
    }
    let lo = ((t as f64 * (1.0 - max_frac) - 1e-9).ceil() as usize).max(1);
    let hi = ((t as f64 * (1.0 + max_frac) + 1e-9).floor() as usize).max(lo);
    let new_len = rng.int_inclusive(lo, hi);
    let rows: Vec<Vec<f64>> = (0..new_len)
        .map(|j| seq.frames.row(j * t / new_len).to_vec())
        .collect();
    FeatureSequence::padded(&rows, seq.d_in(), multiple, seq.sample_id).expect("same width")
}

/// Samples with the vocabulary they are drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab_size: usize,
    pub samples: Vec<Sample>,
}

impl Corpus {
    pub fn d_in(&self) -> Option<usize> {
        self.samples.first().map(|s| s.features.d_in())
    }
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Data(format!("{what} {v} does not fit in 32 bits")))
}

/// Writes a corpus. Layout (little-endian): magic `MSTC`, version byte,
/// `u32` vocabulary size, `u32` record count, then per record a `(T, L,
/// D_in)` header of `u32`s, `T·D_in` `f32` frame values row-major (real
/// frames only) and `L` `u32` gloss ids.
pub fn write_corpus(w: &mut impl Write, corpus: &Corpus) -> Result<()> {
    w.write_all(CORPUS_MAGIC)?;
    w.write_all(&[CORPUS_VERSION])?;
    w.write_all(&to_u32(corpus.vocab_size, "vocab size")?.to_le_bytes())?;
    w.write_all(&to_u32(corpus.samples.len(), "sample count")?.to_le_bytes())?;
    for s in &corpus.samples {
        let f = &s.features;
        w.write_all(&to_u32(f.valid_len, "frame count")?.to_le_bytes())?;
        w.write_all(&to_u32(s.target.len(), "target length")?.to_le_bytes())?;
        w.write_all(&to_u32(f.d_in(), "frame width")?.to_le_bytes())?;
        for v in &f.frames.data()[..f.valid_len * f.d_in()] {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        for &id in s.target.labels() {
            w.write_all(&to_u32(id, "gloss id")?.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a corpus written by [`write_corpus`], padding every sample to
/// `multiple` frames.
pub fn read_corpus(r: &mut impl Read, multiple: usize) -> Result<Corpus> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CORPUS_MAGIC {
        return Err(Error::Data("not a corpus file (bad magic)".into()));
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version)?;
    if version[0] != CORPUS_VERSION {
        return Err(Error::Data(format!("unsupported corpus version {}", version[0])));
    }
    let vocab_size = read_u32(r)? as usize;
    let count = read_u32(r)? as usize;
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    for index in 0..count {
        let t = read_u32(r)? as usize;
        let l = read_u32(r)? as usize;
        let d = read_u32(r)? as usize;
        if d == 0 {
            return Err(Error::Data(format!("record {index}: zero frame width")));
        }
        let mut rows = Vec::with_capacity(t);
        let mut buf = vec![0u8; d * 4];
        for _ in 0..t {
            r.read_exact(&mut buf)?;
            rows.push(
                buf.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                    .collect(),
            );
        }
        let mut labels = Vec::with_capacity(l);
        for _ in 0..l {
            let id = read_u32(r)? as usize;
            if id >= vocab_size {
                return Err(Error::Data(format!(
                    "record {index}: gloss id {id} outside vocabulary of {vocab_size}"
                )));
            }
            labels.push(id);
        }
        samples.push(Sample {
            features: FeatureSequence::padded(&rows, d, multiple, index as u64)?,
            target: GlossSequence(labels),
            durations: Vec::new(),
        });
    }
    Ok(Corpus { vocab_size, samples })
}
