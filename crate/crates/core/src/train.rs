//! Training, evaluation, gradient checking and ablation sweeps.

use std::fmt;

use crate::checkpoint::{self, Checkpoint};
use crate::config::ModelConfig;
use crate::ctc::{beam_decode, greedy_decode, GlossSequence};
use crate::data::{temporal_augment, Corpus, Sample};
use crate::error::{CtcError, Error, Result, TensorError};
use crate::frame_encoder::{gradient_stop_mask, FeatureSequence};
use crate::metrics::{align, corpus_wer, markup, wer, EditBreakdown};
use crate::model::Network;
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::rng::Rng;
use crate::tensor::Tensor;

const TRAIN_RNG_TAG: u64 = 0x5452_4149;

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_wer: f64,
    pub lr: f64,
}

impl fmt::Display for EpochRecord {
    /// Tab-separated `epoch, train_loss, dev_wer, lr`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}\t{}", self.epoch, self.train_loss, self.dev_wer, self.lr)
    }
}

impl EpochRecord {
    pub fn parse(line: &str) -> Option<Self> {
        let mut it = line.trim().split('\t');
        let rec = Self {
            epoch: it.next()?.parse().ok()?,
            train_loss: it.next()?.parse().ok()?,
            dev_wer: it.next()?.parse().ok()?,
            lr: it.next()?.parse().ok()?,
        };
        it.next().is_none().then_some(rec)
    }
}

/// Classifies a per-sample failure: infeasible targets are skipped, anything
/// else aborts training.
fn is_infeasible(e: &Error) -> bool {
    match e {
        Error::Ctc(CtcError::Infeasible { .. }) => true,
        Error::Ctc(CtcError::Level { source, .. }) => matches!(**source, CtcError::Infeasible { .. }),
        _ => false,
    }
}

fn numeric_context(e: Error, what: impl FnOnce() -> String) -> Error {
    match e {
        Error::Tensor(TensorError::NonFinite { op }) => Error::Numeric(format!("{}: non-finite output of {op}", what())),
        Error::Ctc(CtcError::Tensor(TensorError::NonFinite { op })) => {
            Error::Numeric(format!("{}: non-finite output of {op}", what()))
        }
        other => other,
    }
}

/// Stateful training loop. Everything needed to continue bit-identically is
/// captured by [`Trainer::checkpoint`].
#[derive(Clone, Debug)]
pub struct Trainer {
    pub network: Network,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: Rng,
    pub best_dev_wer: f64,
    pub best: Option<Checkpoint>,
    pub log: Vec<EpochRecord>,
    /// Samples skipped because their target cannot be aligned.
    pub skipped: usize,
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    pub best: Checkpoint,
    pub log: Vec<EpochRecord>,
    pub skipped: usize,
}

impl Trainer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let rng = Rng::new(config.seed).derive(TRAIN_RNG_TAG);
        let network = Network::new(config)?;
        let adam = AdamState::new(&network.params);
        Ok(Self {
            network,
            adam,
            epoch: 0,
            rng,
            best_dev_wer: f64::INFINITY,
            best: None,
            log: Vec::new(),
            skipped: 0,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let network = Network::from_params(ckpt.config.clone(), ckpt.params.clone())?;
        Ok(Self {
            network,
            adam: ckpt.adam.clone(),
            epoch: ckpt.epoch,
            rng: Rng::from_state(ckpt.rng),
            best_dev_wer: ckpt.best_dev_wer,
            best: None,
            log: Vec::new(),
            skipped: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.network.config
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: checkpoint::VERSION,
            config: self.network.config.clone(),
            params: self.network.params.clone(),
            adam: self.adam.clone(),
            epoch: self.epoch,
            rng: self.rng.state(),
            best_dev_wer: self.best_dev_wer,
        }
    }

    fn training_view(&mut self, sample: &Sample) -> Result<FeatureSequence> {
        let cfg = &self.network.config;
        let m = cfg.time_multiple();
        if cfg.temporal_aug > 0.0 {
            Ok(temporal_augment(&sample.features, &mut self.rng, cfg.temporal_aug, m))
        } else {
            self.network.prepare(&sample.features)
        }
    }

    /// One optimizer step over `batch` (indices into `train`). Returns the
    /// per-sample losses of the samples that were used.
    fn step(&mut self, train: &[Sample], batch: &[usize], lr: f64) -> Result<Vec<f64>> {
        let mut acc: Option<Vec<Vec<f64>>> = None;
        let mut losses = Vec::with_capacity(batch.len());
        let dump = || {
            batch
                .iter()
                .map(|&j| {
                    let s = &train[j];
                    format!(
                        "sample {} (frames {}, target {:?})",
                        s.features.sample_id,
                        s.features.valid_len,
                        s.target.labels()
                    )
                })
                .collect::<Vec<_>>()
                .join("; ")
        };
        let epoch = self.epoch + 1;
        for &i in batch {
            let sample = &train[i];
            let seq = self.training_view(sample)?;
            let mask = gradient_stop_mask(seq.len(), self.network.config.grad_stop_p, &mut self.rng, true);
            let out = match self.network.loss_and_grads(&seq, &sample.target, mask) {
                Ok(out) => out,
                Err(e) if is_infeasible(&e) => {
                    self.skipped += 1;
                    continue;
                }
                Err(e) => {
                    return Err(numeric_context(e, || {
                        format!("epoch {epoch}, sample {}; batch: {}", sample.features.sample_id, dump())
                    }))
                }
            };
            if !out.loss.is_finite() || out.grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "epoch {epoch}, sample {}: loss {} with per-level {:?}; batch: {}",
                    sample.features.sample_id,
                    out.loss,
                    out.per_level,
                    dump()
                )));
            }
            losses.push(out.loss);
            match acc.as_mut() {
                None => acc = Some(out.grads),
                Some(a) => {
                    for (x, y) in a.iter_mut().zip(&out.grads) {
                        x.iter_mut().zip(y).for_each(|(p, q)| *p += q);
                    }
                }
            }
        }
        if let Some(grads) = acc {
            let cfg = AdamConfig {
                lr,
                weight_decay: self.network.config.weight_decay,
                ..AdamConfig::default()
            };
            adam_step(&mut self.network.params, &grads, &mut self.adam, &cfg);
        }
        Ok(losses)
    }

    /// Runs one epoch and appends its record to the log.
    pub fn run_epoch(&mut self, train: &[Sample], dev: &[Sample]) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(Error::Data("training corpus is empty".into()));
        }
        let lr = self.network.config.lr_at_epoch(self.epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        self.rng.shuffle(&mut order);
        let mut losses = Vec::with_capacity(train.len());
        for batch in order.chunks(self.network.config.batch_size) {
            losses.extend(self.step(train, batch, lr)?);
        }
        self.epoch += 1;
        let train_loss = if losses.is_empty() {
            f64::NAN
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        };
        let dev_set = if dev.is_empty() { train } else { dev };
        let dev_wer = greedy_corpus_wer(&self.network, dev_set)?.wer;
        let record = EpochRecord {
            epoch: self.epoch,
            train_loss,
            dev_wer,
            lr,
        };
        self.log.push(record);
        if dev_wer < self.best_dev_wer {
            self.best_dev_wer = dev_wer;
            self.best = Some(self.checkpoint());
        }
        Ok(record)
    }

    /// Trains until `config.epochs` epochs are complete.
    pub fn run(&mut self, train: &[Sample], dev: &[Sample]) -> Result<()> {
        self.run_until(train, dev, self.network.config.epochs)
    }

    pub fn run_until(&mut self, train: &[Sample], dev: &[Sample], epochs: usize) -> Result<()> {
        while self.epoch < epochs {
            self.run_epoch(train, dev)?;
        }
        Ok(())
    }

    pub fn finish(self) -> TrainOutcome {
        let last = self.checkpoint();
        TrainOutcome {
            best: self.best.unwrap_or_else(|| last.clone()),
            last,
            log: self.log,
            skipped: self.skipped,
        }
    }
}

/// Trains a fresh network on `train`, selecting the best epoch by greedy
/// WER on `dev` (on `train` itself when `dev` is empty).
pub fn train(config: ModelConfig, train: &[Sample], dev: &[Sample]) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config)?;
    trainer.run(train, dev)?;
    Ok(trainer.finish())
}

fn greedy_corpus_wer(net: &Network, samples: &[Sample]) -> Result<EditBreakdown> {
    let mut refs = Vec::with_capacity(samples.len());
    let mut hyps = Vec::with_capacity(samples.len());
    for s in samples {
        refs.push(s.target.clone());
        hyps.push(greedy_decode(&net.decode_logits(&s.features)?));
    }
    Ok(corpus_wer(refs.iter().zip(&hyps))?)
}

/// Decoded output for one evaluation sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleDecode {
    pub index: usize,
    pub reference: GlossSequence,
    pub hypothesis: GlossSequence,
    /// `None` for an empty reference.
    pub breakdown: Option<EditBreakdown>,
    pub markup: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub corpus: EditBreakdown,
    pub samples: Vec<SampleDecode>,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.samples {
            let (sub, del, ins) = s.breakdown.map_or((0, 0, 0), |b| (b.sub, b.del, b.ins));
            writeln!(
                f,
                "{}\tsub={sub}\tdel={del}\tins={ins}\tref={}\thyp={}\t{}",
                s.index,
                gloss_text(&s.reference),
                gloss_text(&s.hypothesis),
                s.markup
            )?;
        }
        writeln!(f, "{}", self.corpus)
    }
}

pub fn gloss_name(id: usize) -> String {
    format!("g{id}")
}

pub fn gloss_text(s: &GlossSequence) -> String {
    s.labels().iter().map(|&i| gloss_name(i)).collect::<Vec<_>>().join(" ")
}

/// Decodes one sequence from the last level. `beam_width` 0 selects greedy
/// decoding.
pub fn decode(net: &Network, seq: &FeatureSequence, beam_width: usize) -> Result<GlossSequence> {
    let logits = net.decode_logits(seq)?;
    Ok(if beam_width == 0 {
        greedy_decode(&logits)
    } else {
        beam_decode(&logits, beam_width)
    })
}

/// Decodes every sample of `corpus` with the last gloss level and scores
/// the result. `beam_width` 0 selects greedy decoding.
pub fn evaluate(net: &Network, corpus: &Corpus, beam_width: usize) -> Result<EvalReport> {
    if corpus.vocab_size != net.config.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary mismatch: model has {} glosses, corpus has {}",
            net.config.vocab_size, corpus.vocab_size
        )));
    }
    let samples = corpus
        .samples
        .iter()
        .enumerate()
        .map(|(index, s)| {
            let hypothesis = decode(net, &s.features, beam_width)?;
            let ops = align(s.target.labels(), hypothesis.labels());
            Ok(SampleDecode {
                index,
                breakdown: wer(&s.target, &hypothesis).ok(),
                markup: markup(&ops, gloss_name),
                reference: s.target.clone(),
                hypothesis,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let corpus = corpus_wer(samples.iter().map(|s| (&s.reference, &s.hypothesis)))?;
    Ok(EvalReport { corpus, samples })
}

/// Max relative gradient error of one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub group: String,
    pub params: usize,
    pub max_rel_error: f64,
    /// Group excluded from the comparison (all analytic gradients are zero
    /// by construction).
    pub exempt: bool,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for g in &self.groups {
            let status = if g.exempt {
                "EXEMPT"
            } else if g.passed {
                "PASS"
            } else {
                "FAIL"
            };
            writeln!(
                f,
                "{status}\t{}\t{} params\tmax rel err {:.3e}",
                g.group, g.params, g.max_rel_error
            )?;
        }
        write!(f, "{}", if self.passed() { "gradcheck passed" } else { "gradcheck FAILED" })
    }
}

/// Central-difference step.
pub const GRADCHECK_STEP: f64 = 1e-5;
/// Relative errors use `max(|analytic|, |numeric|, GRADCHECK_FLOOR)` as the
/// denominator so that gradients at round-off level do not dominate.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR)
}

/// Group name of a parameter: its leading path segment (`mst0`, `enc1`,
/// `cls2`, ...).
fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Deterministic input and a target that fits the coarsest level.
pub fn gradcheck_input(config: &ModelConfig, frames: usize) -> (FeatureSequence, GlossSequence) {
    let mut rng = Rng::new(config.seed).derive(0x4743);
    let rows: Vec<Vec<f64>> = (0..frames)
        .map(|_| (0..config.d_in).map(|_| rng.normal()).collect())
        .collect();
    let seq = FeatureSequence::padded(&rows, config.d_in, config.time_multiple(), 0).expect("consistent rows");
    let coarse = frames.div_ceil(config.time_multiple()).max(1);
    let len = coarse.min(2).min(config.vocab_size.max(1));
    let labels = (0..len).map(|i| i % config.vocab_size).collect();
    (seq, GlossSequence(labels))
}

/// Finite-difference check of the whole network, loss included, on an
/// 8-frame input. With `grad_stop_p >= 1` every frame is stopped, so the
/// frame embedder must get exactly-zero gradients and is left out of the
/// comparison; for smaller `grad_stop_p` no stopping is applied.
pub fn gradcheck(config: &ModelConfig, tolerance: f64) -> Result<GradcheckReport> {
    let mut net = Network::new(config.clone())?;
    let (seq, target) = gradcheck_input(config, 8);
    let stop_all = config.grad_stop_p >= 1.0;
    let mask = stop_all.then(|| vec![true; seq.len()]);
    let analytic = net.loss_and_grads(&seq, &target, mask)?.grads;

    let mut groups: Vec<GroupCheck> = Vec::new();
    let names: Vec<String> = net.params.iter().map(|(_, n, _)| n.to_string()).collect();
    for (pi, name) in names.iter().enumerate() {
        let group = group_of(name).to_string();
        let exempt = stop_all && group == "embed";
        let mut worst = 0.0f64;
        let numel = analytic[pi].len();
        if exempt {
            if analytic[pi].iter().any(|&g| g != 0.0) {
                worst = f64::INFINITY;
            }
        } else {
            for j in 0..numel {
                let id = crate::params::ParamId(pi);
                let orig = net.params.get(id).data()[j];
                net.params.get_mut(id).data_mut()[j] = orig + GRADCHECK_STEP;
                let up = net.loss(&seq, &target)?;
                net.params.get_mut(id).data_mut()[j] = orig - GRADCHECK_STEP;
                let down = net.loss(&seq, &target)?;
                net.params.get_mut(id).data_mut()[j] = orig;
                let numeric = (up - down) / (2.0 * GRADCHECK_STEP);
                worst = worst.max(relative_error(analytic[pi][j], numeric));
            }
        }
        match groups.iter_mut().find(|g| g.group == group) {
            Some(g) => {
                g.params += numel;
                g.max_rel_error = g.max_rel_error.max(worst);
            }
            None => groups.push(GroupCheck {
                group,
                params: numel,
                max_rel_error: worst,
                exempt,
                passed: false,
            }),
        }
    }
    for g in &mut groups {
        g.passed = if g.exempt {
            g.max_rel_error == 0.0
        } else {
            g.max_rel_error < tolerance
        };
    }
    Ok(GradcheckReport { tolerance, groups })
}

/// The four ablation axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Scales,
    FcLayers,
    Encoder,
    CtcLevels,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "scales" => Ok(Self::Scales),
            "fc_layers" => Ok(Self::FcLayers),
            "encoder" => Ok(Self::Encoder),
            "ctc_levels" => Ok(Self::CtcLevels),
            other => Err(Error::Config(format!(
                "unknown ablation axis `{other}` (scales, fc_layers, encoder, ctc_levels)"
            ))),
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Self::Scales => "num_scales",
            Self::FcLayers => "fc_layers",
            Self::Encoder => "encoder",
            Self::CtcLevels => "ctc_levels",
        }
    }

    /// Column header for the value column.
    pub fn header(self) -> &'static str {
        match self {
            Self::Scales => "kernel",
            Self::FcLayers => "The number of FC layers",
            Self::Encoder => "Enhancement coding method",
            Self::CtcLevels => "The number of CTC losses",
        }
    }

    /// The value range swept by default.
    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            Self::Scales => &["1", "2", "3", "4", "5"],
            Self::FcLayers => &["0", "1", "2", "3"],
            Self::Encoder => &["bilstm", "transformer"],
            Self::CtcLevels => &["1", "2", "3", "4"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// `base` with this axis set to `value`. Zero FC layers forces
    /// `c1 = c2` since the frame embedder then feeds the MST blocks directly.
    pub fn apply(self, base: &ModelConfig, value: &str) -> Result<ModelConfig> {
        let mut cfg = base.clone();
        cfg.set(self.key(), value)?;
        if self == Self::FcLayers && cfg.fc_layers == 0 {
            cfg.c1 = cfg.c2;
        }
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub value: String,
    /// Corpus WER in percent, or the error that stopped this cell.
    pub dev_wer: std::result::Result<f64, String>,
    pub test_wer: std::result::Result<f64, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}\tDev(%)\tTest(%)", self.axis.header())?;
        let cell = |r: &std::result::Result<f64, String>| match r {
            Ok(v) => format!("{v:.1}"),
            Err(e) => format!("error: {e}"),
        };
        for r in &self.rows {
            writeln!(f, "{}\t{}\t{}", r.value, cell(&r.dev_wer), cell(&r.test_wer))?;
        }
        Ok(())
    }
}

/// Trains one model per value of `axis` (all sharing `base.seed`) and
/// reports beam-decoded dev and test WER of each best checkpoint. A failing
/// cell is reported in its row and does not stop the sweep.
pub fn ablate(
    base: &ModelConfig,
    axis: AblationAxis,
    values: &[String],
    train_set: &Corpus,
    dev_set: &Corpus,
    test_set: &Corpus,
) -> AblationTable {
    let rows = values
        .iter()
        .map(|value| {
            let run = || -> Result<(f64, f64)> {
                let cfg = axis.apply(base, value)?;
                let beam = cfg.beam_width;
                let outcome = train(cfg, &train_set.samples, &dev_set.samples)?;
                let net = Network::from_params(outcome.best.config.clone(), outcome.best.params.clone())?;
                let dev = evaluate(&net, dev_set, beam)?.corpus.wer;
                let test = evaluate(&net, test_set, beam)?.corpus.wer;
                Ok((dev, test))
            };
            match run() {
                Ok((d, t)) => AblationRow {
                    value: value.clone(),
                    dev_wer: Ok(d),
                    test_wer: Ok(t),
                },
                Err(e) => AblationRow {
                    value: value.clone(),
                    dev_wer: Err(e.to_string()),
                    test_wer: Err(e.to_string()),
                },
            }
        })
        .collect();
    AblationTable { axis, rows }
}

/// Convenience for tests and bindings: a tensor of `rows` frames from a
/// closure.
pub fn frames_from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Tensor {
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|i| f(i / cols, i % cols)).collect(),
    )
    .expect("positive shape")
}
