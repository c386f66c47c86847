//! Python bindings: `import mstnet`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};

use ::mstnet::ctc::{self, beam_search, greedy_decode, Alignment};
use ::mstnet::data::{read_corpus, write_corpus, PAD_MULTIPLE};
use ::mstnet::metrics::{align, markup, wer as edit_wer};
use ::mstnet::train::{self as training, gloss_name, AblationAxis, EpochRecord, Trainer};
use ::mstnet::{
    Checkpoint, Corpus, Error, FeatureSequence, GlossSequence, GrammarConfig, LevelLogits, ModelConfig, Network,
    Split, Tensor, ToyGrammar,
};
use pyo3::exceptions::{PyIndexError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyOSError::new_err(e.to_string()),
        Error::Numeric(m) => PyRuntimeError::new_err(format!("numeric failure: {m}")),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn err<E: Into<Error>>(e: E) -> PyErr {
    py_err(e.into())
}

fn sequence(frames: &[Vec<f64>]) -> PyResult<FeatureSequence> {
    let d_in = frames.first().map_or(0, Vec::len);
    FeatureSequence::padded(frames, d_in, PAD_MULTIPLE, 0).map_err(err)
}

fn logits(rows: &[Vec<f64>]) -> PyResult<LevelLogits> {
    Ok(LevelLogits::full(Tensor::from_rows(rows).map_err(err)?))
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// Model and training hyper-parameters, read and written by key.
#[pyclass(name = "Config", module = "mstnet", skip_from_py_object)]
#[derive(Clone)]
pub struct PyConfig {
    pub inner: ModelConfig,
}

#[pymethods]
impl PyConfig {
    /// Defaults, optionally overridden by keyword values such as `lr=1e-3`.
    #[new]
    #[pyo3(signature = (preset = "default", **overrides))]
    pub fn new(preset: &str, overrides: Option<std::collections::HashMap<String, Bound<'_, PyAny>>>) -> PyResult<Self> {
        let mut inner = match preset {
            "default" => ModelConfig::default(),
            "full" => ModelConfig::full_scale(),
            "tiny" => ModelConfig::tiny(),
            other => return Err(PyValueError::new_err(format!("unknown preset `{other}`"))),
        };
        for (k, v) in overrides.unwrap_or_default() {
            inner.set(&k, &v.str()?.to_string()).map_err(py_err)?;
        }
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    pub fn from_text(text: &str) -> PyResult<Self> {
        ModelConfig::from_text(text).map(|inner| Self { inner }).map_err(py_err)
    }

    pub fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[staticmethod]
    pub fn keys() -> Vec<&'static str> {
        ModelConfig::keys().to_vec()
    }

    pub fn get(&self, key: &str) -> PyResult<String> {
        self.inner.get(key).ok_or_else(|| PyValueError::new_err(format!("unknown key `{key}`")))
    }

    pub fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(py_err)
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.inner.lr_at_epoch(epoch)
    }

    fn __repr__(&self) -> String {
        format!("Config({})", self.inner.to_text().trim_end().replace('\n', ", "))
    }
}

/// A labelled set of feature sequences.
#[pyclass(name = "Corpus", module = "mstnet")]
pub struct PyCorpus {
    pub inner: Corpus,
}

#[pymethods]
impl PyCorpus {
    /// Samples `start..start+count` of the toy grammar's `split`.
    #[staticmethod]
    #[pyo3(signature = (count, vocab_size = 10, d_in = 16, split = "train", start = 0, seed = 0, noise_sigma = 0.05))]
    pub fn synth(
        count: usize,
        vocab_size: usize,
        d_in: usize,
        split: &str,
        start: usize,
        seed: u64,
        noise_sigma: f64,
    ) -> PyResult<Self> {
        let split = match split {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(PyValueError::new_err(format!("unknown split `{other}`"))),
        };
        let grammar = ToyGrammar::new(GrammarConfig {
            vocab_size,
            d_in,
            noise_sigma,
            seed,
            ..GrammarConfig::default()
        })
        .map_err(py_err)?;
        Ok(Self {
            inner: Corpus {
                vocab_size,
                samples: (start..start + count).map(|i| grammar.sample(split, i)).collect(),
            },
        })
    }

    #[staticmethod]
    pub fn load(path: &str) -> PyResult<Self> {
        let f = File::open(path).map_err(err)?;
        let inner = read_corpus(&mut BufReader::new(f), PAD_MULTIPLE).map_err(py_err)?;
        Ok(Self { inner })
    }

    pub fn save(&self, path: &str) -> PyResult<()> {
        let mut w = BufWriter::new(File::create(path).map_err(err)?);
        write_corpus(&mut w, &self.inner).map_err(py_err)?;
        w.flush().map_err(err)
    }

    #[getter]
    pub fn vocab_size(&self) -> usize {
        self.inner.vocab_size
    }

    /// `(frames, target)` with padding removed.
    pub fn sample(&self, index: usize) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
        let s = self
            .inner
            .samples
            .get(index)
            .ok_or_else(|| PyIndexError::new_err(format!("index {index} out of range")))?;
        Ok((s.features.valid_rows(), s.target.0.clone()))
    }

    fn __len__(&self) -> usize {
        self.inner.samples.len()
    }
}

/// The recognizer.
#[pyclass(name = "Network", module = "mstnet")]
pub struct PyNetwork {
    pub inner: Network,
}

#[pymethods]
impl PyNetwork {
    #[new]
    pub fn new(config: &PyConfig) -> PyResult<Self> {
        Network::new(config.inner.clone()).map(|inner| Self { inner }).map_err(py_err)
    }

    #[staticmethod]
    pub fn load(path: &str) -> PyResult<Self> {
        let ckpt = Checkpoint::load(path).map_err(py_err)?;
        Network::from_params(ckpt.config, ckpt.params).map(|inner| Self { inner }).map_err(py_err)
    }

    #[getter]
    pub fn config(&self) -> PyConfig {
        PyConfig {
            inner: self.inner.config.clone(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.inner.params.iter().map(|(_, _, t)| t.data().len()).sum()
    }

    /// Parameter names and shapes in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.inner.params.iter().map(|(_, n, t)| (n.to_string(), t.shape().to_vec())).collect()
    }

    /// `(logits, valid_len)` for every level, finest first.
    pub fn level_logits(&self, frames: Vec<Vec<f64>>) -> PyResult<Vec<(Vec<Vec<f64>>, usize)>> {
        let levels = self.inner.level_logits(&sequence(&frames)?).map_err(py_err)?;
        Ok(levels.iter().map(|l| (rows(&l.scores), l.valid_len)).collect())
    }

    /// Multi-level CTC loss.
    pub fn loss(&self, frames: Vec<Vec<f64>>, target: Vec<usize>) -> PyResult<f64> {
        self.inner.loss(&sequence(&frames)?, &GlossSequence::new(target)).map_err(py_err)
    }

    /// Gloss ids; `beam_width` 0 decodes greedily.
    #[pyo3(signature = (frames, beam_width = None))]
    pub fn decode(&self, frames: Vec<Vec<f64>>, beam_width: Option<usize>) -> PyResult<Vec<usize>> {
        let width = beam_width.unwrap_or(self.inner.config.beam_width);
        training::decode(&self.inner, &sequence(&frames)?, width).map(|g| g.0).map_err(py_err)
    }

    /// `(wer_percent, per_sample_lines)` over a corpus.
    #[pyo3(signature = (corpus, beam_width = None))]
    pub fn evaluate(&self, corpus: &PyCorpus, beam_width: Option<usize>) -> PyResult<(f64, String)> {
        let width = beam_width.unwrap_or(self.inner.config.beam_width);
        let report = training::evaluate(&self.inner, &corpus.inner, width).map_err(py_err)?;
        Ok((report.corpus.wer, report.to_string()))
    }
}

/// Stateful trainer; one call to `run_epoch` per epoch.
#[pyclass(name = "Trainer", module = "mstnet")]
pub struct PyTrainer {
    pub inner: Trainer,
}

#[pymethods]
impl PyTrainer {
    #[new]
    pub fn new(config: &PyConfig) -> PyResult<Self> {
        Trainer::new(config.inner.clone()).map(|inner| Self { inner }).map_err(py_err)
    }

    #[staticmethod]
    pub fn resume(path: &str) -> PyResult<Self> {
        let ckpt = Checkpoint::load(path).map_err(py_err)?;
        Trainer::from_checkpoint(&ckpt).map(|inner| Self { inner }).map_err(py_err)
    }

    /// `(epoch, train_loss, dev_wer, lr)`.
    #[pyo3(signature = (train, dev = None))]
    pub fn run_epoch(&mut self, train: &PyCorpus, dev: Option<&PyCorpus>) -> PyResult<(usize, f64, f64, f64)> {
        let dev = dev.map_or(&[][..], |c| &c.inner.samples[..]);
        let EpochRecord {
            epoch,
            train_loss,
            dev_wer,
            lr,
        } = self.inner.run_epoch(&train.inner.samples, dev).map_err(py_err)?;
        Ok((epoch, train_loss, dev_wer, lr))
    }

    #[getter]
    pub fn epoch(&self) -> usize {
        self.inner.epoch
    }

    #[getter]
    pub fn best_dev_wer(&self) -> f64 {
        self.inner.best_dev_wer
    }

    #[getter]
    pub fn skipped(&self) -> usize {
        self.inner.skipped
    }

    pub fn network(&self) -> PyNetwork {
        PyNetwork {
            inner: self.inner.network.clone(),
        }
    }

    pub fn save(&self, path: &str) -> PyResult<()> {
        self.inner.checkpoint().save(path).map_err(py_err)
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        self.inner.checkpoint().to_bytes()
    }
}

/// CTC negative log-likelihood of `target` given unnormalized `logits`
/// (`T×(V+1)`, blank last).
#[pyfunction]
pub fn ctc_loss(logits: Vec<Vec<f64>>, target: Vec<usize>) -> PyResult<f64> {
    let l = self::logits(&logits)?;
    let lp = Tensor::from_rows(&l.log_probs()).map_err(err)?;
    ctc::ctc_nll(&lp, l.valid_len, &target).map(|(nll, _)| nll).map_err(err)
}

/// Merges repeats then drops `blank`.
#[pyfunction]
pub fn collapse(path: Vec<usize>, blank: usize) -> Vec<usize> {
    ctc::collapse(&Alignment(path), blank).0
}

#[pyfunction]
pub fn greedy(logits: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
    Ok(greedy_decode(&self::logits(&logits)?).0)
}

/// `[(labels, log_prob)]`, best first.
#[pyfunction]
pub fn beam(logits: Vec<Vec<f64>>, beam_width: usize) -> PyResult<Vec<(Vec<usize>, f64)>> {
    let hyps = beam_search(&self::logits(&logits)?, beam_width);
    Ok(hyps.into_iter().map(|h| (h.labels.0, h.log_prob)).collect())
}

/// `(wer_percent, sub, del, ins, markup)`.
#[pyfunction]
pub fn wer(reference: Vec<usize>, hypothesis: Vec<usize>) -> PyResult<(f64, usize, usize, usize, String)> {
    let b = edit_wer(&GlossSequence::new(reference.clone()), &GlossSequence::new(hypothesis.clone())).map_err(err)?;
    let m = markup(&align(&reference, &hypothesis), gloss_name);
    Ok((b.wer, b.sub, b.del, b.ins, m))
}

/// `(passed, report)`.
#[pyfunction]
#[pyo3(signature = (config, tolerance = 1e-4))]
pub fn gradcheck(config: &PyConfig, tolerance: f64) -> PyResult<(bool, String)> {
    let r = training::gradcheck(&config.inner, tolerance).map_err(py_err)?;
    Ok((r.passed(), r.to_string()))
}

/// Tab-separated ablation table over `axis`.
#[pyfunction]
#[pyo3(signature = (config, axis, train, dev, test, values = None))]
pub fn ablate(
    config: &PyConfig,
    axis: &str,
    train: &PyCorpus,
    dev: &PyCorpus,
    test: &PyCorpus,
    values: Option<Vec<String>>,
) -> PyResult<String> {
    let axis = AblationAxis::parse(axis).map_err(py_err)?;
    let values = values.unwrap_or_else(|| axis.default_values());
    Ok(training::ablate(&config.inner, axis, &values, &train.inner, &dev.inner, &test.inner).to_string())
}

#[pymodule]
#[pyo3(name = "mstnet")]
fn mstnet_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(ctc_loss, m)?)?;
    m.add_function(wrap_pyfunction!(collapse, m)?)?;
    m.add_function(wrap_pyfunction!(greedy, m)?)?;
    m.add_function(wrap_pyfunction!(beam, m)?)?;
    m.add_function(wrap_pyfunction!(wer, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(ablate, m)?)?;
    Ok(())
}
