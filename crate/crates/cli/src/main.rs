//! `mstnet` command-line driver.

use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mstnet::checkpoint::Checkpoint;
use mstnet::data::{read_corpus, write_corpus, PAD_MULTIPLE};
use mstnet::train::{ablate, decode, evaluate, gloss_text, gradcheck, AblationAxis, Trainer};
use mstnet::{Corpus, Error, GrammarConfig, ModelConfig, Network, Result, Split, ToyGrammar};

#[derive(Parser)]
#[command(name = "mstnet", version, about = "Multi-scale temporal network for continuous sign-language recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate toy train/dev/test corpus files.
    Synth(SynthArgs),
    /// Train a model, writing checkpoints and a metrics log.
    Train(TrainArgs),
    /// Decode a corpus and report WER.
    Eval(EvalArgs),
    /// Decode one sample.
    Decode(DecodeArgs),
    /// Finite-difference check of every parameter group.
    Gradcheck(GradcheckArgs),
    /// Train one model per value of an ablation axis.
    Ablate(AblateArgs),
}

/// Overrides for individual config fields; each takes the same textual value
/// as the config file.
#[derive(Args, Default)]
struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    d_in: Option<String>,
    #[arg(long)]
    c1: Option<String>,
    #[arg(long)]
    c2: Option<String>,
    #[arg(long)]
    fc_layers: Option<String>,
    #[arg(long)]
    num_scales: Option<String>,
    #[arg(long)]
    num_mst_blocks: Option<String>,
    /// transformer, none or bilstm
    #[arg(long)]
    encoder: Option<String>,
    #[arg(long)]
    encoder_layers: Option<String>,
    #[arg(long)]
    heads: Option<String>,
    #[arg(long)]
    ff_mult: Option<String>,
    #[arg(long)]
    ctc_levels: Option<String>,
    #[arg(long)]
    vocab_size: Option<String>,
    #[arg(long)]
    fusion_relu: Option<String>,
    #[arg(long)]
    shared_classifier: Option<String>,
    #[arg(long)]
    grad_stop_p: Option<String>,
    #[arg(long)]
    temporal_aug: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    weight_decay: Option<String>,
    /// Comma-separated `epoch:factor` pairs, e.g. `40:0.2,50:0.2`.
    #[arg(long)]
    lr_drops: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    beam_width: Option<String>,
    #[arg(long)]
    seed: Option<String>,
}

impl ConfigArgs {
    fn overrides(&self) -> Vec<(&'static str, &str)> {
        let fields: [(&'static str, &Option<String>); 23] = [
            ("d_in", &self.d_in),
            ("c1", &self.c1),
            ("c2", &self.c2),
            ("fc_layers", &self.fc_layers),
            ("num_scales", &self.num_scales),
            ("num_mst_blocks", &self.num_mst_blocks),
            ("encoder", &self.encoder),
            ("encoder_layers", &self.encoder_layers),
            ("heads", &self.heads),
            ("ff_mult", &self.ff_mult),
            ("ctc_levels", &self.ctc_levels),
            ("vocab_size", &self.vocab_size),
            ("fusion_relu", &self.fusion_relu),
            ("shared_classifier", &self.shared_classifier),
            ("grad_stop_p", &self.grad_stop_p),
            ("temporal_aug", &self.temporal_aug),
            ("lr", &self.lr),
            ("weight_decay", &self.weight_decay),
            ("lr_drops", &self.lr_drops),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("beam_width", &self.beam_width),
            ("seed", &self.seed),
        ];
        fields.into_iter().filter_map(|(k, v)| v.as_deref().map(|v| (k, v))).collect()
    }

    /// The config built from `base`, the config file and the flags, plus the
    /// keys that were set explicitly.
    fn resolve(&self, base: ModelConfig) -> Result<(ModelConfig, HashSet<String>)> {
        let mut cfg = base;
        let mut explicit = HashSet::new();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            cfg.apply_text(&text)?;
            explicit.extend(
                text.lines()
                    .filter_map(|l| l.split('#').next()?.split_once('='))
                    .map(|(k, _)| k.trim().to_string()),
            );
        }
        for (k, v) in self.overrides() {
            cfg.set(k, v)?;
            explicit.insert(k.to_string());
        }
        Ok((cfg, explicit))
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for train.mstc, dev.mstc and test.mstc.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    train: usize,
    #[arg(long, default_value_t = 50)]
    dev: usize,
    #[arg(long, default_value_t = 50)]
    test: usize,
    #[arg(long, default_value_t = 10)]
    vocab: usize,
    #[arg(long, default_value_t = 16)]
    d_in: usize,
    #[arg(long, default_value_t = 0.05)]
    sigma: f64,
    #[arg(long, default_value_t = 2)]
    min_len: usize,
    #[arg(long, default_value_t = 5)]
    max_len: usize,
    #[arg(long, default_value_t = 4)]
    min_dur: usize,
    #[arg(long, default_value_t = 12)]
    max_dur: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    train: PathBuf,
    /// Selects the best checkpoint; the training set is used when absent.
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Directory for last.ckpt, best.ckpt and metrics.tsv.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint. Its config is kept except `--epochs`.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeOpts {
    /// Beam width; defaults to the checkpoint's.
    #[arg(long)]
    beam_width: Option<usize>,
    /// Greedy best-path decoding instead of beam search.
    #[arg(long, conflicts_with = "beam_width")]
    greedy: bool,
}

impl DecodeOpts {
    fn width(&self, cfg: &ModelConfig) -> usize {
        if self.greedy {
            0
        } else {
            self.beam_width.unwrap_or(cfg.beam_width)
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    decode: DecodeOpts,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Sample index within the corpus.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[command(flatten)]
    decode: DecodeOpts,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// scales, fc_layers, encoder or ctc_levels
    #[arg(long)]
    axis: String,
    /// Comma-separated values; defaults to the axis' full range.
    #[arg(long, value_delimiter = ',')]
    values: Vec<String>,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    #[arg(long)]
    test: PathBuf,
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    let f = File::open(path).map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    read_corpus(&mut BufReader::new(f), PAD_MULTIPLE)
}

fn save_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_corpus(&mut w, corpus)?;
    w.flush()?;
    Ok(())
}

/// Takes `vocab_size` and `d_in` from the corpus unless set explicitly.
fn fit_to_corpus(cfg: &mut ModelConfig, explicit: &HashSet<String>, corpus: &Corpus) -> Result<()> {
    if !explicit.contains("vocab_size") {
        cfg.vocab_size = corpus.vocab_size;
    }
    if !explicit.contains("d_in") {
        if let Some(d) = corpus.d_in() {
            cfg.d_in = d;
        }
    }
    if cfg.vocab_size != corpus.vocab_size {
        return Err(Error::Config(format!(
            "vocab_size {} does not match the corpus ({})",
            cfg.vocab_size, corpus.vocab_size
        )));
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let grammar = ToyGrammar::new(GrammarConfig {
        vocab_size: a.vocab,
        d_in: a.d_in,
        duration_range: (a.min_dur, a.max_dur),
        noise_sigma: a.sigma,
        sentence_len_range: (a.min_len, a.max_len),
        seed: a.seed,
    })?;
    fs::create_dir_all(&a.out)?;
    let sets = [
        ("train", Split::Train, 0, a.train),
        ("dev", Split::Train, a.train, a.dev),
        ("test", Split::Test, 0, a.test),
    ];
    for (name, split, from, n) in sets {
        let corpus = Corpus {
            vocab_size: a.vocab,
            samples: (from..from + n).map(|i| grammar.sample(split, i)).collect(),
        };
        let path = a.out.join(format!("{name}.mstc"));
        save_corpus(&path, &corpus)?;
        println!("wrote {} ({n} samples)", path.display());
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let train_set = load_corpus(&a.train)?;
    let dev_set = a.dev.as_deref().map(load_corpus).transpose()?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let mut t = Trainer::from_checkpoint(&Checkpoint::load(path)?)?;
            if let Some(e) = &a.cfg.epochs {
                t.network.config.set("epochs", e)?;
            }
            t
        }
        None => {
            let (mut cfg, explicit) = a.cfg.resolve(ModelConfig::default())?;
            fit_to_corpus(&mut cfg, &explicit, &train_set)?;
            Trainer::new(cfg)?
        }
    };
    for c in std::iter::once(&train_set).chain(&dev_set) {
        if c.vocab_size != trainer.config().vocab_size {
            return Err(Error::Config(format!(
                "model has {} glosses, corpus has {}",
                trainer.config().vocab_size,
                c.vocab_size
            )));
        }
    }
    fs::create_dir_all(&a.out)?;
    let mut log = OpenOptions::new()
        .create(true)
        .append(a.resume.is_some())
        .write(true)
        .truncate(a.resume.is_none())
        .open(a.out.join("metrics.tsv"))?;
    let dev = dev_set.as_ref().map_or(&[][..], |c| &c.samples[..]);
    let best_path = a.out.join("best.ckpt");
    while trainer.epoch < trainer.config().epochs {
        let before = trainer.best_dev_wer;
        let record = trainer.run_epoch(&train_set.samples, dev)?;
        writeln!(log, "{record}")?;
        println!("{record}");
        if trainer.best_dev_wer < before {
            trainer.checkpoint().save(&best_path)?;
        }
        trainer.checkpoint().save(a.out.join("last.ckpt"))?;
    }
    if !best_path.exists() {
        trainer.checkpoint().save(&best_path)?;
    }
    if trainer.skipped > 0 {
        eprintln!("skipped {} infeasible samples", trainer.skipped);
    }
    Ok(())
}

fn load_network(path: &Path) -> Result<Network> {
    let ckpt = Checkpoint::load(path)?;
    Network::from_params(ckpt.config, ckpt.params)
}

fn eval(a: EvalArgs) -> Result<()> {
    let net = load_network(&a.checkpoint)?;
    let corpus = load_corpus(&a.corpus)?;
    let report = evaluate(&net, &corpus, a.decode.width(&net.config))?;
    print!("{report}");
    Ok(())
}

fn decode_one(a: DecodeArgs) -> Result<()> {
    let net = load_network(&a.checkpoint)?;
    let corpus = load_corpus(&a.corpus)?;
    let sample = corpus.samples.get(a.index).ok_or_else(|| {
        Error::Data(format!("index {} out of range for {} samples", a.index, corpus.samples.len()))
    })?;
    let hyp = decode(&net, &sample.features, a.decode.width(&net.config))?;
    println!("ref\t{}", gloss_text(&sample.target));
    println!("hyp\t{}", gloss_text(&hyp));
    Ok(())
}

fn grad_check(a: GradcheckArgs) -> Result<()> {
    let (cfg, _) = a.cfg.resolve(ModelConfig::tiny())?;
    let report = gradcheck(&cfg, a.tolerance)?;
    println!("{report}");
    if report.passed() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("gradients disagree beyond tolerance {}", a.tolerance)))
    }
}

fn run_ablation(a: AblateArgs) -> Result<()> {
    let axis = AblationAxis::parse(&a.axis)?;
    let (train_set, dev_set, test_set) = (load_corpus(&a.train)?, load_corpus(&a.dev)?, load_corpus(&a.test)?);
    let (mut cfg, explicit) = a.cfg.resolve(ModelConfig::default())?;
    fit_to_corpus(&mut cfg, &explicit, &train_set)?;
    let values = if a.values.is_empty() { axis.default_values() } else { a.values };
    print!("{}", ablate(&cfg, axis, &values, &train_set, &dev_set, &test_set));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Decode(a) => decode_one(a),
        Command::Gradcheck(a) => grad_check(a),
        Command::Ablate(a) => run_ablation(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
