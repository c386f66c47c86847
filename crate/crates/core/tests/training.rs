use mstnet::checkpoint::Checkpoint;
use mstnet::config::EncoderKind;
use mstnet::ctc::GlossSequence;
use mstnet::frame_encoder::FeatureSequence;
use mstnet::tensor::Tensor;
use mstnet::train::{evaluate, gradcheck, EpochRecord, Trainer};
use mstnet::{Corpus, Error, GrammarConfig, ModelConfig, Network, Sample, Split, ToyGrammar};

fn small_config() -> ModelConfig {
    ModelConfig {
        c1: 8,
        c2: 16,
        heads: 2,
        num_scales: 2,
        encoder_layers: 1,
        batch_size: 2,
        epochs: 4,
        ..ModelConfig::default()
    }
}

fn corpus(n: usize, split: Split) -> Vec<Sample> {
    ToyGrammar::new(GrammarConfig::default()).unwrap().generate(n, split)
}

fn bits(log: &[EpochRecord]) -> Vec<[u64; 3]> {
    log.iter()
        .map(|r| [r.train_loss.to_bits(), r.dev_wer.to_bits(), r.lr.to_bits()])
        .collect()
}

#[test]
fn full_scale_schedule() {
    let cfg = ModelConfig::full_scale();
    assert_eq!(cfg.lr_at_epoch(0), 1e-4);
    assert_eq!(cfg.lr_at_epoch(39), 1e-4);
    assert!((cfg.lr_at_epoch(40) - 2e-5).abs() < 1e-20);
    assert!((cfg.lr_at_epoch(49) - 2e-5).abs() < 1e-20);
    assert!((cfg.lr_at_epoch(50) - 4e-6).abs() < 1e-20);
    assert!((cfg.lr_at_epoch(59) - 4e-6).abs() < 1e-20);
}

#[test]
fn overfits_a_single_sample() {
    let data = corpus(1, Split::Train);
    // 200 steps at a constant rate; the 40/50-epoch drops belong to full runs.
    let cfg = ModelConfig {
        batch_size: 1,
        lr_drops: vec![],
        ..ModelConfig::default()
    };
    let mut trainer = Trainer::new(cfg).unwrap();
    let initial = trainer.network.loss(&data[0].features, &data[0].target).unwrap();
    trainer.run_until(&data, &[], 200).unwrap();
    assert_eq!(trainer.adam.step, 200);
    let last = trainer.network.loss(&data[0].features, &data[0].target).unwrap();
    assert!(last <= 0.1 * initial, "{initial} -> {last}");
}

#[test]
fn identical_seeds_give_identical_logs() {
    let (tr, dev) = (corpus(8, Split::Train), corpus(4, Split::Test));
    let run = || {
        let mut t = Trainer::new(small_config()).unwrap();
        t.run(&tr, &dev).unwrap();
        (bits(&t.log), t.network.params)
    };
    assert_eq!(run(), run());
}

#[test]
fn resume_from_checkpoint_is_bitwise_equivalent() {
    let (tr, dev) = (corpus(8, Split::Train), corpus(4, Split::Test));
    let mut straight = Trainer::new(small_config()).unwrap();
    straight.run(&tr, &dev).unwrap();

    let mut first = Trainer::new(small_config()).unwrap();
    first.run_until(&tr, &dev, 2).unwrap();
    let bytes = first.checkpoint().to_bytes();
    let mut second = Trainer::from_checkpoint(&Checkpoint::read(&mut bytes.as_slice()).unwrap()).unwrap();
    second.run(&tr, &dev).unwrap();

    let mut resumed = bits(&first.log);
    resumed.extend(bits(&second.log));
    assert_eq!(bits(&straight.log), resumed);
    assert_eq!(straight.checkpoint().to_bytes(), second.checkpoint().to_bytes());
}

#[test]
fn checkpoint_round_trip() {
    let tr = corpus(4, Split::Train);
    let mut t = Trainer::new(small_config()).unwrap();
    t.run_until(&tr, &[], 1).unwrap();
    let ckpt = t.checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.to_bytes(), ckpt.to_bytes());
    assert_eq!(&ckpt.to_bytes()[..4], b"MSTN");

    let a = Network::from_params(ckpt.config.clone(), ckpt.params.clone()).unwrap();
    let b = Network::from_params(loaded.config.clone(), loaded.params).unwrap();
    for s in &tr {
        let (x, y) = (a.decode_logits(&s.features).unwrap(), b.decode_logits(&s.features).unwrap());
        assert_eq!(x, y);
    }
    let mut bytes = ckpt.to_bytes();
    bytes[4] = 9;
    assert!(matches!(Checkpoint::read(&mut bytes.as_slice()), Err(Error::Data(_))));
}

#[test]
fn infeasible_samples_are_skipped_and_counted() {
    let mut data = corpus(3, Split::Train);
    let rows = vec![vec![0.0; 16]; 4];
    data.push(Sample {
        features: FeatureSequence::padded(&rows, 16, 4, 99).unwrap(),
        target: GlossSequence(vec![1, 2, 3, 4, 5]),
        durations: vec![4],
    });
    let mut t = Trainer::new(ModelConfig {
        temporal_aug: 0.0,
        ..small_config()
    })
    .unwrap();
    t.run_until(&data, &[], 1).unwrap();
    assert_eq!(t.skipped, 1);
}

#[test]
fn non_finite_loss_aborts_with_batch_dump() {
    let data = corpus(4, Split::Train);
    let mut t = Trainer::new(small_config()).unwrap();
    t.network.params.tensors_mut()[0].data_mut()[0] = f64::NAN;
    match t.run_epoch(&data, &[]) {
        Err(e @ Error::Numeric(_)) => {
            let msg = e.to_string();
            assert!(msg.contains("batch") && msg.contains("sample"), "{msg}");
            assert_eq!(e.exit_code(), 4);
        }
        other => panic!("expected a numeric error, got {other:?}"),
    }
}

#[test]
fn gradcheck_harness() {
    let report = gradcheck(&ModelConfig::tiny(), 1e-4).unwrap();
    assert!(report.passed(), "{report}");
    let groups: Vec<&str> = report.groups.iter().map(|g| g.group.as_str()).collect();
    assert_eq!(groups, ["embed", "fc0", "fc1", "mst0", "mst1", "enc0", "cls0", "cls1", "cls2", "cls3"]);

    let stopped = gradcheck(&ModelConfig { grad_stop_p: 1.0, ..ModelConfig::tiny() }, 1e-4).unwrap();
    assert!(stopped.passed());
    let embed = &stopped.groups[0];
    assert!(embed.exempt && embed.max_rel_error == 0.0);

    assert!(!gradcheck(&ModelConfig::tiny(), 0.0).unwrap().passed());
}

/// A hand-built network that reads one-hot gloss frames: identity embedding
/// and FC layers, MST blocks that average-pool by four, and a last-level
/// classifier that scores each gloss by its share of the window.
fn oracle_network(vocab: usize) -> Network {
    let cfg = ModelConfig {
        d_in: vocab,
        c1: vocab,
        c2: vocab,
        heads: 1,
        vocab_size: vocab,
        encoder: EncoderKind::None,
        ..ModelConfig::default()
    };
    let mut net = Network::new(cfg).unwrap();
    let c = vocab;
    let eye = |n: usize, m: usize, s: f64| {
        Tensor::new(vec![n, m], (0..n * m).map(|i| if i / m == i % m { s } else { 0.0 }).collect()).unwrap()
    };
    let n = net.config.num_scales;
    let names: Vec<String> = net.params.iter().map(|(_, name, _)| name.to_string()).collect();
    for name in names {
        let id = net.params.find(&name).unwrap();
        let shape = net.params.get(id).shape().to_vec();
        let value = if name.ends_with(".bias") {
            let mut b = Tensor::zeros(&shape);
            if name == "cls3.bias" {
                b.data_mut()[vocab] = 1.0;
            }
            b
        } else if name.starts_with("embed") || name.starts_with("fc") {
            eye(c, c, 1.0)
        } else if name.starts_with("cls") {
            eye(c, c + 1, 10.0)
        } else if name.contains(".conv") {
            let k = shape[2];
            Tensor::new(shape.clone(), (0..c * c * k).map(|i| {
                let (o, rest) = (i / (c * k), i % (c * k));
                if rest / k == o && rest % k == (k - 1) / 2 { 1.0 } else { 0.0 }
            }).collect()).unwrap()
        } else if name.contains(".fusion") {
            Tensor::new(shape.clone(), (0..c * c * n * 2).map(|i| {
                let (o, inp) = (i / (c * n * 2), (i / (n * 2)) % c);
                if o == inp { 1.0 / (2 * n) as f64 } else { 0.0 }
            }).collect()).unwrap()
        } else {
            panic!("unexpected parameter {name}");
        };
        *net.params.get_mut(id) = value;
    }
    net
}

fn oracle_corpus(vocab: usize) -> Corpus {
    let mut grammar = ToyGrammar::new(GrammarConfig {
        vocab_size: vocab,
        d_in: vocab,
        noise_sigma: 0.0,
        duration_range: (10, 12),
        ..GrammarConfig::default()
    })
    .unwrap();
    for (gloss, proto) in grammar.prototypes.iter_mut().enumerate() {
        let rows = proto.rows();
        *proto = Tensor::new(vec![rows, vocab], (0..rows * vocab).map(|i| f64::from(u8::from(i % vocab == gloss))).collect()).unwrap();
    }
    let samples = grammar
        .generate(60, Split::Test)
        .into_iter()
        .filter(|s| s.target.repeats() == 0)
        .collect();
    Corpus { vocab_size: vocab, samples }
}

#[test]
fn constructed_oracle_model_scores_zero_wer() {
    let (net, corpus) = (oracle_network(5), oracle_corpus(5));
    assert!(corpus.samples.len() > 20);
    for beam in [0, 1, 10] {
        let report = evaluate(&net, &corpus, beam).unwrap();
        assert_eq!(report.corpus.wer, 0.0, "beam {beam}: {report}");
    }
}

#[test]
fn evaluation_reports_and_is_repeatable() {
    let (net, mut corpus) = (oracle_network(5), oracle_corpus(5));
    corpus.samples[0].target = GlossSequence(vec![0, 1, 2, 3, 4, 0, 1]);
    let a = evaluate(&net, &corpus, 10).unwrap();
    let b = evaluate(&net, &corpus, 10).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.samples.len(), corpus.samples.len());
    assert!(a.samples.iter().enumerate().all(|(i, s)| s.index == i));
    assert!(a.samples[0].breakdown.unwrap().edits() > 0);
    let text = a.to_string();
    assert!(text.lines().next().unwrap().contains("sub=") && text.contains("del=") && text.contains("ins="));

    let greedy = evaluate(&net, &corpus, 0).unwrap();
    let width_one = evaluate(&net, &corpus, 1).unwrap();
    assert_eq!(greedy, width_one);

    corpus.vocab_size = 7;
    assert!(matches!(evaluate(&net, &corpus, 10), Err(Error::Config(_))));
}
