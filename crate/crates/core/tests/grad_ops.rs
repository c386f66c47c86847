mod common;

use common::{max_grad_error, random_tensor};
use mstnet::config::ModelConfig;
use mstnet::ctc::{ctc_loss, GlossSequence};
use mstnet::frame_encoder::FrameEncoder;
use mstnet::mst::MstBlock;
use mstnet::params::ParamStore;
use mstnet::rng::Rng;
use mstnet::tensor::{Graph, Var};
use mstnet::transformer::TransformerEncoder;
use mstnet::Tensor;

const TOL: f64 = 1e-4;
const INSTANCES: u64 = 5;

fn check(name: &str, shapes: &[&[usize]], build: impl Fn(&mut Graph, &[Var]) -> Var + Copy) {
    check_with(name, shapes, &build);
}

fn check_with(name: &str, shapes: &[&[usize]], build: &dyn Fn(&mut Graph, &[Var]) -> Var) {
    for seed in 0..INSTANCES {
        let mut rng = Rng::new(1000 + seed);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random_tensor(&mut rng, s, 1.0)).collect();
        let err = max_grad_error(&inputs, seed, build);
        assert!(err < TOL, "{name} instance {seed}: relative error {err:e}");
    }
}

#[test]
fn elementwise_ops() {
    check("add", &[&[3, 4], &[3, 4]], |g, v| g.add(v[0], v[1]).unwrap());
    check("mul", &[&[3, 4], &[3, 4]], |g, v| g.mul(v[0], v[1]).unwrap());
    check("scale", &[&[5]], |g, v| g.scale(v[0], -1.7).unwrap());
    check("sum", &[&[2, 3, 2]], |g, v| g.sum(v[0]).unwrap());
}

#[test]
fn relu_away_from_the_kink() {
    for seed in 0..INSTANCES {
        let mut rng = Rng::new(seed);
        let mut x = random_tensor(&mut rng, &[4, 5], 1.0);
        for v in x.data_mut() {
            if v.abs() < 0.05 {
                *v += 0.1;
            }
        }
        let err = max_grad_error(&[x], seed, |g, v| g.relu(v[0]).unwrap());
        assert!(err < TOL, "relu: {err:e}");
    }
}

#[test]
fn matrix_ops() {
    check("matmul", &[&[3, 4], &[4, 2]], |g, v| g.matmul(v[0], v[1]).unwrap());
    check("transpose", &[&[3, 5]], |g, v| g.transpose(v[0]).unwrap());
    check("linear", &[&[4, 3], &[3, 5], &[5]], |g, v| g.linear(v[0], v[1], v[2]).unwrap());
    check("reshape", &[&[2, 6]], |g, v| g.reshape(v[0], &[3, 4]).unwrap());
    check("slice_cols", &[&[3, 6]], |g, v| g.slice_cols(v[0], 2, 3).unwrap());
    check("concat_cols", &[&[3, 2], &[3, 4]], |g, v| g.concat_cols(&[v[0], v[1]]).unwrap());
    check("stack_scales", &[&[2, 5], &[2, 5], &[2, 5]], |g, v| g.stack_scales(v).unwrap());
}

#[test]
fn convolutions() {
    for (pad, stride, k) in [(1, 1, 3), (2, 1, 5), (0, 2, 2), (1, 2, 3), (0, 1, 1)] {
        check("conv1d", &[&[2, 7], &[3, 2, k], &[3]], move |g, v| g.conv1d(v[0], v[1], v[2], pad, stride).unwrap());
    }
    check("conv2d", &[&[2, 3, 6], &[3, 2, 3, 2], &[3]], |g, v| g.conv2d(v[0], v[1], v[2], 1, 2).unwrap());
    check("conv2d strided", &[&[2, 4, 7], &[2, 2, 2, 3], &[2]], |g, v| g.conv2d(v[0], v[1], v[2], 2, 2).unwrap());
}

#[test]
fn normalizations() {
    check("softmax_rows", &[&[3, 4]], |g, v| g.softmax_rows(v[0]).unwrap());
    check("log_softmax_rows", &[&[3, 4]], |g, v| g.log_softmax_rows(v[0]).unwrap());
    check("layer_norm", &[&[3, 5], &[5], &[5]], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap());
}

#[test]
fn gradient_stop_rows() {
    check("grad_stop_rows (none)", &[&[4, 3]], |g, v| g.grad_stop_rows(v[0], vec![false; 4]).unwrap());
    let mut g = Graph::new();
    let x = g.leaf(Tensor::filled(&[3, 2], 1.5), true);
    let y = g.grad_stop_rows(x, vec![true, false, true]).unwrap();
    assert_eq!(g.value(y), g.value(x));
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
}

#[test]
fn ctc_loss_gradient() {
    for (t, v, target) in [(4, 3, vec![0, 1]), (6, 2, vec![1, 1]), (5, 4, vec![2, 0, 3]), (3, 2, vec![]), (7, 3, vec![0, 2, 0])] {
        let target = GlossSequence(target);
        check_with("ctc_loss", &[&[t, v + 1]], &|g, x| ctc_loss(g, x[0], t, &target).unwrap());
    }
    // Frames past valid_len get no gradient.
    check("ctc_loss masked", &[&[6, 3]], |g, x| ctc_loss(g, x[0], 4, &GlossSequence(vec![1, 0])).unwrap());
}

/// Composite layers, differentiated with respect to their input.
fn cfg() -> ModelConfig {
    ModelConfig::tiny()
}

#[test]
fn mst_block_input_gradient() {
    for n in 1..=3 {
        let mut store = ParamStore::new();
        let block = MstBlock::new("mst0", 16, n, true, &mut store, &mut Rng::new(n as u64)).unwrap();
        let block = &block;
        let store = &store;
        check("mst block", &[&[8, 16]], move |g, v| {
            let p = store.bind(g);
            block.forward(g, &p, v[0]).unwrap()
        });
    }
}

#[test]
fn encoder_input_gradient() {
    let c = cfg();
    let mut store = ParamStore::new();
    let enc = TransformerEncoder::new(&c, &mut store, &mut Rng::new(3)).unwrap();
    let (enc, store) = (&enc, &store);
    check("transformer encoder", &[&[4, 16]], move |g, v| {
        let p = store.bind(g);
        enc.encode(g, &p, v[0]).unwrap()
    });
}

#[test]
fn frame_encoder_input_gradient() {
    let c = cfg();
    let mut store = ParamStore::new();
    let fe = FrameEncoder::new(&c, &mut store, &mut Rng::new(4));
    let (fe, store) = (&fe, &store);
    check("frame encoder", &[&[8, c.d_in]], move |g, v| {
        let p = store.bind(g);
        fe.encode_frames(g, &p, v[0], None).unwrap().level1
    });
}
