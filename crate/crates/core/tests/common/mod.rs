#![allow(dead_code)]

use std::collections::BTreeMap;

use mstnet::rng::Rng;
use mstnet::tensor::{Graph, Var};
use mstnet::Tensor;

pub fn random_tensor(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.normal()).collect()).unwrap()
}

/// Row-wise log-softmax, written out directly.
pub fn log_softmax(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z = r.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
            r.iter().map(|x| x - z).collect()
        })
        .collect()
}

pub fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.shape()[0]).map(|i| t.row(i).to_vec()).collect()
}

fn lse(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Merge repeats, then drop blanks.
pub fn collapse_path(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != blank {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// Calls `f` with every path of length `t` over `classes` symbols.
pub fn for_each_path(t: usize, classes: usize, mut f: impl FnMut(&[usize])) {
    let mut path = vec![0usize; t];
    loop {
        f(&path);
        let mut i = 0;
        loop {
            if i == t {
                return;
            }
            path[i] += 1;
            if path[i] < classes {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// `ln p(target | frames)` by summing every path that collapses to `target`.
pub fn brute_log_prob(lp: &[Vec<f64>], target: &[usize]) -> f64 {
    let classes = lp.first().map_or(1, |r| r.len());
    let blank = classes - 1;
    let mut terms = Vec::new();
    for_each_path(lp.len(), classes, |path| {
        if collapse_path(path, blank) == target {
            terms.push(path.iter().enumerate().map(|(t, &c)| lp[t][c]).sum());
        }
    });
    lse(&terms)
}

/// Probability of every label sequence, by path enumeration.
pub fn all_sequence_log_probs(lp: &[Vec<f64>]) -> BTreeMap<Vec<usize>, f64> {
    let classes = lp.first().map_or(1, |r| r.len());
    let blank = classes - 1;
    let mut acc: BTreeMap<Vec<usize>, Vec<f64>> = BTreeMap::new();
    for_each_path(lp.len(), classes, |path| {
        let s: f64 = path.iter().enumerate().map(|(t, &c)| lp[t][c]).sum();
        acc.entry(collapse_path(path, blank)).or_default().push(s);
    });
    acc.into_iter().map(|(k, v)| (k, lse(&v))).collect()
}

/// Most probable label sequence; ties go to the lexicographically smallest.
pub fn exhaustive_decode(lp: &[Vec<f64>]) -> (Vec<usize>, f64) {
    all_sequence_log_probs(lp)
        .into_iter()
        .fold((Vec::new(), f64::NEG_INFINITY), |best, (s, p)| if p > best.1 { (s, p) } else { best })
}

/// Analytic gradients of `build` against central differences, for every
/// element of every input. Non-scalar outputs are reduced with fixed random
/// weights. Returns the worst relative error.
pub fn max_grad_error(inputs: &[Tensor], seed: u64, build: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let reduce = |g: &mut Graph, out: Var| -> Var {
        let shape = g.shape(out).to_vec();
        if shape.iter().product::<usize>() == 1 {
            return g.reshape(out, &[1]).unwrap();
        }
        let w = g.constant(random_tensor(&mut Rng::new(seed ^ 0xabcd), &shape, 1.0));
        let prod = g.mul(out, w).unwrap();
        g.sum(prod).unwrap()
    };
    let eval = |inputs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = build(&mut g, &vars);
        let loss = reduce(&mut g, out);
        g.value(loss).data()[0]
    };
    let mut g = Graph::new().with_finite_checks(true);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars);
    let loss = reduce(&mut g, out);
    let grads = g.backward(loss).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v, inputs[k].numel());
        for j in 0..inputs[k].numel() {
            let orig = work[k].data()[j];
            work[k].data_mut()[j] = orig + h;
            let up = eval(&work);
            work[k].data_mut()[j] = orig - h;
            let down = eval(&work);
            work[k].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = (analytic[j] - numeric).abs() / analytic[j].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

/// Edit scripts as move lists built from the end of both sequences:
/// 0 diagonal, 1 insertion, 2 deletion. Returns `(cost, moves)` for every
/// script.
pub fn all_edit_scripts(r: &[usize], h: &[usize]) -> Vec<(usize, Vec<u8>)> {
    fn go(r: &[usize], h: &[usize], i: usize, j: usize, cost: usize, moves: &mut Vec<u8>, out: &mut Vec<(usize, Vec<u8>)>) {
        if i == 0 && j == 0 {
            out.push((cost, moves.clone()));
            return;
        }
        if i > 0 && j > 0 {
            moves.push(0);
            go(r, h, i - 1, j - 1, cost + usize::from(r[i - 1] != h[j - 1]), moves, out);
            moves.pop();
        }
        if j > 0 {
            moves.push(1);
            go(r, h, i, j - 1, cost + 1, moves, out);
            moves.pop();
        }
        if i > 0 {
            moves.push(2);
            go(r, h, i - 1, j, cost + 1, moves, out);
            moves.pop();
        }
    }
    let mut out = Vec::new();
    go(r, h, r.len(), h.len(), 0, &mut Vec::new(), &mut out);
    out
}

/// `(ins, del, sub)` of a move list.
pub fn script_counts(r: &[usize], h: &[usize], moves: &[u8]) -> (usize, usize, usize) {
    let (mut i, mut j) = (r.len(), h.len());
    let (mut ins, mut del, mut sub) = (0, 0, 0);
    for &m in moves {
        match m {
            0 => {
                sub += usize::from(r[i - 1] != h[j - 1]);
                i -= 1;
                j -= 1;
            }
            1 => {
                ins += 1;
                j -= 1;
            }
            _ => {
                del += 1;
                i -= 1;
            }
        }
    }
    (ins, del, sub)
}

/// Brute-force `(distance, ins, del, sub)`: the minimum cost over all
/// scripts, and the counts of the first minimal script in move-priority
/// order.
pub fn brute_edit(r: &[usize], h: &[usize]) -> (usize, (usize, usize, usize), Vec<(usize, usize, usize)>) {
    let scripts = all_edit_scripts(r, h);
    let best = scripts.iter().map(|s| s.0).min().unwrap();
    let mut minimal: Vec<&Vec<u8>> = scripts.iter().filter(|s| s.0 == best).map(|s| &s.1).collect();
    minimal.sort();
    let first = script_counts(r, h, minimal[0]);
    let all = minimal.iter().map(|m| script_counts(r, h, m)).collect();
    (best, first, all)
}

pub fn random_labels(rng: &mut Rng, max_len: usize, vocab: usize) -> Vec<usize> {
    let n = rng.int_inclusive(0, max_len);
    (0..n).map(|_| rng.int_inclusive(0, vocab - 1)).collect()
}
