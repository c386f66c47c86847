use std::cmp::Ordering;
use std::collections::BTreeMap;

use super::{collapse, Alignment, GlossSequence, LevelLogits};

/// Frame-wise argmax (lowest id wins ties) followed by collapse.
pub fn greedy_decode(logits: &LevelLogits) -> GlossSequence {
    let path = (0..logits.valid_len)
        .map(|t| {
            let row = logits.scores.row(t);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    collapse(&Alignment(path), logits.blank())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    pub labels: GlossSequence,
    /// `ln p(labels | frames)` restricted to the alignments the beam kept.
    pub log_prob: f64,
}

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Higher probability first; equal probabilities in lexicographic order of
/// the prefix.
fn rank(a: &(Vec<usize>, f64), b: &(Vec<usize>, f64)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(&b.0))
}

/// CTC prefix beam search. Each prefix carries the log probability of the
/// alignments ending in blank and of those ending in its last label. Returns
/// the surviving beam, best first.
pub fn beam_search(logits: &LevelLogits, beam_width: usize) -> Vec<BeamHypothesis> {
    let width = beam_width.max(1);
    let blank = logits.blank();
    let neg = f64::NEG_INFINITY;
    // prefix -> (ends in blank, ends in label)
    let mut beams: Vec<(Vec<usize>, f64, f64)> = vec![(Vec::new(), 0.0, neg)];
    for lp in logits.log_probs() {
        let mut next: BTreeMap<Vec<usize>, (f64, f64)> = BTreeMap::new();
        for (prefix, pb, pnb) in &beams {
            let total = lse2(*pb, *pnb);
            let entry = next.entry(prefix.clone()).or_insert((neg, neg));
            entry.0 = lse2(entry.0, total + lp[blank]);
            let last = prefix.last().copied();
            for (c, &lpc) in lp.iter().enumerate().take(blank) {
                if Some(c) == last {
                    let e = next.entry(prefix.clone()).or_insert((neg, neg));
                    e.1 = lse2(e.1, pnb + lpc);
                    let mut ext = prefix.clone();
                    ext.push(c);
                    let e = next.entry(ext).or_insert((neg, neg));
                    e.1 = lse2(e.1, pb + lpc);
                } else {
                    let mut ext = prefix.clone();
                    ext.push(c);
                    let e = next.entry(ext).or_insert((neg, neg));
                    e.1 = lse2(e.1, total + lpc);
                }
            }
        }
        let mut scored: Vec<(Vec<usize>, f64)> =
            next.iter().map(|(p, &(b, nb))| (p.clone(), lse2(b, nb))).collect();
        if scored.iter().any(|s| s.1 > neg) {
            scored.retain(|s| s.1 > neg);
        }
        scored.sort_by(rank);
        scored.truncate(width);
        beams = scored
            .into_iter()
            .map(|(p, _)| {
                let (b, nb) = next[&p];
                (p, b, nb)
            })
            .collect();
    }
    let mut out: Vec<(Vec<usize>, f64)> = beams.into_iter().map(|(p, b, nb)| (p, lse2(b, nb))).collect();
    out.sort_by(rank);
    out.into_iter()
        .map(|(p, log_prob)| BeamHypothesis {
            labels: GlossSequence(p),
            log_prob,
        })
        .collect()
}

/// Most probable label sequence found by prefix beam search.
pub fn beam_decode(logits: &LevelLogits, beam_width: usize) -> GlossSequence {
    beam_search(logits, beam_width)
        .into_iter()
        .next()
        .map(|h| h.labels)
        .unwrap_or_default()
}
