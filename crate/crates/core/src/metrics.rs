//! Word error rate with an insertion/deletion/substitution breakdown.
//!
//! The breakdown comes from a backtrace through the unit-cost edit-distance
//! table. Where several minimal edit scripts exist, the backtrace (walking
//! from the end of both sequences) prefers a diagonal step (match or
//! substitution), then an insertion, then a deletion.

use std::fmt;

use crate::ctc::GlossSequence;
use crate::error::MetricsError;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EditBreakdown {
    pub ins: usize,
    pub del: usize,
    pub sub: usize,
    pub total_ref: usize,
    /// Percent; exceeds 100 when the hypothesis needs more edits than the
    /// reference has words.
    pub wer: f64,
}

impl EditBreakdown {
    pub fn edits(&self) -> usize {
        self.ins + self.del + self.sub
    }

    fn from_counts(ins: usize, del: usize, sub: usize, total_ref: usize) -> Self {
        Self {
            ins,
            del,
            sub,
            total_ref,
            wer: 100.0 * (ins + del + sub) as f64 / total_ref as f64,
        }
    }
}

impl fmt::Display for EditBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "WER {:.2}% (sub {}, del {}, ins {}, ref {})",
            self.wer, self.sub, self.del, self.ins, self.total_ref
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EditOp {
    Match(usize),
    Sub { reference: usize, hypothesis: usize },
    Ins(usize),
    Del(usize),
}

fn table(r: &[usize], h: &[usize]) -> Vec<Vec<usize>> {
    let mut d = vec![vec![0usize; h.len() + 1]; r.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=h.len() {
        d[0][j] = j;
    }
    for i in 1..=r.len() {
        for j in 1..=h.len() {
            let diag = d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]);
            d[i][j] = diag.min(d[i][j - 1] + 1).min(d[i - 1][j] + 1);
        }
    }
    d
}

/// Unit-cost Levenshtein distance.
pub fn edit_distance(r: &[usize], h: &[usize]) -> usize {
    table(r, h)[r.len()][h.len()]
}

/// A minimal edit script turning `reference` into `hypothesis`, in sequence
/// order.
pub fn align(reference: &[usize], hypothesis: &[usize]) -> Vec<EditOp> {
    let d = table(reference, hypothesis);
    let (mut i, mut j) = (reference.len(), hypothesis.len());
    let mut ops = Vec::with_capacity(i.max(j));
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hypothesis[j - 1];
            if d[i][j] == d[i - 1][j - 1] + usize::from(!same) {
                ops.push(if same {
                    EditOp::Match(reference[i - 1])
                } else {
                    EditOp::Sub {
                        reference: reference[i - 1],
                        hypothesis: hypothesis[j - 1],
                    }
                });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && d[i][j] == d[i][j - 1] + 1 {
            ops.push(EditOp::Ins(hypothesis[j - 1]));
            j -= 1;
        } else {
            ops.push(EditOp::Del(reference[i - 1]));
            i -= 1;
        }
    }
    ops.reverse();
    ops
}

fn counts(ops: &[EditOp]) -> (usize, usize, usize) {
    ops.iter().fold((0, 0, 0), |(i, d, s), op| match op {
        EditOp::Ins(_) => (i + 1, d, s),
        EditOp::Del(_) => (i, d + 1, s),
        EditOp::Sub { .. } => (i, d, s + 1),
        EditOp::Match(_) => (i, d, s),
    })
}

pub fn wer(reference: &GlossSequence, hypothesis: &GlossSequence) -> Result<EditBreakdown, MetricsError> {
    if reference.is_empty() {
        return Err(MetricsError::EmptyReference);
    }
    let (ins, del, sub) = counts(&align(reference.labels(), hypothesis.labels()));
    Ok(EditBreakdown::from_counts(ins, del, sub, reference.len()))
}

/// Sums edits and reference lengths over all pairs before dividing.
pub fn corpus_wer<'a, I>(pairs: I) -> Result<EditBreakdown, MetricsError>
where
    I: IntoIterator<Item = (&'a GlossSequence, &'a GlossSequence)>,
{
    let mut n = 0;
    let (mut ins, mut del, mut sub, mut total) = (0, 0, 0, 0);
    for (r, h) in pairs {
        n += 1;
        let (i, d, s) = counts(&align(r.labels(), h.labels()));
        ins += i;
        del += d;
        sub += s;
        total += r.len();
    }
    if n == 0 {
        return Err(MetricsError::EmptyCorpus);
    }
    if total == 0 {
        return Err(MetricsError::EmptyReference);
    }
    Ok(EditBreakdown::from_counts(ins, del, sub, total))
}

/// Renders an edit script: matches as-is, `(ref->hyp)` for substitutions,
/// `+hyp` for insertions and `-ref` for deletions.
pub fn markup(ops: &[EditOp], name: impl Fn(usize) -> String) -> String {
    ops.iter()
        .map(|op| match *op {
            EditOp::Match(x) => name(x),
            EditOp::Sub { reference, hypothesis } => format!("({}->{})", name(reference), name(hypothesis)),
            EditOp::Ins(x) => format!("+{}", name(x)),
            EditOp::Del(x) => format!("-{}", name(x)),
        })
        .collect::<Vec<_>>()
        .join(" ")
}
