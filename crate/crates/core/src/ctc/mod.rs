//! Connectionist temporal classification: the collapse mapping, the loss
//! (log-space forward-backward), the multi-level loss sum and decoders.
//!
//! Class layout: ids `0..V` are glosses and the blank is id `V`, the last
//! column of every logit matrix.

mod decode;
mod loss;

pub use decode::{beam_decode, beam_search, greedy_decode, BeamHypothesis};
pub use loss::{ctc_loss, ctc_nll, multi_level_ctc, LevelLoss, MultiLevelLoss};

use crate::tensor::Tensor;

/// Ground-truth gloss ids, none equal to the blank.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GlossSequence(pub Vec<usize>);

impl GlossSequence {
    pub fn new(labels: Vec<usize>) -> Self {
        Self(labels)
    }

    pub fn labels(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Adjacent equal pairs; each needs a blank frame between its members.
    pub fn repeats(&self) -> usize {
        self.0.windows(2).filter(|w| w[0] == w[1]).count()
    }

    /// Fewest frames any alignment of this sequence can have.
    pub fn min_frames(&self) -> usize {
        self.len() + self.repeats()
    }
}

impl From<Vec<usize>> for GlossSequence {
    fn from(v: Vec<usize>) -> Self {
        Self(v)
    }
}

/// A frame-level labeling over glosses plus blank.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alignment(pub Vec<usize>);

/// Per-frame class scores of one gloss level. Rows at or beyond `valid_len`
/// come from padding and are ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelLogits {
    /// `T_level×(V+1)` unnormalized scores.
    pub scores: Tensor,
    pub valid_len: usize,
}

impl LevelLogits {
    pub fn new(scores: Tensor, valid_len: usize) -> Self {
        debug_assert!(valid_len <= scores.rows());
        Self { scores, valid_len }
    }

    /// All rows valid.
    pub fn full(scores: Tensor) -> Self {
        let valid_len = scores.rows();
        Self { scores, valid_len }
    }

    pub fn blank(&self) -> usize {
        self.scores.cols() - 1
    }

    pub fn vocab_size(&self) -> usize {
        self.scores.cols() - 1
    }

    /// Row-wise log-softmax over the valid rows.
    pub fn log_probs(&self) -> Vec<Vec<f64>> {
        (0..self.valid_len)
            .map(|t| {
                let row = self.scores.row(t);
                let lse = crate::tensor::logsumexp(row);
                row.iter().map(|v| v - lse).collect()
            })
            .collect()
    }
}

/// Merges runs of repeated ids, then drops blanks.
pub fn collapse(path: &Alignment, blank: usize) -> GlossSequence {
    let mut out = Vec::new();
    let mut prev = None;
    for &id in &path.0 {
        if Some(id) != prev && id != blank {
            out.push(id);
        }
        prev = Some(id);
    }
    GlossSequence(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collapse_worked_example() {
        // d=0, o=1, g=2, blank=3. A blank between two g's keeps both, so
        // "-dd-og-g-" spells "dogg"; "-dd-ogg-" spells "dog".
        let b = 3;
        let path = Alignment(vec![b, 0, 0, b, 1, 2, b, 2, b]);
        assert_eq!(collapse(&path, b).0, vec![0, 1, 2, 2]);
        let path = Alignment(vec![b, 0, 0, b, 1, 2, 2, b]);
        assert_eq!(collapse(&path, b).0, vec![0, 1, 2]);
    }

    #[test]
    fn collapse_edge_cases() {
        assert!(collapse(&Alignment(vec![4, 4, 4]), 4).is_empty());
        assert_eq!(collapse(&Alignment(vec![1, 1, 1]), 4).0, vec![1]);
        assert_eq!(collapse(&Alignment(vec![1, 4, 1]), 4).0, vec![1, 1]);
        assert!(collapse(&Alignment(vec![]), 4).is_empty());
    }

    #[test]
    fn min_frames_counts_repeats() {
        assert_eq!(GlossSequence(vec![0, 0, 1]).min_frames(), 4);
        assert_eq!(GlossSequence(vec![]).min_frames(), 0);
    }
}
