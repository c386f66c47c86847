use super::GlossSequence;
use crate::error::{CtcError, TensorError};
use crate::tensor::{Graph, Tensor, Var};

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

/// Negative log-likelihood `-ln p(target | frames)` and its gradient with
/// respect to `log_probs`.
///
/// `log_probs` is `T×C` with rows already log-normalized; the blank is
/// column `C-1`. Only the first `valid_len` rows take part; the gradient of
/// the remaining rows is zero.
pub fn ctc_nll(log_probs: &Tensor, valid_len: usize, target: &[usize]) -> Result<(f64, Vec<f64>), CtcError> {
    let c = log_probs.cols();
    let blank = c - 1;
    if valid_len > log_probs.rows() {
        return Err(TensorError::Shape {
            op: "ctc_loss",
            detail: format!("valid_len {valid_len} exceeds {} rows", log_probs.rows()),
        }
        .into());
    }
    if let Some(&label) = target.iter().find(|&&l| l >= blank) {
        return Err(CtcError::BadLabel {
            label,
            classes: c,
            blank,
        });
    }
    let required = GlossSequence(target.to_vec()).min_frames();
    if valid_len < required {
        return Err(CtcError::Infeasible {
            target_len: target.len(),
            required,
            available: valid_len,
        });
    }
    let mut grad = vec![0.0; log_probs.numel()];
    if valid_len == 0 {
        return Ok((0.0, grad));
    }

    let s_len = 2 * target.len() + 1;
    let ext: Vec<usize> = (0..s_len)
        .map(|s| if s % 2 == 0 { blank } else { target[s / 2] })
        .collect();
    // Skip transition s-2 -> s is allowed onto a label that differs from the
    // label two states back.
    let can_skip: Vec<bool> = (0..s_len)
        .map(|s| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2])
        .collect();
    let lp = |t: usize, k: usize| log_probs.data()[t * c + k];
    let neg = f64::NEG_INFINITY;
    let t_len = valid_len;

    let mut alpha = vec![neg; t_len * s_len];
    alpha[0] = lp(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for t in 1..t_len {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut a = prev[s];
            if s >= 1 {
                a = lse2(a, prev[s - 1]);
            }
            if can_skip[s] {
                a = lse2(a, prev[s - 2]);
            }
            cur[s] = if a == neg { neg } else { a + lp(t, ext[s]) };
        }
    }

    let mut beta = vec![neg; t_len * s_len];
    let last = (t_len - 1) * s_len;
    beta[last + s_len - 1] = lp(t_len - 1, ext[s_len - 1]);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(t_len - 1, ext[s_len - 2]);
    }
    for t in (0..t_len - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * s_len);
        let cur = &mut cur[t * s_len..];
        for s in 0..s_len {
            let mut b = next[s];
            if s + 1 < s_len {
                b = lse2(b, next[s + 1]);
            }
            if s + 2 < s_len && can_skip[s + 2] {
                b = lse2(b, next[s + 2]);
            }
            cur[s] = if b == neg { neg } else { b + lp(t, ext[s]) };
        }
    }

    let end = &alpha[last..];
    let log_like = if s_len > 1 {
        lse2(end[s_len - 1], end[s_len - 2])
    } else {
        end[0]
    };
    if !log_like.is_finite() {
        return Err(TensorError::NonFinite { op: "ctc_loss" }.into());
    }

    // d(-ln p)/d lp[t][k] = -Σ_{s: ext[s]=k} exp(α_t(s) + β_t(s) - lp[t][k] - ln p)
    for t in 0..t_len {
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            if ab == neg {
                continue;
            }
            let k = ext[s];
            grad[t * c + k] -= (ab - lp(t, k) - log_like).exp();
        }
    }
    Ok((-log_like, grad))
}

/// CTC loss of raw `logits` (`T×(V+1)`) on the graph. Log-softmax is applied
/// here, so the gradient reaches the logits.
pub fn ctc_loss(g: &mut Graph, logits: Var, valid_len: usize, target: &GlossSequence) -> Result<Var, CtcError> {
    let log_probs = g.log_softmax_rows(logits)?;
    let (value, grad) = ctc_nll(g.value(log_probs), valid_len, target.labels())?;
    Ok(g.custom_scalar(log_probs, value, grad)?)
}

/// One gloss level's logits and the number of real frames they cover.
#[derive(Clone, Copy, Debug)]
pub struct LevelLoss {
    pub logits: Var,
    pub valid_len: usize,
}

#[derive(Clone, Debug)]
pub struct MultiLevelLoss {
    pub total: Var,
    /// `(level number starting at 1, loss)` for each retained level.
    pub per_level: Vec<(usize, Var)>,
}

/// Sum of per-level CTC losses over the last `active_levels` levels, added
/// in ascending level order.
pub fn multi_level_ctc(
    g: &mut Graph,
    levels: &[LevelLoss],
    target: &GlossSequence,
    active_levels: usize,
) -> Result<MultiLevelLoss, CtcError> {
    if active_levels == 0 || active_levels > levels.len() {
        return Err(TensorError::Shape {
            op: "multi_level_ctc",
            detail: format!("active_levels {active_levels} not in 1..={}", levels.len()),
        }
        .into());
    }
    let first = levels.len() - active_levels;
    let mut per_level = Vec::with_capacity(active_levels);
    let mut total: Option<Var> = None;
    for (i, lvl) in levels.iter().enumerate().skip(first) {
        let level = i + 1;
        let loss = ctc_loss(g, lvl.logits, lvl.valid_len, target).map_err(|e| CtcError::Level {
            level,
            source: Box::new(e),
        })?;
        per_level.push((level, loss));
        total = Some(match total {
            None => loss,
            Some(acc) => g.add(acc, loss)?,
        });
    }
    Ok(MultiLevelLoss {
        total: total.expect("at least one level"),
        per_level,
    })
}
