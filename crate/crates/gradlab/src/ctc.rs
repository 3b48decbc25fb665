//! CTC loss and its analytic gradient with respect to per-frame logits.
//!
//! All lattice computation is carried out in log space. The blank symbol is
//! the last index of the extended alphabet: for an alphabet of size `A`,
//! tokens live in `[0, A)` and blank is `A`.

use crate::error::{GradLabError, Result};
use crate::math::{log_softmax_rows, logaddexp, logsumexp};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// A transcript over the alphabet; blank is never a member.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSeq {
    pub tokens: Vec<usize>,
}

impl LabelSeq {
    pub fn new(tokens: Vec<usize>) -> Self {
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Minimum number of frames any CTC path needs: one frame per label plus
    /// one separating blank per consecutive repeat.
    pub fn min_frames(&self) -> usize {
        let repeats = self.tokens.windows(2).filter(|w| w[0] == w[1]).count();
        self.len() + repeats
    }
}

/// Blank-extended form of a transcript: blank, y1, blank, y2, ..., blank.
/// `blank` must be the alphabet size.
pub fn extend_labels(y: &LabelSeq, blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * y.len() + 1);
    ext.push(blank);
    for &t in &y.tokens {
        ext.push(t);
        ext.push(blank);
    }
    ext
}

/// Loss, gradient and lattices from one forward-backward pass.
#[derive(Clone, Debug)]
pub struct CtcResult {
    /// -ln p(y|x)
    pub loss: f64,
    /// d loss / d logits, softmax composed in. Shape T x (A+1).
    pub grad_logits: Array2<f64>,
    /// (2S+1) x T forward lattice in log space.
    pub log_alpha: Array2<f64>,
    /// (2S+1) x T backward lattice in log space.
    pub log_beta: Array2<f64>,
}

fn check_feasible(frames: usize, alphabet_size: usize, y: &LabelSeq) -> Result<()> {
    if y.tokens.iter().any(|&t| t >= alphabet_size) {
        return Err(GradLabError::InvalidConfig(format!(
            "token out of range for alphabet size {alphabet_size}"
        )));
    }
    let required = y.min_frames();
    if frames < required {
        return Err(GradLabError::InfeasibleAlignment { required, frames });
    }
    Ok(())
}

/// CTC loss and gradient via the forward-backward algorithm.
///
/// `logits` is T x (alphabet_size + 1); the last column scores blank.
pub fn ctc_loss_grad(logits: &Array2<f64>, y: &LabelSeq, alphabet_size: usize) -> Result<CtcResult> {
    let frames = logits.nrows();
    if logits.ncols() != alphabet_size + 1 {
        return Err(GradLabError::ShapeMismatch {
            expected: format!("T x {}", alphabet_size + 1),
            got: format!("{} x {}", frames, logits.ncols()),
        });
    }
    check_feasible(frames, alphabet_size, y)?;

    let blank = alphabet_size;
    let ext = extend_labels(y, blank);
    let r = ext.len();
    let lp = log_softmax_rows(logits); // T x (A+1)

    // Skip transition s-2 -> s allowed when ext[s] is a label differing from ext[s-2].
    let can_skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let mut la = Array2::from_elem((r, frames), f64::NEG_INFINITY);
    la[[0, 0]] = lp[[0, ext[0]]];
    if r > 1 {
        la[[1, 0]] = lp[[0, ext[1]]];
    }
    for t in 1..frames {
        for s in 0..r {
            let mut acc = la[[s, t - 1]];
            if s >= 1 {
                acc = logaddexp(acc, la[[s - 1, t - 1]]);
            }
            if can_skip(s) {
                acc = logaddexp(acc, la[[s - 2, t - 1]]);
            }
            la[[s, t]] = acc + lp[[t, ext[s]]];
        }
    }

    let log_p = if r > 1 {
        logaddexp(la[[r - 1, frames - 1]], la[[r - 2, frames - 1]])
    } else {
        la[[r - 1, frames - 1]]
    };
    if log_p == f64::NEG_INFINITY {
        // Feasibility was checked above; unreachable for finite logits.
        return Err(GradLabError::InfeasibleAlignment { required: y.min_frames(), frames });
    }

    // Backward lattice, Graves convention: beta includes the emission at t,
    // so alpha[s][t] * beta[s][t] / p(ext[s] at t) sums paths through (s, t).
    let mut lb = Array2::from_elem((r, frames), f64::NEG_INFINITY);
    lb[[r - 1, frames - 1]] = lp[[frames - 1, ext[r - 1]]];
    if r > 1 {
        lb[[r - 2, frames - 1]] = lp[[frames - 1, ext[r - 2]]];
    }
    for t in (0..frames - 1).rev() {
        for s in 0..r {
            let mut acc = lb[[s, t + 1]];
            if s + 1 < r {
                acc = logaddexp(acc, lb[[s + 1, t + 1]]);
            }
            if s + 2 < r && can_skip(s + 2) {
                acc = logaddexp(acc, lb[[s + 2, t + 1]]);
            }
            lb[[s, t]] = acc + lp[[t, ext[s]]];
        }
    }

    // grad[t][k] = softmax[t][k] - exp(lse_{s: ext[s]=k}(la + lb) - log_p - lp[t][k])
    let mut grad = lp.mapv(f64::exp);
    let mut occupancy = vec![f64::NEG_INFINITY; alphabet_size + 1];
    for t in 0..frames {
        occupancy.iter_mut().for_each(|v| *v = f64::NEG_INFINITY);
        for s in 0..r {
            let k = ext[s];
            occupancy[k] = logaddexp(occupancy[k], la[[s, t]] + lb[[s, t]]);
        }
        for k in 0..=alphabet_size {
            if occupancy[k] > f64::NEG_INFINITY {
                grad[[t, k]] -= (occupancy[k] - log_p - lp[[t, k]]).exp();
            }
        }
    }

    Ok(CtcResult { loss: -log_p, grad_logits: grad, log_alpha: la, log_beta: lb })
}

/// Collapse a CTC path: merge repeats, then drop blanks.
pub fn collapse_path(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &s in path {
        if Some(s) != prev && s != blank {
            out.push(s);
        }
        prev = Some(s);
    }
    out
}

pub const BRUTE_FORCE_MAX_FRAMES: usize = 8;
pub const BRUTE_FORCE_MAX_ALPHABET: usize = 4;

/// p(y|x) by explicit enumeration of all (A+1)^T paths. Exponential-time
/// oracle for testing the forward-backward implementation.
pub fn ctc_brute_force(logits: &Array2<f64>, y: &LabelSeq, alphabet_size: usize) -> Result<f64> {
    let frames = logits.nrows();
    let symbols = alphabet_size + 1;
    if frames > BRUTE_FORCE_MAX_FRAMES || alphabet_size > BRUTE_FORCE_MAX_ALPHABET {
        return Err(GradLabError::EnumerationTooLarge { frames, symbols });
    }
    if logits.ncols() != symbols {
        return Err(GradLabError::ShapeMismatch {
            expected: format!("T x {symbols}"),
            got: format!("{} x {}", frames, logits.ncols()),
        });
    }
    let lp = log_softmax_rows(logits);
    let blank = alphabet_size;
    let mut path = vec![0usize; frames];
    let mut log_terms = Vec::new();
    enumerate(&lp, 0, 0.0, &mut path, blank, &y.tokens, &mut log_terms);
    Ok(logsumexp(&log_terms).exp())
}

fn enumerate(
    lp: &Array2<f64>,
    t: usize,
    log_prob: f64,
    path: &mut [usize],
    blank: usize,
    target: &[usize],
    log_terms: &mut Vec<f64>,
) {
    if t == path.len() {
        if collapse_path(path, blank) == target {
            log_terms.push(log_prob);
        }
        return;
    }
    for s in 0..=blank {
        path[t] = s;
        enumerate(lp, t + 1, log_prob + lp[[t, s]], path, blank, target, log_terms);
    }
}
