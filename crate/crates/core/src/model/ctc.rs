//! Connectionist temporal classification: the forward dynamic program over
//! blank-augmented alignments, built from graph ops so the gradient comes
//! from the same reverse pass as everything else.
//!
//! The recursion runs in the log domain. Unreachable lattice cells are never
//! created, so no `-inf` sentinel values enter the graph; `logaddexp`
//! combines only genuinely reachable predecessors.

use crate::autograd::{Graph, NodeId, Tensor};
use crate::{Error, Result};
use std::collections::HashMap;

/// Log probability that the per-frame distributions `probs` (rows sum to 1,
/// one row per frame, one column per symbol) emit `target` under CTC, as a
/// scalar node.
pub(super) fn forward_log_prob(
    g: &mut Graph,
    probs: NodeId,
    target: &[usize],
    blank: usize,
    utterance: &str,
) -> Result<NodeId> {
    let frames = g.value(probs).shape()[0];
    let vocab = g.value(probs).shape()[1];
    for &t in target {
        if t >= vocab {
            return Err(Error::IndexOutOfRange { index: t, size: vocab });
        }
        if t == blank {
            return Err(Error::Invalid("ctc: target contains BLANK".into()));
        }
    }

    // minimal alignable length: every label plus a blank between repeats
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    let needed = target.len() + repeats;
    if needed > frames {
        return Err(Error::Unalignable {
            utterance: utterance.to_string(),
            needed,
            have: frames,
        });
    }

    // extended label sequence: blank, y1, blank, y2, ..., blank
    let ext: Vec<usize> = {
        let mut e = vec![blank];
        for &y in target {
            e.push(y);
            e.push(blank);
        }
        e
    };
    let s_len = ext.len();

    let mut lp_cache: HashMap<(usize, usize), NodeId> = HashMap::new();
    let mut lp = |g: &mut Graph, t: usize, sym: usize| -> Result<NodeId> {
        if let Some(&n) = lp_cache.get(&(t, sym)) {
            return Ok(n);
        }
        let p = g.pick(probs, t, sym)?;
        let n = g.log(p)?;
        lp_cache.insert((t, sym), n);
        Ok(n)
    };

    // alpha[s] for the current frame; None = unreachable
    let mut alpha: Vec<Option<NodeId>> = vec![None; s_len];
    alpha[0] = Some(lp(g, 0, ext[0])?);
    if s_len > 1 {
        alpha[1] = Some(lp(g, 0, ext[1])?);
    }

    for t in 1..frames {
        let mut next: Vec<Option<NodeId>> = vec![None; s_len];
        for s in 0..s_len {
            // cells that cannot reach the end anymore are dead weight
            if s_len > 2 * (frames - t) + s {
                continue;
            }
            let mut pred = alpha[s];
            if s >= 1 {
                pred = combine(g, pred, alpha[s - 1])?;
            }
            if s >= 2 && ext[s] != blank && ext[s] != ext[s - 2] {
                pred = combine(g, pred, alpha[s - 2])?;
            }
            if let Some(p) = pred {
                let e = lp(g, t, ext[s])?;
                next[s] = Some(g.add(p, e)?);
            }
        }
        alpha = next;
    }

    let last = alpha[s_len - 1];
    let prev = if s_len > 1 { alpha[s_len - 2] } else { None };
    match combine(g, last, prev)? {
        Some(n) => Ok(n),
        None => Err(Error::Unalignable {
            utterance: utterance.to_string(),
            needed,
            have: frames,
        }),
    }
}

fn combine(g: &mut Graph, a: Option<NodeId>, b: Option<NodeId>) -> Result<Option<NodeId>> {
    match (a, b) {
        (Some(x), Some(y)) => Ok(Some(g.logaddexp(x, y)?)),
        (Some(x), None) => Ok(Some(x)),
        (None, Some(y)) => Ok(Some(y)),
        (None, None) => Ok(None),
    }
}

/// CTC forward log probability for explicit per-frame distributions.
///
/// `probs` holds one row per frame over the full symbol set including the
/// blank; used directly by the brute-force oracle tests and by anything that
/// wants CTC scoring without a model.
pub fn ctc_log_prob_from_log_probs(probs: &Tensor, target: &[usize], blank: usize) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.leaf(probs.clone());
    let n = forward_log_prob(&mut g, p, target, blank, "<probe>")?;
    Ok(g.value(n).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_probs(frames: usize, vocab: usize) -> Tensor {
        Tensor::new(
            vec![frames, vocab],
            vec![1.0 / vocab as f64; frames * vocab],
        )
        .unwrap()
    }

    #[test]
    fn single_frame_single_label() {
        // U=1, y=[a]: the only alignment is "a"
        let probs = Tensor::new(vec![1, 3], vec![0.6, 0.3, 0.1]).unwrap();
        let lp = ctc_log_prob_from_log_probs(&probs, &[0], 2).unwrap();
        assert!((lp - 0.6_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_frames_uniform_three_symbols() {
        // U=2, y=[a], uniform over {a, b, blank}: alignments aa, a-, -a
        let probs = uniform_probs(2, 3);
        let lp = ctc_log_prob_from_log_probs(&probs, &[0], 2).unwrap();
        assert!((lp - (1.0_f64 / 3.0).ln()).abs() < 1e-12, "{lp}");
    }

    #[test]
    fn repeated_label_needs_separating_blank() {
        // y=[a,a] needs at least 3 frames
        let probs = uniform_probs(2, 3);
        let err = ctc_log_prob_from_log_probs(&probs, &[0, 0], 2).unwrap_err();
        assert!(err.to_string().contains("target unalignable"), "{err}");

        // U=3: only "a-a" survives
        let probs = uniform_probs(3, 3);
        let lp = ctc_log_prob_from_log_probs(&probs, &[0, 0], 2).unwrap();
        assert!((lp - (1.0_f64 / 27.0).ln()).abs() < 1e-12, "{lp}");
    }

    #[test]
    fn blank_in_target_rejected() {
        let probs = uniform_probs(2, 3);
        assert!(ctc_log_prob_from_log_probs(&probs, &[2], 2).is_err());
    }
}
