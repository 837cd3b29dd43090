//! Greedy and beam-search decoding from inter-domain embeddings, with
//! optional character-LM shallow fusion.
//!
//! The beam is length-synchronous: at every depth all extensions of all
//! active hypotheses compete for `width` slots; an extension ending in EOS
//! takes its slot into the completed pool. With width 1 this degenerates to
//! exactly the greedy argmax walk, and with a width of at least the number
//! of possible sequences nothing is ever pruned, which is what the
//! brute-force equivalence tests rely on.

use crate::lm::{LmParams, LmScorer, LmState};
use crate::model::{DecoderNodes, EmbeddingSequence, ModelParams, Session, BLANK, EOS, SOS};
use crate::{Error, Result};
use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

/// A decoded label sequence with its score bookkeeping.
///
/// `labels` never contain SOS, EOS, or BLANK; `completed` marks whether the
/// hypothesis ended with EOS (whose step score is included) or hit the
/// length cap. `score` is always the sum of `step_scores`.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub labels: Vec<usize>,
    pub score: f64,
    pub step_scores: Vec<f64>,
    pub completed: bool,
}

/// Beam-search knobs. The LM weight must be zero when no LM is supplied.
#[derive(Debug, Clone)]
pub struct BeamConfig {
    pub width: usize,
    /// Length cap as a multiple of the number of embedding vectors U.
    pub max_len_factor: f64,
    /// Shallow-fusion weight gamma.
    pub lm_weight: f64,
    pub lm: Option<LmParams>,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            width: 5,
            max_len_factor: 1.5,
            lm_weight: 0.0,
            lm: None,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::Config("beam width must be >= 1".into()));
        }
        if self.lm_weight < 0.0 {
            return Err(Error::Config("lm weight must be >= 0".into()));
        }
        if self.lm.is_none() && self.lm_weight != 0.0 {
            return Err(Error::Config("lm weight requires an lm checkpoint".into()));
        }
        Ok(())
    }
}

/// Per-step scoring interface: log scores over the vocabulary given the
/// previous label and an opaque state.
pub trait StepScorer {
    type State: Clone;

    fn start(&mut self) -> Result<Self::State>;
    fn step(&mut self, prev: usize, state: &Self::State) -> Result<(Vec<f64>, Self::State)>;
    fn vocab_size(&self) -> usize;
}

/// Attention-decoder scorer over immutable model parameters.
pub struct AttentionScorer {
    sess: Session,
    b: crate::autograd::NodeId,
    keys: crate::autograd::NodeId,
    vocab: usize,
}

impl AttentionScorer {
    pub fn new(params: &ModelParams, b: &EmbeddingSequence) -> Result<Self> {
        let mut sess = Session::new(params, false);
        let bn = sess.graph.leaf(b.vectors.clone());
        let keys = sess.attention_keys(bn)?;
        Ok(AttentionScorer {
            sess,
            b: bn,
            keys,
            vocab: params.arch().vocab_size,
        })
    }
}

impl StepScorer for AttentionScorer {
    type State = DecoderNodes;

    fn start(&mut self) -> Result<DecoderNodes> {
        Ok(self.sess.decoder_start())
    }

    fn step(&mut self, prev: usize, state: &DecoderNodes) -> Result<(Vec<f64>, DecoderNodes)> {
        let (dist, next) = self.sess.decoder_step(prev, state, self.b, self.keys)?;
        let scores = self
            .sess
            .graph
            .value(dist)
            .values()
            .iter()
            .map(|p| p.ln())
            .collect();
        Ok((scores, next))
    }

    fn vocab_size(&self) -> usize {
        self.vocab
    }
}

/// Shallow fusion of a model distribution with an LM distribution:
/// `fused(c) = log p_model(c) + gamma * log p_lm(c)`, no renormalization.
pub fn fuse_lm_score(model_dist: &[f64], lm_dist: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if model_dist.len() != lm_dist.len() {
        return Err(Error::Invalid(format!(
            "fuse_lm_score: vocabulary mismatch ({} vs {})",
            model_dist.len(),
            lm_dist.len()
        )));
    }
    if gamma == 0.0 {
        return Ok(model_dist.iter().map(|p| p.ln()).collect());
    }
    Ok(model_dist
        .iter()
        .zip(lm_dist)
        .map(|(pm, pl)| pm.ln() + gamma * pl.ln())
        .collect())
}

/// Attention scorer fused with a character LM.
pub struct FusedScorer<'a> {
    model: AttentionScorer,
    lm: LmScorer<'a>,
    gamma: f64,
}

impl<'a> FusedScorer<'a> {
    pub fn new(params: &ModelParams, b: &EmbeddingSequence, lm: &'a LmParams, gamma: f64) -> Result<Self> {
        let model = AttentionScorer::new(params, b)?;
        let lm = LmScorer::new(lm);
        if lm.vocab_size() != model.vocab_size() {
            return Err(Error::Invalid(format!(
                "fused decode: vocabulary mismatch ({} vs {})",
                model.vocab_size(),
                lm.vocab_size()
            )));
        }
        Ok(FusedScorer { model, lm, gamma })
    }
}

impl StepScorer for FusedScorer<'_> {
    type State = (DecoderNodes, LmState);

    fn start(&mut self) -> Result<Self::State> {
        Ok((self.model.start()?, self.lm.start()))
    }

    fn step(&mut self, prev: usize, state: &Self::State) -> Result<(Vec<f64>, Self::State)> {
        let (dist_node, next_m) = self
            .model
            .sess
            .decoder_step(prev, &state.0, self.model.b, self.model.keys)?;
        let model_dist = self.model.sess.graph.value(dist_node).values().to_vec();
        let (lm_dist, next_l) = self.lm.step(prev, &state.1)?;
        let fused = fuse_lm_score(&model_dist, &lm_dist, self.gamma)?;
        Ok((fused, (next_m, next_l)))
    }

    fn vocab_size(&self) -> usize {
        self.model.vocab_size()
    }
}

/// Symbols a hypothesis may contain: everything except SOS and BLANK
/// (EOS is handled as the terminator, not listed here).
pub fn candidate_symbols(vocab_size: usize) -> Vec<usize> {
    (0..vocab_size)
        .filter(|&c| c != SOS && c != BLANK && c != EOS)
        .collect()
}

/// Hypothesis ordering: higher score first, then shorter label sequence,
/// then lexicographically smaller labels.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.labels.len().cmp(&b.labels.len()))
        .then(a.labels.cmp(&b.labels))
}

struct Partial<S> {
    hyp: Hypothesis,
    state: S,
    prev: usize,
}

/// Length-synchronous beam search over any scorer.
pub fn beam_search_over<S: StepScorer>(
    scorer: &mut S,
    width: usize,
    cap: usize,
) -> Result<Vec<Hypothesis>> {
    if width == 0 {
        return Err(Error::Config("beam width must be >= 1".into()));
    }
    let candidates = candidate_symbols(scorer.vocab_size());
    let mut active = vec![Partial {
        hyp: Hypothesis {
            labels: Vec::new(),
            score: 0.0,
            step_scores: Vec::new(),
            completed: false,
        },
        state: scorer.start()?,
        prev: SOS,
    }];
    let mut completed: Vec<Hypothesis> = Vec::new();

    for _ in 0..cap {
        if active.is_empty() {
            break;
        }
        let mut expansions: Vec<Partial<S::State>> = Vec::new();
        for p in &active {
            let (scores, next_state) = scorer.step(p.prev, &p.state)?;
            let mut extend = |sym: usize| {
                let s = scores[sym];
                let mut hyp = p.hyp.clone();
                hyp.step_scores.push(s);
                hyp.score += s;
                if sym == EOS {
                    hyp.completed = true;
                } else {
                    hyp.labels.push(sym);
                }
                expansions.push(Partial {
                    hyp,
                    state: next_state.clone(),
                    prev: sym,
                });
            };
            extend(EOS);
            for &c in &candidates {
                extend(c);
            }
        }
        expansions.sort_by(|a, b| rank(&a.hyp, &b.hyp));
        expansions.truncate(width);
        active = Vec::new();
        for e in expansions {
            if e.hyp.completed {
                completed.push(e.hyp);
            } else {
                active.push(e);
            }
        }
    }

    if completed.is_empty() {
        // nothing reached EOS within the cap: surface the best capped
        // hypothesis, flagged as uncompleted
        let mut rest: Vec<Hypothesis> = active.into_iter().map(|p| p.hyp).collect();
        rest.sort_by(rank);
        rest.truncate(width);
        return Ok(rest);
    }
    completed.sort_by(rank);
    completed.truncate(width);
    Ok(completed)
}

/// Greedy argmax walk: exactly beam search with width 1.
pub fn greedy_decode_over<S: StepScorer>(scorer: &mut S, cap: usize) -> Result<Hypothesis> {
    let candidates = candidate_symbols(scorer.vocab_size());
    let mut state = scorer.start()?;
    let mut prev = SOS;
    let mut hyp = Hypothesis {
        labels: Vec::new(),
        score: 0.0,
        step_scores: Vec::new(),
        completed: false,
    };
    for _ in 0..cap {
        let (scores, next) = scorer.step(prev, &state)?;
        let mut best = EOS;
        for &c in &candidates {
            if scores[c] > scores[best] {
                best = c;
            }
        }
        hyp.step_scores.push(scores[best]);
        hyp.score += scores[best];
        if best == EOS {
            hyp.completed = true;
            break;
        }
        hyp.labels.push(best);
        state = next;
        prev = best;
    }
    Ok(hyp)
}

fn length_cap(b: &EmbeddingSequence, factor: f64) -> usize {
    ((b.num_vectors() as f64 * factor).ceil() as usize).max(1)
}

/// Greedy decode of one embedding sequence; this realizes the hypothesis
/// `d(e(x))` used by the cycle loss.
pub fn greedy_decode(params: &ModelParams, b: &EmbeddingSequence) -> Result<Hypothesis> {
    let mut scorer = AttentionScorer::new(params, b)?;
    greedy_decode_over(&mut scorer, length_cap(b, 1.5))
}

/// Beam search over one embedding sequence, optionally fused with an LM.
pub fn beam_search(
    params: &ModelParams,
    b: &EmbeddingSequence,
    cfg: &BeamConfig,
) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let cap = length_cap(b, cfg.max_len_factor);
    match (&cfg.lm, cfg.lm_weight) {
        (Some(lm), gamma) if gamma > 0.0 => {
            let mut scorer = FusedScorer::new(params, b, lm, gamma)?;
            beam_search_over(&mut scorer, cfg.width, cap)
        }
        _ => {
            let mut scorer = AttentionScorer::new(params, b)?;
            beam_search_over(&mut scorer, cfg.width, cap)
        }
    }
}

// ── Decode output files ─────────────────────────────────────────────────

/// One line of a decode output file.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeRow {
    pub id: String,
    pub text: String,
    pub score: f64,
}

pub fn write_decode_output(path: &Path, rows: &[DecodeRow]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        writeln!(out, "{}\t{}\t{}", r.id, r.text, r.score)
            .expect("string write cannot fail");
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_decode_output(path: &Path) -> Result<Vec<DecodeRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.splitn(3, '\t').collect();
        // hypothesis text may be empty; score is the last field
        let (id, text, score) = match parts.as_slice() {
            [id, text, score] => (id, text, score),
            _ => {
                return Err(Error::Invalid(format!(
                    "decode output line {}: expected id\\ttext\\tscore",
                    lineno + 1
                )))
            }
        };
        rows.push(DecodeRow {
            id: id.to_string(),
            text: text.to_string(),
            score: score
                .parse()
                .map_err(|e| Error::Invalid(format!("decode output line {}: {e}", lineno + 1)))?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scorer with a fixed log-score table per (depth, prev) pair.
    struct TableScorer {
        vocab: usize,
        table: Vec<Vec<f64>>, // indexed by depth, then symbol
    }

    impl StepScorer for TableScorer {
        type State = usize; // depth

        fn start(&mut self) -> Result<usize> {
            Ok(0)
        }

        fn step(&mut self, _prev: usize, state: &usize) -> Result<(Vec<f64>, usize)> {
            let row = self.table[(*state).min(self.table.len() - 1)].clone();
            Ok((row, state + 1))
        }

        fn vocab_size(&self) -> usize {
            self.vocab
        }
    }

    #[test]
    fn greedy_stops_at_eos() {
        // vocab: SOS, EOS, BLANK, UNK, a(4), b(5)
        let mut scorer = TableScorer {
            vocab: 6,
            table: vec![
                vec![-9.0, -5.0, -9.0, -9.0, -0.1, -2.0],
                vec![-9.0, -3.0, -9.0, -9.0, -4.0, -0.2],
                vec![-9.0, -0.1, -9.0, -9.0, -4.0, -4.0],
            ],
        };
        let hyp = greedy_decode_over(&mut scorer, 10).unwrap();
        assert_eq!(hyp.labels, vec![4, 5]);
        assert!(hyp.completed);
        assert!((hyp.score - (-0.1 - 0.2 - 0.1)).abs() < 1e-12);
        assert_eq!(hyp.step_scores.len(), 3);
    }

    #[test]
    fn cap_triggers_when_eos_never_wins() {
        let mut scorer = TableScorer {
            vocab: 6,
            table: vec![vec![-9.0, -8.0, -9.0, -9.0, -0.1, -2.0]],
        };
        let hyp = greedy_decode_over(&mut scorer, 4).unwrap();
        assert_eq!(hyp.labels, vec![4, 4, 4, 4]);
        assert!(!hyp.completed);
    }

    #[test]
    fn beam_width_one_equals_greedy_bit_exact() {
        let table = vec![
            vec![-9.0, -5.0, -9.0, -9.0, -0.1, -2.0],
            vec![-9.0, -3.0, -9.0, -9.0, -4.0, -0.2],
            vec![-9.0, -0.1, -9.0, -9.0, -4.0, -4.0],
        ];
        let mut s1 = TableScorer { vocab: 6, table: table.clone() };
        let mut s2 = TableScorer { vocab: 6, table };
        let greedy = greedy_decode_over(&mut s1, 10).unwrap();
        let beam = beam_search_over(&mut s2, 1, 10).unwrap();
        assert_eq!(beam[0], greedy);
    }

    #[test]
    fn fuse_gamma_zero_is_model_only() {
        let fused = fuse_lm_score(&[0.9, 0.1], &[0.0, 1.0], 0.0).unwrap();
        assert_eq!(fused, vec![0.9_f64.ln(), 0.1_f64.ln()]);
    }

    #[test]
    fn fuse_uniform_keeps_ranking() {
        let fused = fuse_lm_score(&[0.25; 4], &[0.25; 4], 1.0).unwrap();
        for f in &fused {
            assert!((f - 2.0 * 0.25_f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_hand_case_keeps_symbol_zero() {
        // fused argmax flips iff 0.9 * 0.2 < 0.1 * 0.8; 0.18 > 0.08 keeps 0
        let fused = fuse_lm_score(&[0.9, 0.1], &[0.2, 0.8], 1.0).unwrap();
        assert!(fused[0] > fused[1]);
    }

    #[test]
    fn fuse_vocab_mismatch() {
        assert!(fuse_lm_score(&[1.0], &[0.5, 0.5], 0.5).is_err());
    }

    #[test]
    fn score_is_sum_of_step_scores() {
        let mut scorer = TableScorer {
            vocab: 6,
            table: vec![
                vec![-9.0, -1.5, -9.0, -9.0, -0.7, -0.9],
                vec![-9.0, -0.4, -9.0, -9.0, -1.1, -0.8],
            ],
        };
        for hyp in beam_search_over(&mut scorer, 4, 5).unwrap() {
            let sum: f64 = hyp.step_scores.iter().sum();
            assert!((hyp.score - sum).abs() < 1e-12);
        }
    }
}
