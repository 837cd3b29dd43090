//! Scoring: minimum-edit-distance alignment with substitution / deletion /
//! insertion attribution, corpus-level CER and WER aggregation, and
//! embedding export for offline analysis.

use crate::autograd::Tensor;
use crate::corpus::{CorpusData, Split, Vocabulary};
use crate::decoder::DecodeRow;
use crate::model::{self, FeatureSequence, ModelParams};
use crate::{Error, Result};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

/// One aligned column: reference token (or gap) against hypothesis token
/// (or gap).
pub type AlignedPair<T> = (Option<T>, Option<T>);

/// Counts and alignment of one reference/hypothesis pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentResult<T> {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub hits: usize,
    pub pairs: Vec<AlignedPair<T>>,
}

impl<T> AlignmentResult<T> {
    pub fn edits(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// `(S + D + I) / reference length`; zero for an empty reference with an
    /// empty hypothesis, infinite otherwise.
    pub fn error_rate(&self, ref_len: usize) -> f64 {
        if ref_len == 0 {
            if self.edits() == 0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            self.edits() as f64 / ref_len as f64
        }
    }
}

/// Minimum-edit-distance alignment with unit costs. Among minimal
/// alignments the one with the most hits wins (the substitution count is
/// then determined by the identity `edits = n + m - 2*hits - subs`).
pub fn align<T: Eq + Clone>(reference: &[T], hypothesis: &[T]) -> AlignmentResult<T> {
    let n = reference.len();
    let m = hypothesis.len();
    // cell = (edits, hits); better = fewer edits, then more hits
    let better = |a: (usize, usize), b: (usize, usize)| -> bool {
        a.0 < b.0 || (a.0 == b.0 && a.1 > b.1)
    };
    let mut cost = vec![(0usize, 0usize); (n + 1) * (m + 1)];
    // 0 = diagonal, 1 = up (deletion), 2 = left (insertion)
    let mut step = vec![0u8; (n + 1) * (m + 1)];
    let at = |i: usize, j: usize| i * (m + 1) + j;
    for i in 1..=n {
        cost[at(i, 0)] = (i, 0);
        step[at(i, 0)] = 1;
    }
    for j in 1..=m {
        cost[at(0, j)] = (j, 0);
        step[at(0, j)] = 2;
    }
    for i in 1..=n {
        for j in 1..=m {
            let hit = reference[i - 1] == hypothesis[j - 1];
            let diag = cost[at(i - 1, j - 1)];
            let mut best = if hit {
                (diag.0, diag.1 + 1)
            } else {
                (diag.0 + 1, diag.1)
            };
            let mut dir = 0u8;
            let up = (cost[at(i - 1, j)].0 + 1, cost[at(i - 1, j)].1);
            if better(up, best) {
                best = up;
                dir = 1;
            }
            let left = (cost[at(i, j - 1)].0 + 1, cost[at(i, j - 1)].1);
            if better(left, best) {
                best = left;
                dir = 2;
            }
            cost[at(i, j)] = best;
            step[at(i, j)] = dir;
        }
    }

    let mut pairs = Vec::new();
    let (mut i, mut j) = (n, m);
    let (mut hits, mut subs, mut dels, mut inss) = (0, 0, 0, 0);
    while i > 0 || j > 0 {
        match step[at(i, j)] {
            0 => {
                i -= 1;
                j -= 1;
                if reference[i] == hypothesis[j] {
                    hits += 1;
                } else {
                    subs += 1;
                }
                pairs.push((Some(reference[i].clone()), Some(hypothesis[j].clone())));
            }
            1 => {
                i -= 1;
                dels += 1;
                pairs.push((Some(reference[i].clone()), None));
            }
            _ => {
                j -= 1;
                inss += 1;
                pairs.push((None, Some(hypothesis[j].clone())));
            }
        }
    }
    pairs.reverse();
    AlignmentResult {
        substitutions: subs,
        deletions: dels,
        insertions: inss,
        hits,
        pairs,
    }
}

// ── Corpus scoring ──────────────────────────────────────────────────────

/// Token granularity for scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unit {
    Char,
    Word,
}

impl Unit {
    pub fn tokenize(&self, text: &str) -> Vec<String> {
        match self {
            Unit::Char => text.chars().map(String::from).collect(),
            Unit::Word => text.split_whitespace().map(String::from).collect(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ErrorCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub hits: usize,
    pub ref_len: usize,
}

impl ErrorCounts {
    pub fn edits(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn rate(&self) -> f64 {
        if self.ref_len == 0 {
            if self.edits() == 0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            self.edits() as f64 / self.ref_len as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct UtteranceScore {
    pub id: String,
    pub counts: ErrorCounts,
}

/// Per-utterance and corpus-level rates for one token unit. The corpus rate
/// is total edits over total reference length, not a mean of per-utterance
/// rates.
#[derive(Debug, Clone)]
pub struct ScoreReport {
    pub unit: Unit,
    pub utterances: Vec<UtteranceScore>,
    pub corpus: ErrorCounts,
}

impl ScoreReport {
    pub fn corpus_rate(&self) -> f64 {
        self.corpus.rate()
    }
}

/// Scores decode output against references.
///
/// Every reference id must be decoded and every decoded id must be a
/// reference; violations are reported with the offending id lists.
pub fn score_corpus(
    references: &[(String, String)],
    decodes: &[DecodeRow],
    unit: Unit,
) -> Result<ScoreReport> {
    let hyp_by_id: BTreeMap<&str, &str> = decodes
        .iter()
        .map(|r| (r.id.as_str(), r.text.as_str()))
        .collect();
    let ref_ids: BTreeMap<&str, ()> = references.iter().map(|(id, _)| (id.as_str(), ())).collect();
    let missing: Vec<&str> = references
        .iter()
        .filter(|(id, _)| !hyp_by_id.contains_key(id.as_str()))
        .map(|(id, _)| id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Invalid(format!(
            "score_corpus: utterances missing from decode output: {}",
            missing.join(", ")
        )));
    }
    let stray: Vec<&str> = hyp_by_id
        .keys()
        .filter(|id| !ref_ids.contains_key(*id))
        .copied()
        .collect();
    if !stray.is_empty() {
        return Err(Error::Invalid(format!(
            "score_corpus: decoded utterances not in the split: {}",
            stray.join(", ")
        )));
    }

    let mut utterances = Vec::with_capacity(references.len());
    let mut corpus = ErrorCounts::default();
    for (id, reference) in references {
        let ref_tokens = unit.tokenize(reference);
        let hyp_tokens = unit.tokenize(hyp_by_id[id.as_str()]);
        let a = align(&ref_tokens, &hyp_tokens);
        let counts = ErrorCounts {
            substitutions: a.substitutions,
            deletions: a.deletions,
            insertions: a.insertions,
            hits: a.hits,
            ref_len: ref_tokens.len(),
        };
        corpus.substitutions += counts.substitutions;
        corpus.deletions += counts.deletions;
        corpus.insertions += counts.insertions;
        corpus.hits += counts.hits;
        corpus.ref_len += counts.ref_len;
        utterances.push(UtteranceScore {
            id: id.clone(),
            counts,
        });
    }
    Ok(ScoreReport {
        unit,
        utterances,
        corpus,
    })
}

/// CSV rendering of a report: one row per utterance plus a corpus row.
pub fn report_to_csv(report: &ScoreReport) -> String {
    let unit = match report.unit {
        Unit::Char => "char",
        Unit::Word => "word",
    };
    let mut out = String::from("utt_id,unit,ref_len,sub,del,ins,hits,rate\n");
    for u in &report.utterances {
        let c = &u.counts;
        writeln!(
            out,
            "{},{unit},{},{},{},{},{},{:.6}",
            u.id, c.ref_len, c.substitutions, c.deletions, c.insertions, c.hits,
            c.rate()
        )
        .unwrap();
    }
    let c = &report.corpus;
    writeln!(
        out,
        "__corpus__,{unit},{},{},{},{},{},{:.6}",
        c.ref_len, c.substitutions, c.deletions, c.insertions, c.hits,
        c.rate()
    )
    .unwrap();
    out
}

/// One line of the human-readable results table (Model, Type, LM, CER, WER).
#[derive(Debug, Clone)]
pub struct TableRow {
    pub model: String,
    /// "Text", "Speech", or "Both", from the speech-to-text ratio.
    pub beta_type: String,
    pub with_lm: bool,
    pub cer: f64,
    pub wer: f64,
}

/// The label models are grouped under in result tables.
pub fn beta_type(beta: f64) -> &'static str {
    if beta == 0.0 {
        "Text"
    } else if beta == 1.0 {
        "Speech"
    } else {
        "Both"
    }
}

pub fn render_table(rows: &[TableRow]) -> String {
    let mut out = String::new();
    writeln!(out, "{:<18} {:<8} {:<3} {:>7} {:>7}", "Model", "Type", "LM", "CER(%)", "WER(%)").unwrap();
    for r in rows {
        writeln!(
            out,
            "{:<18} {:<8} {:<3} {:>7.2} {:>7.2}",
            r.model,
            r.beta_type,
            if r.with_lm { "Y" } else { "N" },
            r.cer * 100.0,
            r.wer * 100.0
        )
        .unwrap();
    }
    out
}

// ── Embedding export ────────────────────────────────────────────────────

/// Symmetric eigendecomposition by cyclic Jacobi rotations; returns
/// eigenvalues (descending) and matching eigenvectors as rows.
fn jacobi_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let eigvals = order.iter().map(|&i| a[i * n + i]).collect();
    let mut eigvecs = vec![0.0; n * n];
    for (row, &i) in order.iter().enumerate() {
        for k in 0..n {
            eigvecs[row * n + k] = v[k * n + i];
        }
    }
    (eigvals, eigvecs)
}

/// Two principal directions of a centered row set; the deterministic stand-in
/// for an external t-SNE run. Sign convention: the largest-magnitude
/// coefficient of each direction is positive.
pub fn principal_directions(rows: &[Vec<f64>]) -> Option<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    if rows.is_empty() {
        return None;
    }
    let h = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; h];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x / n;
        }
    }
    let mut cov = vec![0.0; h * h];
    for r in rows {
        for i in 0..h {
            for j in 0..h {
                cov[i * h + j] += (r[i] - mean[i]) * (r[j] - mean[j]) / n;
            }
        }
    }
    let (_vals, vecs) = jacobi_eigen(cov, h);
    let fix_sign = |v: &mut Vec<f64>| {
        let amax = v
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if v[amax] < 0.0 {
            for x in v.iter_mut() {
                *x = -*x;
            }
        }
    };
    let mut d1 = vecs[..h].to_vec();
    let mut d2 = if h > 1 { vecs[h..2 * h].to_vec() } else { vec![0.0; h] };
    fix_sign(&mut d1);
    fix_sign(&mut d2);
    Some((mean, d1, d2))
}

/// Writes one CSV row per embedding frame of the split: speech rows from the
/// acoustic path, text rows from the transcript path, plus a deterministic
/// 2-component linear projection fit on the pooled rows.
pub fn export_embeddings(
    params: &ModelParams,
    data: &CorpusData,
    split: Split,
    out_path: &Path,
) -> Result<()> {
    // (id, source, rows)
    let mut blocks: Vec<(String, &'static str, Tensor)> = Vec::new();
    let add_speech = |id: &str, frames: &Tensor, blocks: &mut Vec<_>| -> Result<()> {
        let x = FeatureSequence::new(id.to_string(), frames.clone())?;
        let b = model::encode_speech(params, &x)?;
        blocks.push((id.to_string(), "speech", b.vectors));
        Ok(())
    };
    let add_text =
        |id: &str, transcript: &str, vocab: &Vocabulary, blocks: &mut Vec<_>| -> Result<()> {
            let y = vocab.encode(transcript)?;
            if y.is_empty() {
                return Ok(());
            }
            let b = model::embed_text(params, &y)?;
            blocks.push((id.to_string(), "text", b.vectors));
            Ok(())
        };

    match split {
        Split::Dev | Split::Eval => {
            let utts = if split == Split::Dev { &data.dev } else { &data.eval };
            for u in utts {
                add_speech(&u.id, &u.frames, &mut blocks)?;
                add_text(&u.id, &u.transcript, &data.vocab, &mut blocks)?;
            }
        }
        Split::Paired => {
            for u in &data.paired {
                add_speech(&u.id, &u.frames, &mut blocks)?;
                let text = data.vocab.decode(u.labels.indices());
                add_text(&u.id, &text, &data.vocab, &mut blocks)?;
            }
        }
        Split::UnpairedSpeech => {
            for u in &data.unpaired_speech {
                add_speech(&u.id, &u.frames, &mut blocks)?;
            }
        }
        Split::UnpairedText => {
            for u in &data.unpaired_text {
                let text = data.vocab.decode(u.labels.indices());
                add_text(&u.id, &text, &data.vocab, &mut blocks)?;
            }
        }
    }

    let mut pooled: Vec<Vec<f64>> = Vec::new();
    for (_, _, t) in &blocks {
        let h = t.shape()[1];
        for r in 0..t.shape()[0] {
            pooled.push(t.values()[r * h..(r + 1) * h].to_vec());
        }
    }
    let projection = principal_directions(&pooled);

    let h = blocks.first().map(|(_, _, t)| t.shape()[1]).unwrap_or(0);
    let mut out = String::from("utt_id,source,frame");
    for i in 0..h {
        write!(out, ",e{i}").unwrap();
    }
    out.push_str(",p0,p1\n");
    for (id, source, t) in &blocks {
        let width = t.shape()[1];
        for r in 0..t.shape()[0] {
            let row = &t.values()[r * width..(r + 1) * width];
            write!(out, "{id},{source},{r}").unwrap();
            for v in row {
                write!(out, ",{v}").unwrap();
            }
            if let Some((mean, d1, d2)) = &projection {
                let centered: Vec<f64> = row.iter().zip(mean).map(|(x, m)| x - m).collect();
                let p0: f64 = centered.iter().zip(d1).map(|(x, d)| x * d).sum();
                let p1: f64 = centered.iter().zip(d2).map(|(x, d)| x * d).sum();
                write!(out, ",{p0},{p1}").unwrap();
            } else {
                out.push_str(",0,0");
            }
            out.push('\n');
        }
    }
    std::fs::write(out_path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chars(s: &str) -> Vec<char> {
        s.chars().collect()
    }

    #[test]
    fn identical_sequences() {
        let a = align(&chars("abc"), &chars("abc"));
        assert_eq!((a.substitutions, a.deletions, a.insertions, a.hits), (0, 0, 0, 3));
        assert_eq!(a.error_rate(3), 0.0);
    }

    #[test]
    fn empty_hypothesis_is_all_deletions() {
        let a = align(&chars("abc"), &chars(""));
        assert_eq!((a.substitutions, a.deletions, a.insertions, a.hits), (0, 3, 0, 0));
    }

    #[test]
    fn single_substitution() {
        let a = align(&chars("abc"), &chars("axc"));
        assert_eq!((a.substitutions, a.deletions, a.insertions), (1, 0, 0));
        assert!((a.error_rate(3) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn identity_constraints_hold() {
        let cases = [("kitten", "sitting"), ("abcdef", "azced"), ("", "xyz"), ("aaa", "aa")];
        for (r, h) in cases {
            let a = align(&chars(r), &chars(h));
            assert_eq!(a.hits + a.substitutions + a.deletions, r.chars().count());
            assert_eq!(a.hits + a.substitutions + a.insertions, h.chars().count());
            assert_eq!(a.pairs.len(), a.hits + a.substitutions + a.deletions + a.insertions);
        }
    }

    #[test]
    fn cost_symmetry_swaps_del_ins() {
        let cases = [("abcdef", "azced"), ("aab", "ba"), ("hello", "help")];
        for (r, h) in cases {
            let fwd = align(&chars(r), &chars(h));
            let bwd = align(&chars(h), &chars(r));
            assert_eq!(fwd.edits(), bwd.edits());
            assert_eq!(fwd.substitutions, bwd.substitutions);
            assert_eq!(fwd.deletions, bwd.insertions);
            assert_eq!(fwd.insertions, bwd.deletions);
        }
    }

    #[test]
    fn corpus_rate_is_pooled_not_mean() {
        let refs = vec![
            ("u1".to_string(), "ab".to_string()),
            ("u2".to_string(), "abcdefgh".to_string()),
        ];
        let decodes = vec![
            DecodeRow { id: "u1".into(), text: "ba".into(), score: 0.0 },
            DecodeRow { id: "u2".into(), text: "abcdefgh".into(), score: 0.0 },
        ];
        let report = score_corpus(&refs, &decodes, Unit::Char).unwrap();
        // u1: 2 edits over 2; u2: 0 over 8 -> pooled 2/10, not (1.0 + 0)/2
        assert!((report.corpus_rate() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn missing_utterance_lists_ids() {
        let refs = vec![("u1".to_string(), "ab".to_string()), ("u2".to_string(), "cd".to_string())];
        let decodes = vec![DecodeRow { id: "u1".into(), text: "ab".into(), score: 0.0 }];
        let err = score_corpus(&refs, &decodes, Unit::Char).unwrap_err().to_string();
        assert!(err.contains("u2"), "{err}");
    }

    #[test]
    fn word_unit_tokenizes_on_whitespace() {
        let refs = vec![("u1".to_string(), "the cat sat".to_string())];
        let decodes = vec![DecodeRow { id: "u1".into(), text: "the cat".into(), score: 0.0 }];
        let report = score_corpus(&refs, &decodes, Unit::Word).unwrap();
        assert_eq!(report.corpus.deletions, 1);
        assert_eq!(report.corpus.hits, 2);
    }

    #[test]
    fn principal_directions_are_deterministic() {
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                let x = i as f64 * 0.37;
                vec![x, 2.0 * x + 0.01 * (i as f64).sin(), 0.1 * x]
            })
            .collect();
        let a = principal_directions(&rows).unwrap();
        let b = principal_directions(&rows).unwrap();
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
        // dominant direction aligns with the (1, 2, 0.1) line
        let d1 = &a.1;
        assert!(d1[1].abs() > d1[2].abs());
    }
}
