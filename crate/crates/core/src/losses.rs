//! Training objectives: the paired CTC/attention loss, the text autoencoder
//! loss, the kernel two-sample (MMD) inter-domain loss, the identity mapping
//! loss, the cycle-consistent inter-domain loss, and the variant algebra
//! that combines them.
//!
//! All losses are built inside one autodiff graph per evaluation, so every
//! gradient — including the CTC branch and the kernel terms — comes out of
//! the same reverse pass. The cycle loss decodes a hypothesis with the
//! current parameters first; the decode is discrete, so no gradient flows
//! through it, only through the two encoder paths that embed its endpoints.

use crate::autograd::{Graph, NodeId, Tensor};
use crate::corpus::{PairedBatch, SpeechBatch, TextBatch};
use crate::decoder;
use crate::model::{
    EmbeddingSequence, FeatureSequence, LabelSequence, ModelParams, Session, SourceTag, UNK,
};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

// ── Kernel configuration ────────────────────────────────────────────────

/// RBF kernel bandwidth: fixed, or the median of the pooled pairwise
/// distances of the current batch (frozen per evaluation, so the loss stays
/// differentiable with respect to the samples only).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum Bandwidth {
    Median,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Biased,
    Unbiased,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub bandwidth: Bandwidth,
    pub estimator: Estimator,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            bandwidth: Bandwidth::Median,
            estimator: Estimator::Biased,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if let Bandwidth::Fixed(s) = self.bandwidth {
            if !(s > 0.0) {
                return Err(Error::Config("kernel bandwidth must be > 0".into()));
            }
        }
        Ok(())
    }
}

// ── Experiment variants ─────────────────────────────────────────────────

/// The five training configurations distinguished by their unpaired loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Initial,
    Baseline,
    RetrainIdt,
    RetrainCyc,
    RetrainCycIdt,
}

pub const RETRAIN_VARIANTS: [Variant; 4] = [
    Variant::Baseline,
    Variant::RetrainIdt,
    Variant::RetrainCyc,
    Variant::RetrainCycIdt,
];

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Initial => "Initial",
            Variant::Baseline => "Baseline",
            Variant::RetrainIdt => "Retrain-idt",
            Variant::RetrainCyc => "Retrain-cyc",
            Variant::RetrainCycIdt => "Retrain-cyc+idt",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Initial" | "initial" => Ok(Variant::Initial),
            "Baseline" | "baseline" => Ok(Variant::Baseline),
            "Retrain-idt" | "retrain-idt" => Ok(Variant::RetrainIdt),
            "Retrain-cyc" | "retrain-cyc" => Ok(Variant::RetrainCyc),
            "Retrain-cyc+idt" | "retrain-cyc+idt" => Ok(Variant::RetrainCycIdt),
            other => Err(Error::Config(format!("unknown variant: {other}"))),
        }
    }
}

/// Loss terms that can appear in a breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum LossComponent {
    Pair,
    Ctc,
    Text,
    Dom,
    CycDom,
    IdtSpeech,
    IdtText,
}

impl LossComponent {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossComponent::Pair => "pair",
            LossComponent::Ctc => "ctc",
            LossComponent::Text => "text",
            LossComponent::Dom => "dom",
            LossComponent::CycDom => "cyc_dom",
            LossComponent::IdtSpeech => "idt_speech",
            LossComponent::IdtText => "idt_text",
        }
    }

    pub const ALL: [LossComponent; 7] = [
        LossComponent::Pair,
        LossComponent::Ctc,
        LossComponent::Text,
        LossComponent::Dom,
        LossComponent::CycDom,
        LossComponent::IdtSpeech,
        LossComponent::IdtText,
    ];
}

/// Total plus per-component values for one objective evaluation.
///
/// `ctc` is informational (it is already inside `pair` via the multitask
/// weight); the total reconstructs from the other present components under
/// the active variant's formula.
#[derive(Debug, Clone, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub components: BTreeMap<LossComponent, f64>,
    /// Cycle decodes that came back empty and were replaced by a single UNK.
    pub empty_hypotheses: usize,
}

impl LossBreakdown {
    pub fn get(&self, c: LossComponent) -> Option<f64> {
        self.components.get(&c).copied()
    }

    /// Recomputes the total from the components under the variant formula;
    /// the objective algebra tests check this against `total`.
    pub fn reconstruct(&self, variant: Variant, alpha: f64, beta: f64) -> f64 {
        let get = |c| self.get(c).unwrap_or(0.0);
        if variant == Variant::Initial {
            return get(LossComponent::Pair);
        }
        let speech_side = match variant {
            Variant::Baseline => get(LossComponent::Dom),
            Variant::RetrainIdt => get(LossComponent::IdtSpeech),
            Variant::RetrainCyc => get(LossComponent::CycDom),
            Variant::RetrainCycIdt => get(LossComponent::CycDom) + get(LossComponent::IdtSpeech),
            Variant::Initial => unreachable!(),
        };
        let text_side = match variant {
            Variant::RetrainIdt => get(LossComponent::IdtText),
            Variant::RetrainCycIdt => get(LossComponent::Text) + get(LossComponent::IdtText),
            _ => get(LossComponent::Text),
        };
        let unpair = if beta == 1.0 {
            speech_side
        } else if beta == 0.0 {
            text_side
        } else {
            beta * speech_side + (1.0 - beta) * text_side
        };
        if alpha == 1.0 {
            get(LossComponent::Pair)
        } else if alpha == 0.0 {
            unpair
        } else {
            alpha * get(LossComponent::Pair) + (1.0 - alpha) * unpair
        }
    }
}

/// Everything the combined objective needs to know.
#[derive(Debug, Clone)]
pub struct ObjectiveConfig {
    pub variant: Variant,
    /// Paired/unpaired mix weight.
    pub alpha: f64,
    /// Speech-to-text ratio inside the unpaired loss.
    pub beta: f64,
    /// CTC multitask weight inside the paired loss.
    pub ctc_weight: f64,
    pub kernel: KernelConfig,
    /// Length cap factor for the cycle hypothesis decode.
    pub max_len_factor: f64,
}

impl ObjectiveConfig {
    pub fn new(variant: Variant, alpha: f64, beta: f64) -> Self {
        ObjectiveConfig {
            variant,
            alpha,
            beta,
            ctc_weight: 0.3,
            kernel: KernelConfig::default(),
            max_len_factor: 1.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("lambda", self.ctc_weight)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        self.kernel.validate()
    }
}

// ── MMD ─────────────────────────────────────────────────────────────────

/// Squared-distance matrix of the stacked rows, the resolved bandwidth, and
/// the block sizes; shared by every kernel term.
fn kernel_matrix(
    g: &mut Graph,
    p: NodeId,
    q: NodeId,
    k: &KernelConfig,
) -> Result<(NodeId, usize, usize)> {
    k.validate()?;
    let (n, m) = (g.value(p).shape()[0], g.value(q).shape()[0]);
    let h = g.value(p).shape()[1];
    if g.value(q).shape()[1] != h {
        return Err(Error::ShapeMismatch {
            op: "mmd",
            lhs: g.value(p).shape().to_vec(),
            rhs: g.value(q).shape().to_vec(),
        });
    }

    let stacked = g.concat(0, &[p, q])?;
    let sq = g.mul(stacked, stacked)?;
    let ones = g.leaf(Tensor::new(vec![h, 1], vec![1.0; h])?);
    let norms = g.matmul(sq, ones)?; // [n+m, 1]
    let norms_row = g.transpose(norms)?; // [1, n+m]
    let stacked_t = g.transpose(stacked)?;
    let gram = g.matmul(stacked, stacked_t)?;
    let gram2 = g.scale(gram, -2.0)?;
    let d = g.add(gram2, norms)?; // column broadcast
    let d = g.add(d, norms_row)?; // row broadcast

    let sigma = match k.bandwidth {
        Bandwidth::Fixed(s) => s,
        Bandwidth::Median => {
            let vals = g.value(d).values();
            let total = n + m;
            let mut dists: Vec<f64> = Vec::with_capacity(total * (total - 1) / 2);
            for i in 0..total {
                for j in (i + 1)..total {
                    dists.push(vals[i * total + j].max(0.0).sqrt());
                }
            }
            dists.sort_by(f64::total_cmp);
            let median = if dists.is_empty() { 0.0 } else { dists[dists.len() / 2] };
            if median > 1e-12 {
                median
            } else {
                1.0 // degenerate batch: all pooled rows identical
            }
        }
    };

    let kmat = g.scale(d, -1.0 / (2.0 * sigma * sigma))?;
    let kmat = g.exp(kmat)?;
    Ok((kmat, n, m))
}

fn block_mean(g: &mut Graph, kmat: NodeId, rows: (usize, usize), cols: (usize, usize)) -> Result<NodeId> {
    let r = g.slice(kmat, 0, rows.0, rows.1)?;
    let b = g.slice(r, 1, cols.0, cols.1)?;
    g.mean(b)
}

/// Squared MMD between the rows of `p` and the rows of `q`, as a graph node.
///
/// Biased estimator: `mean k(p,p') + mean k(q,q') - 2 mean k(p,q)` with the
/// RBF kernel `k(u,v) = exp(-|u-v|^2 / (2 sigma^2))`. The unbiased variant
/// drops the diagonal terms and needs at least two samples per side.
pub fn mmd_node(g: &mut Graph, p: NodeId, q: NodeId, k: &KernelConfig) -> Result<NodeId> {
    let (n, m) = (g.value(p).shape()[0], g.value(q).shape()[0]);
    if n == 0 || m == 0 {
        return Err(Error::Invalid("mmd: empty sample set".into()));
    }
    let (kmat, n, m) = kernel_matrix(g, p, q, k)?;
    match k.estimator {
        Estimator::Biased => {
            let pp = block_mean(g, kmat, (0, n), (0, n))?;
            let qq = block_mean(g, kmat, (n, n + m), (n, n + m))?;
            let pq = block_mean(g, kmat, (0, n), (n, n + m))?;
            let s = g.add(pp, qq)?;
            let pq2 = g.scale(pq, -2.0)?;
            g.add(s, pq2)
        }
        Estimator::Unbiased => {
            if n < 2 || m < 2 {
                return Err(Error::Invalid(
                    "mmd: unbiased estimator needs at least two samples per side".into(),
                ));
            }
            // within-set diagonals are exactly k(u,u) = 1, so subtract the count
            let pp_block = {
                let r = g.slice(kmat, 0, 0, n)?;
                let b = g.slice(r, 1, 0, n)?;
                let s = g.sum(b)?;
                let c = g.constant(-(n as f64))?;
                let s = g.add(s, c)?;
                g.scale(s, 1.0 / (n * (n - 1)) as f64)?
            };
            let qq_block = {
                let r = g.slice(kmat, 0, n, n + m)?;
                let b = g.slice(r, 1, n, n + m)?;
                let s = g.sum(b)?;
                let c = g.constant(-(m as f64))?;
                let s = g.add(s, c)?;
                g.scale(s, 1.0 / (m * (m - 1)) as f64)?
            };
            let pq = block_mean(g, kmat, (0, n), (n, n + m))?;
            let s = g.add(pp_block, qq_block)?;
            let pq2 = g.scale(pq, -2.0)?;
            g.add(s, pq2)
        }
    }
}

/// Squared MMD between two explicit sample sets of H-vectors.
pub fn mmd(samples_p: &[Vec<f64>], samples_q: &[Vec<f64>], k: &KernelConfig) -> Result<f64> {
    if samples_p.is_empty() || samples_q.is_empty() {
        return Err(Error::Invalid("mmd: empty sample set".into()));
    }
    let h = samples_p[0].len();
    let to_tensor = |rows: &[Vec<f64>]| -> Result<Tensor> {
        if rows.iter().any(|r| r.len() != h) {
            return Err(Error::Invalid("mmd: ragged sample vectors".into()));
        }
        Tensor::new(vec![rows.len(), h], rows.concat())
    };
    let mut g = Graph::new();
    let p = g.leaf(to_tensor(samples_p)?);
    let q = g.leaf(to_tensor(samples_q)?);
    let node = mmd_node(&mut g, p, q, k)?;
    Ok(g.value(node).item())
}

// ── Individual losses (graph level) ─────────────────────────────────────

/// Paired loss of one batch:
/// `mean -[lambda * ctc_log_prob + (1 - lambda) * sequence_log_prob]`.
/// Returns the total node and, when the CTC branch is active, the mean CTC
/// negative log likelihood for the breakdown.
fn pair_loss_node(
    sess: &mut Session,
    batch: &PairedBatch,
    ctc_weight: f64,
) -> Result<(NodeId, Option<NodeId>)> {
    if batch.speech.is_empty() {
        return Err(Error::Invalid("loss_pair: empty batch".into()));
    }
    let mut att_terms = Vec::new();
    let mut ctc_terms = Vec::new();
    for i in 0..batch.speech.len() {
        let x = batch.speech.unpadded(i)?;
        let y = batch.text.unpadded(i)?;
        if y.is_empty() {
            return Err(Error::Invalid(format!(
                "loss_pair: empty transcript for {}",
                batch.speech.ids[i]
            )));
        }
        let f = sess.frontend(&x)?;
        let b = sess.apply_shared(f)?;
        let att_lp = sess.sequence_log_prob(b, y.indices())?;
        att_terms.push(att_lp);
        if ctc_weight > 0.0 {
            let ctc_lp = sess.ctc_log_prob(f, y.indices(), &x.id)?;
            ctc_terms.push(ctc_lp);
        }
    }
    let att_cat = sess.graph.concat(0, &att_terms)?;
    let att_mean = sess.graph.mean(att_cat)?;
    let att_nll = sess.graph.scale(att_mean, -1.0)?;
    if ctc_weight > 0.0 {
        let ctc_cat = sess.graph.concat(0, &ctc_terms)?;
        let ctc_mean = sess.graph.mean(ctc_cat)?;
        let ctc_nll = sess.graph.scale(ctc_mean, -1.0)?;
        let a = sess.graph.scale(ctc_nll, ctc_weight)?;
        let b = sess.graph.scale(att_nll, 1.0 - ctc_weight)?;
        let total = sess.graph.add(a, b)?;
        Ok((total, Some(ctc_nll)))
    } else {
        Ok((att_nll, None))
    }
}

/// Text autoencoder loss: `mean -log Pr(y | ê(g(y)))` under teacher forcing.
fn text_loss_node(sess: &mut Session, batch: &TextBatch) -> Result<NodeId> {
    if batch.text.is_empty() {
        return Err(Error::Invalid("loss_text: empty batch".into()));
    }
    let mut terms = Vec::new();
    for i in 0..batch.text.len() {
        let y = batch.text.unpadded(i)?;
        if y.is_empty() {
            return Err(Error::Invalid("loss_text: empty transcript".into()));
        }
        let b = sess.embed_text(&y)?;
        terms.push(sess.sequence_log_prob(b, y.indices())?);
    }
    let cat = sess.graph.concat(0, &terms)?;
    let mean = sess.graph.mean(cat)?;
    sess.graph.scale(mean, -1.0)
}

/// Inter-domain loss: MMD between the pooled speech-embedding frames and the
/// pooled text-embedding frames of unrelated batches.
fn dom_loss_node(
    sess: &mut Session,
    speech: &SpeechBatch,
    text: &TextBatch,
    k: &KernelConfig,
) -> Result<NodeId> {
    if speech.speech.is_empty() || text.text.is_empty() {
        return Err(Error::Invalid("loss_dom: empty batch".into()));
    }
    let mut p_parts = Vec::new();
    for i in 0..speech.speech.len() {
        let x = speech.speech.unpadded(i)?;
        p_parts.push(sess.encode_speech(&x)?);
    }
    let mut q_parts = Vec::new();
    for i in 0..text.text.len() {
        let y = text.text.unpadded(i)?;
        q_parts.push(sess.embed_text(&y)?);
    }
    let p = sess.graph.concat(0, &p_parts)?;
    let q = sess.graph.concat(0, &q_parts)?;
    mmd_node(&mut sess.graph, p, q, k)
}

/// Identity mapping loss of one embedding node: mean over frames of the
/// per-frame L1 distance between `ê(b)` and `b`.
fn idt_loss_node(sess: &mut Session, b: NodeId) -> Result<NodeId> {
    let frames = sess.graph.value(b).shape()[0];
    let eb = sess.apply_shared(b)?;
    let dist = sess.graph.l1_distance(eb, b)?;
    sess.graph.scale(dist, 1.0 / frames as f64)
}

/// Cycle loss of one utterance: decode a hypothesis with the current
/// parameters (discrete, no gradient), re-embed it through the text path,
/// and take the MMD between the original and reconstructed embeddings.
/// Returns the loss node and whether the decode came back empty.
fn cyc_loss_node(
    sess: &mut Session,
    params: &ModelParams,
    x: &FeatureSequence,
    k: &KernelConfig,
    max_len_factor: f64,
) -> Result<(NodeId, bool)> {
    let b = sess.encode_speech(x)?;
    let b_seq = sess.materialize(b, SourceTag::Speech);
    let mut scorer = decoder::AttentionScorer::new(params, &b_seq)?;
    let cap = ((b_seq.num_vectors() as f64 * max_len_factor).ceil() as usize).max(1);
    let hyp = decoder::greedy_decode_over(&mut scorer, cap)?;
    let (labels, empty) = if hyp.labels.is_empty() {
        (vec![UNK], true)
    } else {
        (hyp.labels, false)
    };
    let y = LabelSequence::new(labels)?;
    let cycle = sess.embed_text(&y)?;
    let loss = mmd_node(&mut sess.graph, b, cycle, k)?;
    Ok((loss, empty))
}

// ── Public value-level losses ───────────────────────────────────────────

/// `mean -[lambda * ctc + (1 - lambda) * attention]` over a paired batch.
pub fn loss_pair(params: &ModelParams, batch: &PairedBatch, ctc_weight: f64) -> Result<f64> {
    let mut sess = Session::new(params, false);
    let (node, _) = pair_loss_node(&mut sess, batch, ctc_weight)?;
    Ok(sess.graph.value(node).item())
}

/// Text autoencoder reconstruction loss over an unpaired text batch.
pub fn loss_text(params: &ModelParams, batch: &TextBatch) -> Result<f64> {
    let mut sess = Session::new(params, false);
    let node = text_loss_node(&mut sess, batch)?;
    Ok(sess.graph.value(node).item())
}

/// Inter-domain MMD between unpaired speech and text batches.
pub fn loss_dom(
    params: &ModelParams,
    speech: &SpeechBatch,
    text: &TextBatch,
    k: &KernelConfig,
) -> Result<f64> {
    let mut sess = Session::new(params, false);
    let node = dom_loss_node(&mut sess, speech, text, k)?;
    Ok(sess.graph.value(node).item())
}

/// Identity mapping loss of one embedding sequence from either source.
pub fn loss_idt(params: &ModelParams, b: &EmbeddingSequence) -> Result<f64> {
    let mut sess = Session::new(params, false);
    let bn = sess.graph.leaf(b.vectors.clone());
    let node = idt_loss_node(&mut sess, bn)?;
    Ok(sess.graph.value(node).item())
}

/// Cycle-consistent inter-domain loss of one utterance.
pub fn loss_cyc_dom(params: &ModelParams, x: &FeatureSequence, k: &KernelConfig) -> Result<f64> {
    let mut sess = Session::new(params, false);
    let (node, _) = cyc_loss_node(&mut sess, params, x, k, 1.5)?;
    Ok(sess.graph.value(node).item())
}

/// The cycle loss with an externally fixed hypothesis. Finite-difference
/// checks use this to hold the discrete decode constant while perturbing
/// parameters; it equals [`loss_cyc_dom`] whenever `hyp` is the greedy
/// decode under the same parameters.
pub fn cyc_dom_with_hypothesis(
    params: &ModelParams,
    x: &FeatureSequence,
    hyp: &LabelSequence,
    k: &KernelConfig,
) -> Result<f64> {
    let mut sess = Session::new(params, false);
    let b = sess.encode_speech(x)?;
    let cycle = sess.embed_text(hyp)?;
    let node = mmd_node(&mut sess.graph, b, cycle, k)?;
    Ok(sess.graph.value(node).item())
}

// ── Combined objective ──────────────────────────────────────────────────

/// Which batches a variant needs at the given mixing weights.
fn required_batches(cfg: &ObjectiveConfig) -> (bool, bool, bool) {
    if cfg.variant == Variant::Initial {
        return (true, false, false);
    }
    let pair = cfg.alpha > 0.0;
    let speech = cfg.alpha < 1.0 && cfg.beta > 0.0;
    // the Baseline speech term is an MMD against text embeddings, so it
    // needs the text batch even at beta = 1
    let text = cfg.alpha < 1.0
        && (cfg.beta < 1.0 || (cfg.variant == Variant::Baseline && cfg.beta > 0.0));
    (pair, speech, text)
}

struct Assembled {
    total: NodeId,
    components: BTreeMap<LossComponent, f64>,
    empty_hypotheses: usize,
}

fn assemble(
    sess: &mut Session,
    params: &ModelParams,
    cfg: &ObjectiveConfig,
    paired: Option<&PairedBatch>,
    speech: Option<&SpeechBatch>,
    text: Option<&TextBatch>,
) -> Result<Assembled> {
    cfg.validate()?;
    let (need_pair, need_speech, need_text) = required_batches(cfg);
    let missing = |what: &str| {
        Error::Invalid(format!(
            "combined_objective: variant {} with alpha={} beta={} needs a {what} batch",
            cfg.variant, cfg.alpha, cfg.beta
        ))
    };
    if need_pair && paired.is_none() {
        return Err(missing("paired"));
    }
    if need_speech && speech.is_none() {
        return Err(missing("speech"));
    }
    if need_text && text.is_none() {
        return Err(missing("text"));
    }

    let mut components = BTreeMap::new();
    let mut empty_hypotheses = 0usize;

    let pair_node = if need_pair {
        let (node, ctc) = pair_loss_node(sess, paired.unwrap(), cfg.ctc_weight)?;
        components.insert(LossComponent::Pair, sess.graph.value(node).item());
        if let Some(c) = ctc {
            components.insert(LossComponent::Ctc, sess.graph.value(c).item());
        }
        Some(node)
    } else {
        None
    };

    if cfg.variant == Variant::Initial || cfg.alpha == 1.0 {
        return Ok(Assembled {
            total: pair_node.expect("pair required"),
            components,
            empty_hypotheses,
        });
    }

    // speech-side term, skipped entirely at beta = 0
    let speech_node = if cfg.beta > 0.0 {
        let node = match cfg.variant {
            Variant::Baseline => {
                let n = dom_loss_node(sess, speech.unwrap(), text.unwrap(), &cfg.kernel)?;
                components.insert(LossComponent::Dom, sess.graph.value(n).item());
                n
            }
            Variant::RetrainIdt => {
                let n = idt_speech_node(sess, speech.unwrap())?;
                components.insert(LossComponent::IdtSpeech, sess.graph.value(n).item());
                n
            }
            Variant::RetrainCyc => {
                let (n, empties) = cyc_speech_node(sess, params, speech.unwrap(), cfg)?;
                empty_hypotheses += empties;
                components.insert(LossComponent::CycDom, sess.graph.value(n).item());
                n
            }
            Variant::RetrainCycIdt => {
                let (cyc, empties) = cyc_speech_node(sess, params, speech.unwrap(), cfg)?;
                empty_hypotheses += empties;
                components.insert(LossComponent::CycDom, sess.graph.value(cyc).item());
                let idt = idt_speech_node(sess, speech.unwrap())?;
                components.insert(LossComponent::IdtSpeech, sess.graph.value(idt).item());
                sess.graph.add(cyc, idt)?
            }
            Variant::Initial => unreachable!(),
        };
        Some(node)
    } else {
        None
    };

    // text-side term, skipped entirely at beta = 1
    let text_node = if cfg.beta < 1.0 {
        let node = match cfg.variant {
            Variant::RetrainIdt => {
                let n = idt_text_node(sess, text.unwrap())?;
                components.insert(LossComponent::IdtText, sess.graph.value(n).item());
                n
            }
            Variant::RetrainCycIdt => {
                let t = text_loss_node(sess, text.unwrap())?;
                components.insert(LossComponent::Text, sess.graph.value(t).item());
                let idt = idt_text_node(sess, text.unwrap())?;
                components.insert(LossComponent::IdtText, sess.graph.value(idt).item());
                sess.graph.add(t, idt)?
            }
            _ => {
                let t = text_loss_node(sess, text.unwrap())?;
                components.insert(LossComponent::Text, sess.graph.value(t).item());
                t
            }
        };
        Some(node)
    } else {
        None
    };

    let unpair = match (speech_node, text_node) {
        (Some(s), Some(t)) => {
            let ws = sess.graph.scale(s, cfg.beta)?;
            let wt = sess.graph.scale(t, 1.0 - cfg.beta)?;
            sess.graph.add(ws, wt)?
        }
        (Some(s), None) => s,
        (None, Some(t)) => t,
        (None, None) => unreachable!("beta is in [0, 1]"),
    };

    let total = if cfg.alpha == 0.0 {
        unpair
    } else {
        let wp = sess.graph.scale(pair_node.expect("pair required"), cfg.alpha)?;
        let wu = sess.graph.scale(unpair, 1.0 - cfg.alpha)?;
        sess.graph.add(wp, wu)?
    };
    Ok(Assembled {
        total,
        components,
        empty_hypotheses,
    })
}

/// Speech-side identity term: mean over utterances of `L_idt(e(x))`.
fn idt_speech_node(sess: &mut Session, batch: &SpeechBatch) -> Result<NodeId> {
    if batch.speech.is_empty() {
        return Err(Error::Invalid("loss_idt: empty speech batch".into()));
    }
    let mut terms = Vec::new();
    for i in 0..batch.speech.len() {
        let x = batch.speech.unpadded(i)?;
        let b = sess.encode_speech(&x)?;
        terms.push(idt_loss_node(sess, b)?);
    }
    let cat = sess.graph.concat(0, &terms)?;
    sess.graph.mean(cat)
}

/// Text-side identity term: mean over transcripts of `L_idt(ê(g(y)))`.
fn idt_text_node(sess: &mut Session, batch: &TextBatch) -> Result<NodeId> {
    if batch.text.is_empty() {
        return Err(Error::Invalid("loss_idt: empty text batch".into()));
    }
    let mut terms = Vec::new();
    for i in 0..batch.text.len() {
        let y = batch.text.unpadded(i)?;
        let b = sess.embed_text(&y)?;
        terms.push(idt_loss_node(sess, b)?);
    }
    let cat = sess.graph.concat(0, &terms)?;
    sess.graph.mean(cat)
}

/// Mean cycle loss over a speech batch.
fn cyc_speech_node(
    sess: &mut Session,
    params: &ModelParams,
    batch: &SpeechBatch,
    cfg: &ObjectiveConfig,
) -> Result<(NodeId, usize)> {
    if batch.speech.is_empty() {
        return Err(Error::Invalid("loss_cyc_dom: empty speech batch".into()));
    }
    let mut terms = Vec::new();
    let mut empties = 0usize;
    for i in 0..batch.speech.len() {
        let x = batch.speech.unpadded(i)?;
        let (n, empty) = cyc_loss_node(sess, params, &x, &cfg.kernel, cfg.max_len_factor)?;
        if empty {
            empties += 1;
        }
        terms.push(n);
    }
    let cat = sess.graph.concat(0, &terms)?;
    Ok((sess.graph.mean(cat)?, empties))
}

/// Evaluates the full semi-supervised objective
/// `alpha * L_pair + (1 - alpha) * L_unpair` for the configured variant.
///
/// Batches a variant does not touch may be `None`; terms with zero weight
/// are skipped, not computed and zeroed.
pub fn combined_objective(
    params: &ModelParams,
    cfg: &ObjectiveConfig,
    paired: Option<&PairedBatch>,
    speech: Option<&SpeechBatch>,
    text: Option<&TextBatch>,
) -> Result<LossBreakdown> {
    let mut sess = Session::new(params, false);
    let a = assemble(&mut sess, params, cfg, paired, speech, text)?;
    Ok(LossBreakdown {
        total: sess.graph.value(a.total).item(),
        components: a.components,
        empty_hypotheses: a.empty_hypotheses,
    })
}

/// As [`combined_objective`], also running backward and returning the
/// gradient of the total with respect to every parameter it reaches.
pub fn combined_objective_with_grads(
    params: &ModelParams,
    cfg: &ObjectiveConfig,
    paired: Option<&PairedBatch>,
    speech: Option<&SpeechBatch>,
    text: Option<&TextBatch>,
) -> Result<(LossBreakdown, BTreeMap<String, Vec<f64>>)> {
    let mut sess = Session::new(params, true);
    let a = assemble(&mut sess, params, cfg, paired, speech, text)?;
    sess.graph.backward(a.total)?;
    let breakdown = LossBreakdown {
        total: sess.graph.value(a.total).item(),
        components: a.components,
        empty_hypotheses: a.empty_hypotheses,
    };
    Ok((breakdown, sess.gradients()))
}
