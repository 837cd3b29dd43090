//! Graph-building forward passes over a bound parameter set.
//!
//! A [`Session`] clones every parameter into a fresh [`Graph`] as a leaf
//! (trainable sessions mark them `requires_grad`), then builds forward
//! computations node by node. One session per objective evaluation; the
//! trainer reads gradients back out by parameter name after `backward`.

use super::{
    Architecture, DecoderState, EmbeddingSequence, FeatureSequence, ModelParams, SourceTag, EOS,
    SOS,
};
use crate::autograd::{Graph, NodeId, Tensor};
use crate::{Error, Result};
use std::collections::BTreeMap;

pub struct Session {
    pub graph: Graph,
    arch: Architecture,
    bound: BTreeMap<String, NodeId>,
}

/// Sinusoidal position features, one row per frame: sin/cos pairs at
/// wavelengths 2^1 .. 2^(POS_DIM/2), scaled for desk-length sequences.
pub(crate) fn position_features(frames: usize) -> Tensor {
    let dim = crate::model::POS_DIM;
    let mut values = Vec::with_capacity(frames * dim);
    for u in 0..frames {
        for i in 0..dim / 2 {
            let rate = (2.0_f64).powi(i as i32 + 1);
            values.push((u as f64 / rate).sin());
            values.push((u as f64 / rate).cos());
        }
    }
    Tensor::new(vec![frames, dim], values).expect("finite position features")
}

/// Gated recurrent cell with update and reset gates:
/// `z, r = sigmoid(x·Wx + h·Whzr + b)`, `n = tanh(x·Wx + (r*h)·Whn + b)`,
/// `h' = h + z * (n - h)`. `x_parts` is the precomputed `[1, 3H]` input
/// contribution (bias included), laid out as update | reset | candidate.
pub(crate) fn gru_cell(
    g: &mut Graph,
    x_parts: NodeId,
    h: NodeId,
    whzr: NodeId,
    whn: NodeId,
    h_dim: usize,
) -> Result<NodeId> {
    let zr_x = g.slice(x_parts, 1, 0, 2 * h_dim)?;
    let n_x = g.slice(x_parts, 1, 2 * h_dim, 3 * h_dim)?;
    let h_zr = g.matmul(h, whzr)?;
    let zr_sum = g.add(zr_x, h_zr)?;
    let zr = g.sigmoid(zr_sum)?;
    let z = g.slice(zr, 1, 0, h_dim)?;
    let r = g.slice(zr, 1, h_dim, 2 * h_dim)?;
    let rh = g.mul(r, h)?;
    let rh_w = g.matmul(rh, whn)?;
    let n_sum = g.add(n_x, rh_w)?;
    let n = g.tanh(n_sum)?;
    let delta = g.sub(n, h)?;
    let z_delta = g.mul(z, delta)?;
    g.add(h, z_delta)
}

/// Node-level decoder state (hidden vector per layer plus attention context).
#[derive(Debug, Clone)]
pub struct DecoderNodes {
    pub hidden: Vec<NodeId>,
    pub context: NodeId,
}

impl Session {
    pub fn new(params: &ModelParams, trainable: bool) -> Self {
        let mut graph = Graph::new();
        let mut bound = BTreeMap::new();
        for (name, tensor) in params.iter() {
            let t = if trainable {
                tensor.clone().requires_grad()
            } else {
                tensor.clone()
            };
            bound.insert(name.clone(), graph.leaf(t));
        }
        Session {
            graph,
            arch: *params.arch(),
            bound,
        }
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn param(&self, name: &str) -> NodeId {
        *self
            .bound
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    /// Collects gradients accumulated on the bound parameters.
    pub fn gradients(&self) -> BTreeMap<String, Vec<f64>> {
        self.bound
            .iter()
            .filter_map(|(name, id)| {
                self.graph.grad(*id).map(|g| (name.clone(), g.to_vec()))
            })
            .collect()
    }

    pub fn materialize(&self, node: NodeId, source: SourceTag) -> EmbeddingSequence {
        EmbeddingSequence {
            vectors: self.graph.value(node).clone(),
            source,
        }
    }

    // ── Recurrent building blocks ───────────────────────────────────────

    /// One gated-recurrent step. `x_parts` is the precomputed `x·Wx + b`
    /// row for this step, `[1, 3H]` laid out as update | reset | candidate.
    fn gru_step(&mut self, prefix: &str, x_parts: NodeId, h: NodeId) -> Result<NodeId> {
        let whzr = self.bound[&format!("{prefix}.whzr")];
        let whn = self.bound[&format!("{prefix}.whn")];
        gru_cell(&mut self.graph, x_parts, h, whzr, whn, self.arch.hidden_dim)
    }

    /// Runs a GRU over the rows of `input` and returns one `[1, H]` node per
    /// step, in input order. `reverse` walks the rows back to front.
    fn gru_sequence(&mut self, prefix: &str, input: NodeId, reverse: bool) -> Result<Vec<NodeId>> {
        let steps = self.graph.value(input).shape()[0];
        let h_dim = self.arch.hidden_dim;
        let wx = self.bound[&format!("{prefix}.wx")];
        let bias = self.bound[&format!("{prefix}.b")];
        let xw_all = self.graph.matmul(input, wx)?;
        let xw_all = self.graph.add(xw_all, bias)?;

        let mut h = self.graph.leaf(Tensor::zeros(vec![1, h_dim]));
        let order: Vec<usize> = if reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        let mut out = vec![None; steps];
        for t in order {
            let x_parts = self.graph.slice(xw_all, 0, t, t + 1)?;
            h = self.gru_step(prefix, x_parts, h)?;
            out[t] = Some(h);
        }
        Ok(out.into_iter().map(Option::unwrap).collect())
    }

    /// One bidirectional layer: `proj(concat(fwd, bwd))`, optionally with a
    /// residual connection back to the input. Shared-encoder layers keep the
    /// residual so `ê` is an exact identity at zero weights; the text
    /// embedding layer does not, so its outputs are fully contextual.
    fn bidirectional(&mut self, prefix: &str, input: NodeId, residual: bool) -> Result<NodeId> {
        let fwd = self.gru_sequence(&format!("{prefix}.fwd"), input, false)?;
        let bwd = self.gru_sequence(&format!("{prefix}.bwd"), input, true)?;
        let rows: Vec<NodeId> = fwd
            .iter()
            .zip(&bwd)
            .map(|(f, b)| self.graph.concat(1, &[*f, *b]))
            .collect::<Result<_>>()?;
        let cat = self.graph.concat(0, &rows)?;
        let w = self.bound[&format!("{prefix}.proj.w")];
        let b = self.bound[&format!("{prefix}.proj.b")];
        let proj = self.graph.matmul(cat, w)?;
        let proj = self.graph.add(proj, b)?;
        if residual {
            self.graph.add(input, proj)
        } else {
            Ok(proj)
        }
    }

    // ── Encoder paths ───────────────────────────────────────────────────

    /// Front-end `f`: linear projection, one recurrent layer, then frame
    /// subsampling. `[T, F] -> [U, H]` with `U = ceil(T / s)`.
    pub fn frontend(&mut self, x: &FeatureSequence) -> Result<NodeId> {
        if x.feature_dim() != self.arch.feature_dim {
            return Err(Error::BadShape {
                op: "encode_speech",
                expected: format!("feature dim {}", self.arch.feature_dim),
                got: x.frames().shape().to_vec(),
            });
        }
        let frames = self.graph.leaf(x.frames().clone());
        let w = self.bound["frontend.proj.w"];
        let b = self.bound["frontend.proj.b"];
        let proj = self.graph.matmul(frames, w)?;
        let proj = self.graph.add(proj, b)?;
        let hs = self.gru_sequence("frontend.gru", proj, false)?;
        let s = self.arch.subsample;
        let rows: Vec<NodeId> = hs
            .iter()
            .enumerate()
            .filter(|(t, _)| t % s == 0)
            .map(|(_, h)| *h)
            .collect();
        self.graph.concat(0, &rows)
    }

    /// Shared encoder `ê`: a stack of bidirectional residual layers mapping
    /// the embedding space onto itself, applicable to either source.
    pub fn apply_shared(&mut self, input: NodeId) -> Result<NodeId> {
        if self.graph.value(input).shape()[1] != self.arch.hidden_dim {
            return Err(Error::BadShape {
                op: "shared_encoder",
                expected: format!("width {}", self.arch.hidden_dim),
                got: self.graph.value(input).shape().to_vec(),
            });
        }
        let mut cur = input;
        for l in 0..self.arch.shared_layers {
            cur = self.bidirectional(&format!("shared.{l}"), cur, true)?;
        }
        Ok(cur)
    }

    /// `b = ê(f(x))`.
    pub fn encode_speech(&mut self, x: &FeatureSequence) -> Result<NodeId> {
        let f = self.frontend(x)?;
        self.apply_shared(f)
    }

    /// Text embedding `g`: table lookup plus one bidirectional layer.
    /// `[|y|] -> [|y|, H]`.
    pub fn text_embedding(&mut self, y: &[usize]) -> Result<NodeId> {
        if y.is_empty() {
            return Err(Error::Invalid("embed_text: empty label sequence".into()));
        }
        let table = self.bound["textembed.table"];
        let rows = self.graph.embedding_lookup(table, y)?;
        self.bidirectional("textembed", rows, false)
    }

    /// `b' = ê(g(y))`.
    pub fn embed_text(&mut self, y: &crate::model::LabelSequence) -> Result<NodeId> {
        let g = self.text_embedding(y.indices())?;
        self.apply_shared(g)
    }

    // ── Attention decoder ───────────────────────────────────────────────

    /// Precomputed attention keys for one embedding sequence:
    /// `b · Wk + pos · Wp`, where `pos` holds fixed sinusoidal features of
    /// the frame index. The position term lets the decoder distinguish
    /// repeated content at different positions; the embeddings themselves
    /// stay position-free.
    pub fn attention_keys(&mut self, b: NodeId) -> Result<NodeId> {
        let wk = self.bound["decoder.attn.wk"];
        let wp = self.bound["decoder.attn.wp"];
        let frames = self.graph.value(b).shape()[0];
        let content = self.graph.matmul(b, wk)?;
        let pos = self.graph.leaf(position_features(frames));
        let pos_proj = self.graph.matmul(pos, wp)?;
        self.graph.add(content, pos_proj)
    }

    pub fn decoder_start(&mut self) -> DecoderNodes {
        let h_dim = self.arch.hidden_dim;
        let hidden = (0..self.arch.decoder_layers)
            .map(|_| self.graph.leaf(Tensor::zeros(vec![1, h_dim])))
            .collect();
        let context = self.graph.leaf(Tensor::zeros(vec![1, h_dim]));
        DecoderNodes { hidden, context }
    }

    pub fn bind_decoder_state(&mut self, state: &DecoderState) -> Result<DecoderNodes> {
        let h_dim = self.arch.hidden_dim;
        let hidden = state
            .hidden
            .iter()
            .map(|h| Ok(self.graph.leaf(Tensor::new(vec![1, h_dim], h.clone())?)))
            .collect::<Result<_>>()?;
        let context = self
            .graph
            .leaf(Tensor::new(vec![1, h_dim], state.context.clone())?);
        Ok(DecoderNodes { hidden, context })
    }

    pub fn materialize_decoder_state(&self, nodes: &DecoderNodes) -> DecoderState {
        DecoderState {
            hidden: nodes
                .hidden
                .iter()
                .map(|h| self.graph.value(*h).values().to_vec())
                .collect(),
            context: self.graph.value(nodes.context).values().to_vec(),
            prev_label: SOS,
        }
    }

    /// One decoder step: content-based attention over `b`, the recurrent
    /// stack, then a softmax over the vocabulary. Returns the `[1, V]`
    /// distribution node and the new state.
    pub fn decoder_step(
        &mut self,
        prev_label: usize,
        state: &DecoderNodes,
        b: NodeId,
        keys: NodeId,
    ) -> Result<(NodeId, DecoderNodes)> {
        let h_dim = self.arch.hidden_dim;
        let embed = self.bound["decoder.embed"];
        let wq = self.bound["decoder.attn.wq"];
        let bq = self.bound["decoder.attn.bq"];

        let emb_prev = self.graph.embedding_lookup(embed, &[prev_label])?;

        // content-based attention with the previous top hidden as the query
        let top = *state.hidden.last().expect("decoder has at least one layer");
        let q = self.graph.matmul(top, wq)?;
        let q = self.graph.add(q, bq)?;
        let keys_t = self.graph.transpose(keys)?;
        let scores = self.graph.matmul(q, keys_t)?;
        let scores = self.graph.scale(scores, 1.0 / (h_dim as f64).sqrt())?;
        let attn = self.graph.softmax(scores)?;
        let context = self.graph.matmul(attn, b)?;
        // feed the attended position back in, so the recurrent state can
        // track progress along the utterance
        let frames = self.graph.value(b).shape()[0];
        let pos = self.graph.leaf(position_features(frames));
        let context_pos = self.graph.matmul(attn, pos)?;

        let mut input = self.graph.concat(1, &[emb_prev, context, context_pos])?;
        let mut hidden = Vec::with_capacity(state.hidden.len());
        for (l, h_prev) in state.hidden.iter().enumerate() {
            let prefix = format!("decoder.{l}.gru");
            let wx = self.bound[&format!("{prefix}.wx")];
            let bias = self.bound[&format!("{prefix}.b")];
            let xw = self.graph.matmul(input, wx)?;
            let xw = self.graph.add(xw, bias)?;
            let h_new = self.gru_step(&prefix, xw, *h_prev)?;
            hidden.push(h_new);
            input = h_new;
        }

        let out_w = self.bound["decoder.out.w"];
        let out_b = self.bound["decoder.out.b"];
        let top_ctx = self.graph.concat(1, &[*hidden.last().unwrap(), context])?;
        let logits = self.graph.matmul(top_ctx, out_w)?;
        let logits = self.graph.add(logits, out_b)?;
        let dist = self.graph.softmax(logits)?;
        Ok((dist, DecoderNodes { hidden, context }))
    }

    /// Teacher-forced `sum_t log Pr(y_t | y_{t-1}, b)` including the EOS
    /// term, as a scalar node.
    pub fn sequence_log_prob(&mut self, b: NodeId, y: &[usize]) -> Result<NodeId> {
        if y.is_empty() {
            return Err(Error::Invalid("sequence_log_prob: empty target".into()));
        }
        let keys = self.attention_keys(b)?;
        let mut state = self.decoder_start();
        let mut prev = SOS;
        let mut total: Option<NodeId> = None;
        for &target in y.iter().chain(std::iter::once(&EOS)) {
            let (dist, next) = self.decoder_step(prev, &state, b, keys)?;
            let p = self.graph.pick(dist, 0, target)?;
            let lp = self.graph.log(p)?;
            total = Some(match total {
                Some(acc) => self.graph.add(acc, lp)?,
                None => lp,
            });
            state = next;
            prev = target;
        }
        Ok(total.unwrap())
    }

    /// CTC forward log probability of `y` over the front-end output frames.
    pub fn ctc_log_prob(&mut self, f_out: NodeId, y: &[usize], utterance: &str) -> Result<NodeId> {
        let w = self.bound["ctc.w"];
        let b = self.bound["ctc.b"];
        let logits = self.graph.matmul(f_out, w)?;
        let logits = self.graph.add(logits, b)?;
        let probs = self.graph.softmax(logits)?;
        super::ctc::forward_log_prob(&mut self.graph, probs, y, crate::model::BLANK, utterance)
    }
}
