//! Character-level recurrent language model for shallow fusion and the
//! text-only training stage.
//!
//! A single gated recurrent layer over character embeddings with a softmax
//! output. The output projection starts at zero, so a freshly initialized
//! model is exactly uniform and its perplexity equals the vocabulary size.

use crate::autograd::{Graph, NodeId, Tensor};
use crate::model::session::gru_cell;
use crate::model::{LabelSequence, EOS, SOS};
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmArchitecture {
    pub vocab_size: usize,
    pub hidden_dim: usize,
}

impl LmArchitecture {
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let (v, h) = (self.vocab_size, self.hidden_dim);
        let mut specs = vec![
            ("embed".to_string(), vec![v, h]),
            ("gru.wx".to_string(), vec![h, 3 * h]),
            ("gru.whzr".to_string(), vec![h, 2 * h]),
            ("gru.whn".to_string(), vec![h, h]),
            ("gru.b".to_string(), vec![3 * h]),
            ("out.w".to_string(), vec![h, v]),
            ("out.b".to_string(), vec![v]),
        ];
        specs.sort_by(|a, b| a.0.cmp(&b.0));
        specs
    }
}

#[derive(Debug, Clone)]
pub struct LmParams {
    arch: LmArchitecture,
    tensors: BTreeMap<String, Tensor>,
}

impl LmParams {
    /// Xavier init for the recurrent weights; zero output projection so the
    /// initial next-character distribution is uniform.
    pub fn init(arch: LmArchitecture, seed: u64) -> Result<Self> {
        let mut rng = crate::seeds::rng(seed, "lm-params");
        let mut tensors = BTreeMap::new();
        for (name, shape) in arch.param_specs() {
            let n: usize = shape.iter().product();
            let values = if shape.len() == 1 || name.starts_with("out.") {
                vec![0.0; n]
            } else {
                let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            };
            tensors.insert(name, Tensor::new(shape, values)?);
        }
        Ok(LmParams { arch, tensors })
    }

    pub fn from_tensors(arch: LmArchitecture, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        for (name, shape) in arch.param_specs() {
            match tensors.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                _ => return Err(Error::Checkpoint(format!("lm parameter {name} missing or misshapen"))),
            }
        }
        Ok(LmParams { arch, tensors })
    }

    pub fn arch(&self) -> &LmArchitecture {
        &self.arch
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.tensors
    }
}

struct LmGraph {
    graph: Graph,
    bound: BTreeMap<String, NodeId>,
    hidden_dim: usize,
}

impl LmGraph {
    fn new(params: &LmParams, trainable: bool) -> Self {
        let mut graph = Graph::new();
        let mut bound = BTreeMap::new();
        for (name, t) in &params.tensors {
            let t = if trainable {
                t.clone().requires_grad()
            } else {
                t.clone()
            };
            bound.insert(name.clone(), graph.leaf(t));
        }
        LmGraph {
            graph,
            bound,
            hidden_dim: params.arch.hidden_dim,
        }
    }

    fn step(&mut self, prev: usize, h: NodeId) -> Result<(NodeId, NodeId)> {
        let g = &mut self.graph;
        let emb = g.embedding_lookup(self.bound["embed"], &[prev])?;
        let xw = g.matmul(emb, self.bound["gru.wx"])?;
        let xw = g.add(xw, self.bound["gru.b"])?;
        let h_new = gru_cell(g, xw, h, self.bound["gru.whzr"], self.bound["gru.whn"], self.hidden_dim)?;
        let logits = g.matmul(h_new, self.bound["out.w"])?;
        let logits = g.add(logits, self.bound["out.b"])?;
        let dist = g.softmax(logits)?;
        Ok((dist, h_new))
    }

    fn start(&mut self) -> NodeId {
        self.graph.leaf(Tensor::zeros(vec![1, self.hidden_dim]))
    }
}

/// Total negative log likelihood and token count of a batch under
/// next-character prediction (`SOS + y` in, `y + EOS` out).
pub fn batch_nll(params: &LmParams, seqs: &[&LabelSequence]) -> Result<(f64, usize)> {
    let (value, _, tokens) = nll_impl(params, seqs, false)?;
    Ok((value, tokens))
}

/// As [`batch_nll`], also returning gradients of the mean per-token NLL.
pub fn batch_nll_with_grads(
    params: &LmParams,
    seqs: &[&LabelSequence],
) -> Result<(f64, BTreeMap<String, Vec<f64>>, usize)> {
    nll_impl(params, seqs, true)
}

fn nll_impl(
    params: &LmParams,
    seqs: &[&LabelSequence],
    grads: bool,
) -> Result<(f64, BTreeMap<String, Vec<f64>>, usize)> {
    if seqs.is_empty() {
        return Err(Error::Invalid("lm: empty batch".into()));
    }
    let mut lm = LmGraph::new(params, grads);
    let mut total: Option<NodeId> = None;
    let mut tokens = 0usize;
    for y in seqs {
        let mut h = lm.start();
        let mut prev = SOS;
        for &target in y.indices().iter().chain(std::iter::once(&EOS)) {
            let (dist, h_new) = lm.step(prev, h)?;
            let p = lm.graph.pick(dist, 0, target)?;
            let lp = lm.graph.log(p)?;
            total = Some(match total {
                Some(acc) => lm.graph.add(acc, lp)?,
                None => lp,
            });
            tokens += 1;
            h = h_new;
            prev = target;
        }
    }
    let total = total.expect("at least one token");
    let mean_nll = lm.graph.scale(total, -1.0 / tokens as f64)?;
    let value = lm.graph.value(mean_nll).item() * tokens as f64;
    let g = if grads {
        lm.graph.backward(mean_nll)?;
        lm.bound
            .iter()
            .filter_map(|(name, id)| lm.graph.grad(*id).map(|g| (name.clone(), g.to_vec())))
            .collect()
    } else {
        BTreeMap::new()
    };
    Ok((value, g, tokens))
}

/// Perplexity of the model over a text set: `exp(total NLL / tokens)`.
pub fn perplexity(params: &LmParams, seqs: &[&LabelSequence]) -> Result<f64> {
    let (nll, tokens) = batch_nll(params, seqs)?;
    Ok((nll / tokens as f64).exp())
}

/// Value-level scoring state for fusion during decoding.
#[derive(Debug, Clone)]
pub struct LmState {
    hidden: Vec<f64>,
    pub prev: usize,
}

/// Stateless stepper over immutable LM parameters.
pub struct LmScorer<'a> {
    params: &'a LmParams,
}

impl<'a> LmScorer<'a> {
    pub fn new(params: &'a LmParams) -> Self {
        LmScorer { params }
    }

    pub fn vocab_size(&self) -> usize {
        self.params.arch.vocab_size
    }

    pub fn start(&self) -> LmState {
        LmState {
            hidden: vec![0.0; self.params.arch.hidden_dim],
            prev: SOS,
        }
    }

    /// Next-character distribution (probabilities) after consuming `prev`.
    pub fn step(&self, prev: usize, state: &LmState) -> Result<(Vec<f64>, LmState)> {
        let mut lm = LmGraph::new(self.params, false);
        let h = lm
            .graph
            .leaf(Tensor::new(vec![1, self.params.arch.hidden_dim], state.hidden.clone())?);
        let (dist, h_new) = lm.step(prev, h)?;
        Ok((
            lm.graph.value(dist).values().to_vec(),
            LmState {
                hidden: lm.graph.value(h_new).values().to_vec(),
                prev,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch() -> LmArchitecture {
        LmArchitecture {
            vocab_size: 6,
            hidden_dim: 4,
        }
    }

    #[test]
    fn fresh_model_is_uniform() {
        let params = LmParams::init(arch(), 3).unwrap();
        let scorer = LmScorer::new(&params);
        let (dist, _) = scorer.step(SOS, &scorer.start()).unwrap();
        for p in &dist {
            assert!((p - 1.0 / 6.0).abs() < 1e-15);
        }
        let sum: f64 = dist.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fresh_perplexity_equals_vocab_size() {
        let params = LmParams::init(arch(), 3).unwrap();
        let seqs = vec![
            LabelSequence::new(vec![4, 5, 4]).unwrap(),
            LabelSequence::new(vec![5]).unwrap(),
        ];
        let refs: Vec<&LabelSequence> = seqs.iter().collect();
        let ppl = perplexity(&params, &refs).unwrap();
        assert!((ppl - 6.0).abs() < 1e-9, "{ppl}");
    }

    #[test]
    fn distribution_sums_to_one_each_step() {
        let params = LmParams::init(arch(), 9).unwrap();
        let scorer = LmScorer::new(&params);
        let mut state = scorer.start();
        for &sym in &[SOS, 4, 5, 4] {
            let (dist, next) = scorer.step(sym, &state).unwrap();
            let sum: f64 = dist.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            state = next;
        }
    }
}
