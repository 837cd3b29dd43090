//! The training pipeline: supervised initial training, semi-supervised
//! retraining under any variant, character-LM training, and the
//! speech-to-text-ratio sweep.
//!
//! Every stage is an Adadelta loop with per-epoch dev scoring, best-dev
//! checkpointing, and early stopping. One retraining step draws one paired
//! batch plus whatever unpaired batches the variant needs, so the step loss
//! is literally the weighted objective rather than an alternation schedule.

use crate::autograd::Tensor;
use crate::corpus::{
    paired_batches, speech_batches, text_batches, CorpusData, ScoringUtterance,
};
use crate::decoder::{self, DecodeRow};
use crate::lm::{self, LmArchitecture, LmParams};
use crate::losses::{
    combined_objective_with_grads, KernelConfig, LossComponent, ObjectiveConfig, Variant,
};
use crate::metrics::{score_corpus, Unit};
use crate::model::{
    encode_speech, Architecture, AsrCheckpoint, FeatureSequence, LmCheckpoint, ModelParams,
};
use crate::seeds;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

/// Everything one experiment run needs to know.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub variant: Variant,
    /// Paired/unpaired mixing weight.
    pub alpha: f64,
    /// Speech-to-text ratio inside the unpaired loss.
    pub beta: f64,
    pub initial_epochs: usize,
    pub retrain_epochs: usize,
    pub lm_epochs: usize,
    pub batch_size: usize,
    /// Adadelta decay.
    pub rho: f64,
    /// Adadelta stabilizer.
    pub epsilon: f64,
    pub hidden_dim: usize,
    pub shared_layers: usize,
    pub decoder_layers: usize,
    pub lm_hidden_dim: usize,
    pub subsample: usize,
    pub kernel: KernelConfig,
    /// CTC multitask weight in the paired loss.
    pub ctc_weight: f64,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            variant: Variant::RetrainCycIdt,
            alpha: 0.5,
            beta: 0.4,
            initial_epochs: 15,
            retrain_epochs: 8,
            lm_epochs: 8,
            batch_size: 16,
            rho: 0.95,
            epsilon: 1e-6,
            hidden_dim: 32,
            shared_layers: 1,
            decoder_layers: 1,
            lm_hidden_dim: 32,
            subsample: 2,
            kernel: KernelConfig::default(),
            ctc_weight: 0.3,
            patience: 3,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Config("rho must lie in [0, 1)".into()));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Config("epsilon must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.kernel.validate()
    }

    pub fn architecture(&self, feature_dim: usize, vocab_size: usize) -> Architecture {
        Architecture {
            feature_dim,
            hidden_dim: self.hidden_dim,
            shared_layers: self.shared_layers,
            decoder_layers: self.decoder_layers,
            vocab_size,
            subsample: self.subsample,
        }
    }

    pub fn objective(&self, variant: Variant) -> ObjectiveConfig {
        ObjectiveConfig {
            variant,
            alpha: self.alpha,
            beta: self.beta,
            ctc_weight: self.ctc_weight,
            kernel: self.kernel,
            max_len_factor: 1.5,
        }
    }
}

// ── Adadelta ────────────────────────────────────────────────────────────

/// Per-parameter running averages of squared gradients and squared updates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub eg2: BTreeMap<String, Vec<f64>>,
    pub edx2: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn zeros<'a>(shapes: impl Iterator<Item = (&'a String, usize)>) -> Self {
        let mut eg2 = BTreeMap::new();
        let mut edx2 = BTreeMap::new();
        for (name, n) in shapes {
            eg2.insert(name.clone(), vec![0.0; n]);
            edx2.insert(name.clone(), vec![0.0; n]);
        }
        OptimizerState { eg2, edx2 }
    }

    pub fn for_params(params: &ModelParams) -> Self {
        Self::zeros(params.iter().map(|(n, t)| (n, t.numel())))
    }
}

/// One Adadelta update:
/// `E[g^2] <- rho E[g^2] + (1-rho) g^2`,
/// `dx = -sqrt(E[dx^2]+eps)/sqrt(E[g^2]+eps) * g`,
/// `E[dx^2] <- rho E[dx^2] + (1-rho) dx^2`, `param += dx`.
///
/// Parameters without a gradient entry decay their accumulators as if the
/// gradient were zero and stay unchanged.
pub fn adadelta_step(
    tensors: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut OptimizerState,
    rho: f64,
    epsilon: f64,
) -> Result<()> {
    for (name, g) in grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGrad(name.clone()));
        }
    }
    for (name, tensor) in tensors.iter_mut() {
        let eg2 = state
            .eg2
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("optimizer state missing {name}")))?;
        let edx2 = state.edx2.get_mut(name).expect("edx2 mirrors eg2");
        let zero;
        let g = match grads.get(name) {
            Some(g) => g.as_slice(),
            None => {
                zero = vec![0.0; tensor.numel()];
                zero.as_slice()
            }
        };
        let values = tensor.values_mut();
        for i in 0..values.len() {
            eg2[i] = rho * eg2[i] + (1.0 - rho) * g[i] * g[i];
            let dx = -((edx2[i] + epsilon).sqrt() / (eg2[i] + epsilon).sqrt()) * g[i];
            edx2[i] = rho * edx2[i] + (1.0 - rho) * dx * dx;
            values[i] += dx;
        }
    }
    Ok(())
}

// ── Training logs ───────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub components: BTreeMap<LossComponent, f64>,
    pub dev_cer: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,total");
        for c in LossComponent::ALL {
            write!(out, ",{}", c.as_str()).unwrap();
        }
        out.push_str(",dev_cer,wall_secs\n");
        for r in &self.records {
            write!(out, "{},{:.6}", r.epoch, r.total).unwrap();
            for c in LossComponent::ALL {
                match r.components.get(&c) {
                    Some(v) => write!(out, ",{v:.6}").unwrap(),
                    None => out.push(','),
                }
            }
            writeln!(out, ",{:.6},{:.3}", r.dev_cer, r.wall_secs).unwrap();
        }
        out
    }

    /// Equality up to wall-clock time; reruns with the same seed must agree
    /// on everything else.
    pub fn same_trajectory(&self, other: &TrainLog) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                a.epoch == b.epoch
                    && a.total == b.total
                    && a.components == b.components
                    && a.dev_cer == b.dev_cer
            })
    }
}

// ── Evaluation helpers ──────────────────────────────────────────────────

/// Greedy-decodes a scored split into decode rows.
pub fn greedy_decode_split(
    params: &ModelParams,
    data: &CorpusData,
    utts: &[ScoringUtterance],
) -> Result<Vec<DecodeRow>> {
    let mut rows = Vec::with_capacity(utts.len());
    for u in utts {
        let x = FeatureSequence::new(u.id.clone(), u.frames.clone())?;
        let b = encode_speech(params, &x)?;
        let hyp = decoder::greedy_decode(params, &b)?;
        rows.push(DecodeRow {
            id: u.id.clone(),
            text: data.vocab.decode(&hyp.labels),
            score: hyp.score,
        });
    }
    Ok(rows)
}

/// Corpus CER of a greedy decode of a split.
pub fn greedy_cer(params: &ModelParams, data: &CorpusData, utts: &[ScoringUtterance]) -> Result<f64> {
    let rows = greedy_decode_split(params, data, utts)?;
    let refs: Vec<(String, String)> = utts
        .iter()
        .map(|u| (u.id.clone(), u.transcript.clone()))
        .collect();
    Ok(score_corpus(&refs, &rows, Unit::Char)?.corpus_rate())
}

// ── Stage loops ─────────────────────────────────────────────────────────

struct BestTracker {
    cer: f64,
    epoch: usize,
    params: ModelParams,
    optimizer: OptimizerState,
    stale: usize,
}

impl BestTracker {
    fn new(params: &ModelParams, optimizer: &OptimizerState) -> Self {
        BestTracker {
            cer: f64::INFINITY,
            epoch: 0,
            params: params.clone(),
            optimizer: optimizer.clone(),
            stale: 0,
        }
    }

    /// Records the epoch; returns true when patience is exhausted.
    fn update(
        &mut self,
        cer: f64,
        epoch: usize,
        params: &ModelParams,
        optimizer: &OptimizerState,
        patience: usize,
    ) -> bool {
        if cer < self.cer {
            self.cer = cer;
            self.epoch = epoch;
            self.params = params.clone();
            self.optimizer = optimizer.clone();
            self.stale = 0;
            false
        } else {
            self.stale += 1;
            self.stale >= patience
        }
    }
}

fn run_epochs(
    cfg: &ExperimentConfig,
    data: &CorpusData,
    variant: Variant,
    params: &mut ModelParams,
    optimizer: &mut OptimizerState,
    epochs: usize,
    seed_label: &str,
    mut progress: Option<&mut dyn FnMut(&EpochRecord)>,
) -> Result<(AsrCheckpoint, TrainLog)> {
    let objective = if variant == Variant::Initial {
        ObjectiveConfig {
            alpha: 1.0,
            ..cfg.objective(Variant::Initial)
        }
    } else {
        cfg.objective(variant)
    };
    let batch_seed = seeds::derive(cfg.seed, seed_label);
    let need_speech = variant != Variant::Initial && objective.alpha < 1.0 && objective.beta > 0.0;
    let need_text = variant != Variant::Initial
        && objective.alpha < 1.0
        && (objective.beta < 1.0 || (variant == Variant::Baseline && objective.beta > 0.0));

    let mut log = TrainLog::default();
    let mut best = BestTracker::new(params, optimizer);
    let mut diverged = false;

    for epoch in 0..epochs {
        let start = Instant::now();
        let paired = paired_batches(&data.paired, cfg.batch_size, batch_seed, epoch);
        if paired.is_empty() {
            return Err(Error::Invalid("training: paired split is empty".into()));
        }
        let speech = if need_speech {
            speech_batches(&data.unpaired_speech, cfg.batch_size, batch_seed, epoch)
        } else {
            Vec::new()
        };
        let text = if need_text {
            text_batches(&data.unpaired_text, cfg.batch_size, batch_seed, epoch)
        } else {
            Vec::new()
        };
        if need_speech && speech.is_empty() {
            return Err(Error::Invalid("training: unpaired speech split is empty".into()));
        }
        if need_text && text.is_empty() {
            return Err(Error::Invalid("training: unpaired text split is empty".into()));
        }

        let steps = paired.len().max(speech.len()).max(text.len());
        let mut sums: BTreeMap<LossComponent, f64> = BTreeMap::new();
        let mut total_sum = 0.0;
        for step in 0..steps {
            let pb = &paired[step % paired.len()];
            let sb = (!speech.is_empty()).then(|| &speech[step % speech.len()]);
            let tb = (!text.is_empty()).then(|| &text[step % text.len()]);
            let (breakdown, grads) =
                combined_objective_with_grads(params, &objective, Some(pb), sb, tb)?;
            if !breakdown.total.is_finite() {
                diverged = true;
                break;
            }
            adadelta_step(params.tensors_mut(), &grads, optimizer, cfg.rho, cfg.epsilon)?;
            total_sum += breakdown.total;
            for (c, v) in &breakdown.components {
                *sums.entry(*c).or_insert(0.0) += v;
            }
        }
        if diverged {
            break;
        }

        let dev_cer = greedy_cer(params, data, &data.dev)?;
        let record = EpochRecord {
            epoch,
            total: total_sum / steps as f64,
            components: sums.into_iter().map(|(c, v)| (c, v / steps as f64)).collect(),
            dev_cer,
            wall_secs: start.elapsed().as_secs_f64(),
        };
        if let Some(cb) = progress.as_deref_mut() {
            cb(&record);
        }
        log.records.push(record);
        if best.update(dev_cer, epoch, params, optimizer, cfg.patience) {
            break;
        }
    }

    if !log.records.is_empty() || !diverged {
        let checkpoint = AsrCheckpoint {
            params: best.params,
            vocab: data.vocab.clone(),
            paired_hash: data.paired_hash,
            optimizer: Some(best.optimizer),
        };
        Ok((checkpoint, log))
    } else {
        Err(Error::Invalid(
            "training diverged before completing the first epoch".into(),
        ))
    }
}

/// Supervised training on the paired split only. The configured variant is
/// ignored here: the initial stage always optimizes the pure paired loss.
pub fn train_initial(cfg: &ExperimentConfig, data: &CorpusData) -> Result<(AsrCheckpoint, TrainLog)> {
    cfg.validate()?;
    let arch = cfg.architecture(feature_dim(data)?, data.vocab.size());
    let mut params = ModelParams::init(arch, seeds::derive(cfg.seed, "init-params"))?;
    let mut optimizer = OptimizerState::for_params(&params);
    run_epochs(
        cfg,
        data,
        Variant::Initial,
        &mut params,
        &mut optimizer,
        cfg.initial_epochs,
        "init-batches",
        None,
    )
}

/// Semi-supervised retraining of an initial checkpoint under a retrain
/// variant. The paired split must be the one the checkpoint was trained on.
pub fn retrain(
    initial: &AsrCheckpoint,
    cfg: &ExperimentConfig,
    data: &CorpusData,
) -> Result<(AsrCheckpoint, TrainLog)> {
    cfg.validate()?;
    if cfg.variant == Variant::Initial {
        return Err(Error::Config("retrain: variant must not be Initial".into()));
    }
    if initial.paired_hash != data.paired_hash {
        return Err(Error::Invalid(
            "retrain: paired split differs from the one the initial model was trained on".into(),
        ));
    }
    let mut params = initial.params.clone();
    let mut optimizer = initial
        .optimizer
        .clone()
        .unwrap_or_else(|| OptimizerState::for_params(&params));
    run_epochs(
        cfg,
        data,
        cfg.variant,
        &mut params,
        &mut optimizer,
        cfg.retrain_epochs,
        &format!("retrain-batches-{}", cfg.variant),
        None,
    )
}

fn feature_dim(data: &CorpusData) -> Result<usize> {
    data.paired
        .first()
        .map(|u| u.frames.shape()[1])
        .or_else(|| data.unpaired_speech.first().map(|u| u.frames.shape()[1]))
        .ok_or_else(|| Error::Invalid("corpus has no speech features".into()))
}

// ── Language model ──────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct LmEpochRecord {
    pub epoch: usize,
    pub perplexity: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LmTrainLog {
    pub records: Vec<LmEpochRecord>,
}

impl LmTrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,perplexity\n");
        for r in &self.records {
            writeln!(out, "{},{:.6}", r.epoch, r.perplexity).unwrap();
        }
        out
    }
}

/// Trains the character LM on the unpaired text split by next-character
/// negative log likelihood. The epoch-0 record is the untrained model, whose
/// perplexity equals the vocabulary size by construction.
pub fn train_rnnlm(cfg: &ExperimentConfig, data: &CorpusData) -> Result<(LmCheckpoint, LmTrainLog)> {
    cfg.validate()?;
    if data.unpaired_text.is_empty() {
        return Err(Error::Invalid("train_rnnlm: unpaired text split is empty".into()));
    }
    let arch = LmArchitecture {
        vocab_size: data.vocab.size(),
        hidden_dim: cfg.lm_hidden_dim,
    };
    let mut params = LmParams::init(arch, seeds::derive(cfg.seed, "lm-params"))?;
    let mut optimizer = OptimizerState::zeros(params.tensors().iter().map(|(n, t)| (n, t.numel())));
    let batch_seed = seeds::derive(cfg.seed, "lm-batches");

    let all: Vec<&crate::model::LabelSequence> =
        data.unpaired_text.iter().map(|u| &u.labels).collect();
    let mut log = LmTrainLog::default();
    log.records.push(LmEpochRecord {
        epoch: 0,
        perplexity: lm::perplexity(&params, &all)?,
    });

    for epoch in 0..cfg.lm_epochs {
        for batch in text_batches(&data.unpaired_text, cfg.batch_size, batch_seed, epoch) {
            let seqs: Vec<crate::model::LabelSequence> = (0..batch.text.len())
                .map(|i| batch.text.unpadded(i))
                .collect::<Result<_>>()?;
            let refs: Vec<&crate::model::LabelSequence> = seqs.iter().collect();
            let (_, grads, _) = lm::batch_nll_with_grads(&params, &refs)?;
            adadelta_step(params.tensors_mut(), &grads, &mut optimizer, cfg.rho, cfg.epsilon)?;
        }
        log.records.push(LmEpochRecord {
            epoch: epoch + 1,
            perplexity: lm::perplexity(&params, &all)?,
        });
    }

    Ok((
        LmCheckpoint {
            params,
            vocab: data.vocab.clone(),
            optimizer: Some(optimizer),
        },
        log,
    ))
}

// ── Beta sweep ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub variant: Variant,
    pub beta: f64,
    /// Eval CER/WER, or NaN when the cell's retraining failed.
    pub cer: f64,
    pub wer: f64,
}

/// Retrains the initial checkpoint for every (variant, beta) pair and scores
/// it on the eval split. Cell failures become NaN rows; the sweep continues.
pub fn sweep_beta(
    initial: &AsrCheckpoint,
    cfg: &ExperimentConfig,
    data: &CorpusData,
    betas: &[f64],
    variants: &[Variant],
    jobs: usize,
) -> Result<Vec<SweepCell>> {
    let cells: Vec<(Variant, f64)> = variants
        .iter()
        .flat_map(|v| betas.iter().map(move |b| (*v, *b)))
        .collect();
    let results: Vec<Option<SweepCell>> = {
        let mut slots: Vec<Option<SweepCell>> = vec![None; cells.len()];
        let jobs = jobs.max(1).min(cells.len().max(1));
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots_mutex = std::sync::Mutex::new(&mut slots);
        std::thread::scope(|scope| {
            for _ in 0..jobs {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= cells.len() {
                        break;
                    }
                    let (variant, beta) = cells[i];
                    let mut cell_cfg = cfg.clone();
                    cell_cfg.variant = variant;
                    cell_cfg.beta = beta;
                    let outcome = retrain(initial, &cell_cfg, data)
                        .and_then(|(ckpt, _)| {
                            let rows = greedy_decode_split(&ckpt.params, data, &data.eval)?;
                            let refs: Vec<(String, String)> = data
                                .eval
                                .iter()
                                .map(|u| (u.id.clone(), u.transcript.clone()))
                                .collect();
                            let cer = score_corpus(&refs, &rows, Unit::Char)?.corpus_rate();
                            let wer = score_corpus(&refs, &rows, Unit::Word)?.corpus_rate();
                            Ok((cer, wer))
                        });
                    let (cer, wer) = outcome.unwrap_or((f64::NAN, f64::NAN));
                    let cell = SweepCell { variant, beta, cer, wer };
                    slots_mutex.lock().unwrap()[i] = Some(cell);
                });
            }
        });
        slots
    };
    Ok(results.into_iter().map(|c| c.expect("all cells filled")).collect())
}

/// Renders sweep cells as the report CSV: `variant,beta,cer,wer`.
pub fn sweep_to_csv(cells: &[SweepCell]) -> String {
    let mut out = String::from("variant,beta,cer,wer\n");
    for c in cells {
        writeln!(out, "{},{},{:.6},{:.6}", c.variant, c.beta, c.cer, c.wer).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(v: f64) -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert("w".to_string(), Tensor::new(vec![1], vec![v]).unwrap());
        m
    }

    #[test]
    fn adadelta_hand_computed_first_step() {
        let mut tensors = scalar_params(1.0);
        let mut state = OptimizerState::zeros(tensors.iter().map(|(n, t)| (n, t.numel())));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![1.0]);
        adadelta_step(&mut tensors, &grads, &mut state, 0.95, 1e-6).unwrap();
        assert!((state.eg2["w"][0] - 0.05).abs() < 1e-15);
        let expected_dx = -(1e-6_f64.sqrt() / (0.05_f64 + 1e-6).sqrt());
        assert!((expected_dx - -0.0044721).abs() < 1e-7);
        assert!((tensors["w"].values()[0] - (1.0 + expected_dx)).abs() < 1e-15);
        assert!((state.edx2["w"][0] - 0.05 * expected_dx * expected_dx).abs() < 1e-18);
    }

    #[test]
    fn adadelta_zero_gradient_decays_accumulators() {
        let mut tensors = scalar_params(2.0);
        let mut state = OptimizerState::zeros(tensors.iter().map(|(n, t)| (n, t.numel())));
        state.eg2.get_mut("w").unwrap()[0] = 0.8;
        state.edx2.get_mut("w").unwrap()[0] = 0.4;
        let grads = BTreeMap::new();
        adadelta_step(&mut tensors, &grads, &mut state, 0.95, 1e-6).unwrap();
        assert_eq!(tensors["w"].values()[0], 2.0);
        assert!((state.eg2["w"][0] - 0.76).abs() < 1e-15);
        assert!((state.edx2["w"][0] - 0.38).abs() < 1e-15);
    }

    #[test]
    fn adadelta_update_opposes_gradient() {
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "w".to_string(),
            Tensor::new(vec![4], vec![0.0, 0.0, 0.0, 0.0]).unwrap(),
        );
        let mut state = OptimizerState::zeros(tensors.iter().map(|(n, t)| (n, t.numel())));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![0.5, -1.5, 2.0, -0.1]);
        adadelta_step(&mut tensors, &grads, &mut state, 0.9, 1e-6).unwrap();
        for (v, g) in tensors["w"].values().iter().zip(&grads["w"]) {
            assert!(v * g < 0.0, "update {v} does not oppose gradient {g}");
        }
    }

    #[test]
    fn adadelta_rejects_non_finite_gradients() {
        let mut tensors = scalar_params(0.0);
        let mut state = OptimizerState::zeros(tensors.iter().map(|(n, t)| (n, t.numel())));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![f64::NAN]);
        let err = adadelta_step(&mut tensors, &grads, &mut state, 0.95, 1e-6).unwrap_err();
        assert!(err.to_string().contains("w"), "{err}");
    }
}
