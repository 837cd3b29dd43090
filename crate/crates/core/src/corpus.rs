//! Synthetic speech-text corpus: generation, manifest and feature file I/O,
//! vocabulary construction, and padded batching.
//!
//! Each character of the alphabet gets a fixed random prototype vector; an
//! utterance's frames are its characters' prototypes, each repeated for a
//! sampled duration, plus Gaussian noise. The unpaired speech split receives
//! an additional domain-shift bias (and optional scale), so a model trained
//! only on the paired split is measurably mismatched to it. Transcripts are
//! sampled without immediate character repeats, which keeps run-length
//! collapse of per-frame nearest prototypes an exact decoder of the clean
//! corpus.

use crate::autograd::Tensor;
use crate::model::{FeatureSequence, LabelSequence, BLANK, EOS, NUM_SPECIALS, SOS, UNK};
use crate::seeds;
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Corpus split tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Paired,
    UnpairedSpeech,
    UnpairedText,
    Dev,
    Eval,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Paired => "paired",
            Split::UnpairedSpeech => "unpaired_speech",
            Split::UnpairedText => "unpaired_text",
            Split::Dev => "dev",
            Split::Eval => "eval",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paired" => Ok(Split::Paired),
            "unpaired_speech" => Ok(Split::UnpairedSpeech),
            "unpaired_text" => Ok(Split::UnpairedText),
            "dev" => Ok(Split::Dev),
            "eval" => Ok(Split::Eval),
            other => Err(Error::Invalid(format!("unknown split: {other}"))),
        }
    }
}

/// Knobs for the synthetic corpus generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    /// Characters of the alphabet (at least two, no control characters).
    pub alphabet: String,
    /// Training utterances, divided into paired and unpaired speech.
    pub train_utterances: usize,
    /// Fraction of training utterances that keep their transcripts.
    pub paired_fraction: f64,
    /// Unpaired text-only transcripts to sample.
    pub text_utterances: usize,
    pub dev_utterances: usize,
    pub eval_utterances: usize,
    /// Inclusive transcript length range in characters.
    pub transcript_len: (usize, usize),
    /// Inclusive duration range in frames per character.
    pub frames_per_char: (usize, usize),
    /// Standard deviation of the per-frame Gaussian noise.
    pub noise_std: f64,
    /// Prototype (feature) dimension F.
    pub feature_dim: usize,
    /// Magnitude of the additive domain-shift bias on unpaired speech.
    pub shift_bias_magnitude: f64,
    /// Optional multiplicative speaker scale on unpaired speech.
    pub speaker_scale: Option<f64>,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            alphabet: "abcdefgh".into(),
            train_utterances: 1000,
            paired_fraction: 0.2,
            text_utterances: 800,
            dev_utterances: 100,
            eval_utterances: 100,
            transcript_len: (3, 10),
            frames_per_char: (2, 5),
            noise_std: 0.3,
            feature_dim: 16,
            shift_bias_magnitude: 0.5,
            speaker_scale: None,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let chars: Vec<char> = self.alphabet.chars().collect();
        if chars.len() < 2 {
            return Err(Error::Config("alphabet needs at least two characters".into()));
        }
        if chars.iter().any(|c| c.is_control() || *c == '\t') {
            return Err(Error::Config("alphabet must not contain control characters".into()));
        }
        if !(self.paired_fraction > 0.0 && self.paired_fraction < 1.0) {
            return Err(Error::Config("paired_fraction must lie in (0, 1)".into()));
        }
        if self.transcript_len.0 == 0 || self.transcript_len.0 > self.transcript_len.1 {
            return Err(Error::Config("degenerate transcript length range".into()));
        }
        if self.frames_per_char.0 == 0 || self.frames_per_char.0 > self.frames_per_char.1 {
            return Err(Error::Config("degenerate frames-per-character range".into()));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config("noise_std must be >= 0".into()));
        }
        if self.feature_dim == 0 || self.train_utterances == 0 {
            return Err(Error::Config("feature_dim and train_utterances must be positive".into()));
        }
        Ok(())
    }

    pub fn paired_count(&self) -> usize {
        ((self.train_utterances as f64) * self.paired_fraction).round() as usize
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub id: String,
    pub split: Split,
    /// Feature file path relative to the manifest directory; absent for
    /// text-only records.
    pub path: Option<String>,
    pub transcript: Option<String>,
}

/// The corpus index: one record per utterance plus the directory that all
/// feature paths are relative to.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    pub dir: PathBuf,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&format!("id={}\tsplit={}", r.id, r.split));
            if let Some(p) = &r.path {
                out.push_str(&format!("\tpath={p}"));
            }
            if let Some(t) = &r.transcript {
                out.push_str(&format!("\ttranscript={t}"));
            }
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path)?;
        let dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = BTreeMap::new();
            for part in line.split('\t') {
                let (k, v) = part
                    .split_once('=')
                    .ok_or_else(|| Error::Invalid(format!("manifest line {}: bad field {part:?}", lineno + 1)))?;
                fields.insert(k.to_string(), v.to_string());
            }
            let id = fields
                .remove("id")
                .ok_or_else(|| Error::Invalid(format!("manifest line {}: missing id", lineno + 1)))?;
            let split: Split = fields
                .remove("split")
                .ok_or_else(|| Error::Invalid(format!("manifest line {}: missing split", lineno + 1)))?
                .parse()?;
            records.push(ManifestRecord {
                id,
                split,
                path: fields.remove("path"),
                transcript: fields.remove("transcript"),
            });
        }
        Ok(Manifest { records, dir })
    }

    /// SHA-256 over the paired records; retraining asserts it matches the
    /// hash stored at initial-training time.
    pub fn paired_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for r in self.split(Split::Paired) {
            h.update(r.id.as_bytes());
            h.update(b"\x1f");
            h.update(r.transcript.as_deref().unwrap_or("").as_bytes());
            h.update(b"\x1e");
        }
        h.finalize().into()
    }
}

/// Fixed random prototype vector per alphabet character, derived from the
/// corpus seed alone.
pub fn character_prototypes(cfg: &CorpusConfig) -> Vec<(char, Vec<f64>)> {
    let mut rng = seeds::rng(cfg.seed, "corpus-prototypes");
    cfg.alphabet
        .chars()
        .map(|c| {
            let proto = (0..cfg.feature_dim).map(|_| normal(&mut rng)).collect();
            (c, proto)
        })
        .collect()
}

/// The additive domain-shift bias applied to unpaired speech features.
pub fn domain_shift_bias(cfg: &CorpusConfig) -> Vec<f64> {
    let mut rng = seeds::rng(cfg.seed, "corpus-shift");
    let raw: Vec<f64> = (0..cfg.feature_dim).map(|_| normal(&mut rng)).collect();
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    raw.iter()
        .map(|x| x / norm * cfg.shift_bias_magnitude)
        .collect()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.gen_range(f64::EPSILON..1.0);
    let v: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    (-2.0 * u.ln()).sqrt() * v.cos()
}

fn sample_transcript(cfg: &CorpusConfig, chars: &[char], rng: &mut ChaCha8Rng) -> String {
    let len = rng.gen_range(cfg.transcript_len.0..=cfg.transcript_len.1);
    let mut out = String::with_capacity(len);
    let mut prev: Option<char> = None;
    for _ in 0..len {
        let c = loop {
            let c = *chars.choose(rng).unwrap();
            if Some(c) != prev {
                break c;
            }
        };
        out.push(c);
        prev = Some(c);
    }
    out
}

struct UtteranceSynth<'a> {
    cfg: &'a CorpusConfig,
    protos: BTreeMap<char, Vec<f64>>,
    bias: Vec<f64>,
}

impl UtteranceSynth<'_> {
    /// Frames for a transcript: prototype per character repeated for a
    /// sampled duration, plus noise; optionally domain-shifted.
    fn features(&self, transcript: &str, shifted: bool, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        let f = self.cfg.feature_dim;
        let mut frames = Vec::new();
        for c in transcript.chars() {
            let proto = &self.protos[&c];
            let dur = rng.gen_range(self.cfg.frames_per_char.0..=self.cfg.frames_per_char.1);
            for _ in 0..dur {
                let mut frame: Vec<f64> = (0..f)
                    .map(|i| proto[i] + self.cfg.noise_std * normal(rng))
                    .collect();
                if shifted {
                    if let Some(scale) = self.cfg.speaker_scale {
                        for v in frame.iter_mut() {
                            *v *= scale;
                        }
                    }
                    for (v, b) in frame.iter_mut().zip(&self.bias) {
                        *v += b;
                    }
                }
                frames.push(frame);
            }
        }
        frames
    }
}

/// Generates the full corpus under `out_dir`: feature CSVs plus
/// `manifest.txt`. Deterministic for a given config.
pub fn generate_corpus(cfg: &CorpusConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let chars: Vec<char> = cfg.alphabet.chars().collect();
    let synth = UtteranceSynth {
        cfg,
        protos: character_prototypes(cfg).into_iter().collect(),
        bias: domain_shift_bias(cfg),
    };
    let feature_dir = out_dir.join("features");
    fs::create_dir_all(&feature_dir)?;

    let paired = cfg.paired_count();
    let unpaired = cfg.train_utterances - paired;
    let plan: Vec<(Split, usize)> = vec![
        (Split::Paired, paired),
        (Split::UnpairedSpeech, unpaired),
        (Split::UnpairedText, cfg.text_utterances),
        (Split::Dev, cfg.dev_utterances),
        (Split::Eval, cfg.eval_utterances),
    ];

    let mut rng = seeds::rng(cfg.seed, "corpus-data");
    let mut records = Vec::new();
    let mut next_id = 0usize;
    for (split, count) in plan {
        for _ in 0..count {
            let id = format!("utt{next_id:06}");
            next_id += 1;
            let transcript = sample_transcript(cfg, &chars, &mut rng);
            let path = if split == Split::UnpairedText {
                None
            } else {
                let shifted = split == Split::UnpairedSpeech;
                let frames = synth.features(&transcript, shifted, &mut rng);
                let rel = format!("features/{id}.csv");
                write_feature_csv(&out_dir.join(&rel), &frames)?;
                Some(rel)
            };
            records.push(ManifestRecord {
                id,
                split,
                path,
                transcript: Some(transcript),
            });
        }
    }

    let manifest = Manifest {
        records,
        dir: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join("manifest.txt"))?;
    Ok(manifest)
}

fn write_feature_csv(path: &Path, frames: &[Vec<f64>]) -> Result<()> {
    let mut out = fs::File::create(path)?;
    let mut line = String::new();
    for frame in frames {
        line.clear();
        for (i, v) in frame.iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            line.push_str(&format!("{v}"));
        }
        line.push('\n');
        out.write_all(line.as_bytes())?;
    }
    Ok(())
}

/// Reads a feature CSV back into a `[T, F]` tensor.
pub fn read_feature_csv(path: &Path) -> Result<Tensor> {
    let text = fs::read_to_string(path)?;
    let mut values = Vec::new();
    let mut rows = 0usize;
    let mut cols = None;
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let frame: Vec<f64> = line
            .split(',')
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|e| Error::Invalid(format!("{}: bad value {v:?}: {e}", path.display())))
            })
            .collect::<Result<_>>()?;
        match cols {
            None => cols = Some(frame.len()),
            Some(c) if c != frame.len() => {
                return Err(Error::Invalid(format!("{}: ragged rows", path.display())))
            }
            _ => {}
        }
        rows += 1;
        values.extend(frame);
    }
    Tensor::new(vec![rows, cols.unwrap_or(0)], values)
}

// ── Vocabulary ──────────────────────────────────────────────────────────

/// Character inventory: four reserved specials at fixed indices, then the
/// sorted unique characters of the paired and unpaired-text transcripts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    chars: Vec<char>,
    index: BTreeMap<char, usize>,
}

pub const SPECIAL_SYMBOLS: [&str; NUM_SPECIALS] = ["<sos>", "<eos>", "<blank>", "<unk>"];

impl Vocabulary {
    pub fn from_chars(mut chars: Vec<char>) -> Self {
        chars.sort_unstable();
        chars.dedup();
        let index = chars
            .iter()
            .enumerate()
            .map(|(i, c)| (*c, NUM_SPECIALS + i))
            .collect();
        Vocabulary { chars, index }
    }

    pub fn size(&self) -> usize {
        NUM_SPECIALS + self.chars.len()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    /// Index of a character; unseen characters map to UNK.
    pub fn encode_char(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(UNK)
    }

    pub fn encode(&self, text: &str) -> Result<LabelSequence> {
        LabelSequence::new(text.chars().map(|c| self.encode_char(c)).collect())
    }

    /// Text for a label sequence; UNK renders as `?`.
    pub fn decode(&self, indices: &[usize]) -> String {
        indices
            .iter()
            .filter_map(|&i| match i {
                SOS | EOS | BLANK => None,
                UNK => Some('?'),
                i => self.chars.get(i - NUM_SPECIALS).copied(),
            })
            .collect()
    }

    /// Symbol strings in index order, for checkpoint serialization.
    pub fn symbols(&self) -> Vec<String> {
        SPECIAL_SYMBOLS
            .iter()
            .map(|s| s.to_string())
            .chain(self.chars.iter().map(|c| c.to_string()))
            .collect()
    }

    pub fn from_symbols(symbols: &[String]) -> Result<Self> {
        if symbols.len() < NUM_SPECIALS
            || symbols[..NUM_SPECIALS]
                .iter()
                .zip(SPECIAL_SYMBOLS)
                .any(|(a, b)| a != b)
        {
            return Err(Error::Checkpoint("bad vocabulary block".into()));
        }
        let chars = symbols[NUM_SPECIALS..]
            .iter()
            .map(|s| {
                let mut it = s.chars();
                match (it.next(), it.next()) {
                    (Some(c), None) => Ok(c),
                    _ => Err(Error::Checkpoint(format!("bad vocabulary symbol {s:?}"))),
                }
            })
            .collect::<Result<Vec<char>>>()?;
        Ok(Vocabulary::from_chars(chars))
    }
}

/// Builds the vocabulary from the transcripts visible at training time.
pub fn build_vocabulary(manifest: &Manifest) -> Result<Vocabulary> {
    let mut chars = Vec::new();
    let mut any = false;
    for r in &manifest.records {
        if matches!(r.split, Split::Paired | Split::UnpairedText) {
            if let Some(t) = &r.transcript {
                any = true;
                chars.extend(t.chars());
            }
        }
    }
    if !any {
        return Err(Error::Invalid(
            "build_vocabulary: no paired or unpaired_text transcripts".into(),
        ));
    }
    Ok(Vocabulary::from_chars(chars))
}

// ── Loaded corpus and batching ──────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct PairedUtterance {
    pub id: String,
    pub frames: Tensor,
    pub labels: LabelSequence,
}

/// Training view of unpaired speech: the transcript is not part of the type.
#[derive(Debug, Clone)]
pub struct SpeechUtterance {
    pub id: String,
    pub frames: Tensor,
}

#[derive(Debug, Clone)]
pub struct TextUtterance {
    pub id: String,
    pub labels: LabelSequence,
}

/// Held-out utterance with its reference transcript, for decoding and
/// scoring only.
#[derive(Debug, Clone)]
pub struct ScoringUtterance {
    pub id: String,
    pub frames: Tensor,
    pub transcript: String,
}

/// Everything the trainer needs, loaded into memory.
#[derive(Debug, Clone)]
pub struct CorpusData {
    pub vocab: Vocabulary,
    pub paired: Vec<PairedUtterance>,
    pub unpaired_speech: Vec<SpeechUtterance>,
    pub unpaired_text: Vec<TextUtterance>,
    pub dev: Vec<ScoringUtterance>,
    pub eval: Vec<ScoringUtterance>,
    pub paired_hash: [u8; 32],
}

impl CorpusData {
    pub fn load(manifest: &Manifest) -> Result<Self> {
        let vocab = build_vocabulary(manifest)?;
        let mut data = CorpusData {
            vocab,
            paired: Vec::new(),
            unpaired_speech: Vec::new(),
            unpaired_text: Vec::new(),
            dev: Vec::new(),
            eval: Vec::new(),
            paired_hash: manifest.paired_hash(),
        };
        for r in &manifest.records {
            let frames = || -> Result<Tensor> {
                let rel = r
                    .path
                    .as_ref()
                    .ok_or_else(|| Error::Invalid(format!("record {} has no feature path", r.id)))?;
                read_feature_csv(&manifest.dir.join(rel))
            };
            let transcript = || -> Result<&String> {
                r.transcript
                    .as_ref()
                    .ok_or_else(|| Error::Invalid(format!("record {} has no transcript", r.id)))
            };
            match r.split {
                Split::Paired => data.paired.push(PairedUtterance {
                    id: r.id.clone(),
                    frames: frames()?,
                    labels: data.vocab.encode(transcript()?)?,
                }),
                Split::UnpairedSpeech => data.unpaired_speech.push(SpeechUtterance {
                    id: r.id.clone(),
                    frames: frames()?,
                }),
                Split::UnpairedText => data.unpaired_text.push(TextUtterance {
                    id: r.id.clone(),
                    labels: data.vocab.encode(transcript()?)?,
                }),
                Split::Dev | Split::Eval => {
                    let u = ScoringUtterance {
                        id: r.id.clone(),
                        frames: frames()?,
                        transcript: transcript()?.clone(),
                    };
                    if r.split == Split::Dev {
                        data.dev.push(u)
                    } else {
                        data.eval.push(u)
                    }
                }
            }
        }
        Ok(data)
    }
}

/// Feature block of a batch: per-utterance `[Tmax, F]` tensors zero-padded
/// to the batch maximum, with row-validity masks.
#[derive(Debug, Clone)]
pub struct SpeechBlock {
    pub ids: Vec<String>,
    pub features: Vec<Tensor>,
    pub mask: Vec<Vec<bool>>,
}

impl SpeechBlock {
    fn build(items: Vec<(String, &Tensor)>) -> Self {
        let t_max = items.iter().map(|(_, t)| t.shape()[0]).max().unwrap_or(0);
        let mut ids = Vec::new();
        let mut features = Vec::new();
        let mut mask = Vec::new();
        for (id, t) in items {
            let (rows, cols) = (t.shape()[0], t.shape()[1]);
            let mut vals = t.values().to_vec();
            vals.resize(t_max * cols, 0.0);
            features.push(Tensor::new(vec![t_max, cols], vals).expect("padded tensor"));
            mask.push((0..t_max).map(|r| r < rows).collect());
            ids.push(id);
        }
        SpeechBlock { ids, features, mask }
    }

    /// True frame count of one utterance, from its mask row.
    pub fn true_len(&self, i: usize) -> usize {
        self.mask[i].iter().filter(|m| **m).count()
    }

    /// Unpadded feature view of one utterance.
    pub fn unpadded(&self, i: usize) -> Result<FeatureSequence> {
        let t = self.true_len(i);
        let cols = self.features[i].shape()[1];
        let vals = self.features[i].values()[..t * cols].to_vec();
        FeatureSequence::new(self.ids[i].clone(), Tensor::new(vec![t, cols], vals)?)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Label block of a batch: rows padded with EOS, with validity masks.
#[derive(Debug, Clone)]
pub struct LabelBlock {
    pub labels: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
}

impl LabelBlock {
    fn build(items: &[&LabelSequence]) -> Self {
        let l_max = items.iter().map(|l| l.len()).max().unwrap_or(0);
        let mut labels = Vec::new();
        let mut mask = Vec::new();
        for l in items {
            let mut row = l.indices().to_vec();
            row.resize(l_max, EOS);
            labels.push(row);
            mask.push((0..l_max).map(|i| i < l.len()).collect());
        }
        LabelBlock { labels, mask }
    }

    pub fn true_len(&self, i: usize) -> usize {
        self.mask[i].iter().filter(|m| **m).count()
    }

    /// Unpadded label view of one row.
    pub fn unpadded(&self, i: usize) -> Result<LabelSequence> {
        LabelSequence::new(self.labels[i][..self.true_len(i)].to_vec())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct PairedBatch {
    pub speech: SpeechBlock,
    pub text: LabelBlock,
}

#[derive(Debug, Clone)]
pub struct SpeechBatch {
    pub speech: SpeechBlock,
}

#[derive(Debug, Clone)]
pub struct TextBatch {
    pub text: LabelBlock,
}

/// A deterministic shuffle order for `(seed, split, epoch)`.
fn shuffled_indices(n: usize, seed: u64, split: Split, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = seeds::rng(seed, &format!("batches-{split}-{epoch}"));
    idx.shuffle(&mut rng);
    idx
}

pub fn paired_batches(
    data: &[PairedUtterance],
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Vec<PairedBatch> {
    let order = shuffled_indices(data.len(), seed, Split::Paired, epoch);
    order
        .chunks(batch_size.max(1))
        .map(|chunk| {
            let speech = SpeechBlock::build(
                chunk.iter().map(|&i| (data[i].id.clone(), &data[i].frames)).collect(),
            );
            let labels: Vec<&LabelSequence> = chunk.iter().map(|&i| &data[i].labels).collect();
            PairedBatch {
                speech,
                text: LabelBlock::build(&labels),
            }
        })
        .collect()
}

pub fn speech_batches(
    data: &[SpeechUtterance],
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Vec<SpeechBatch> {
    let order = shuffled_indices(data.len(), seed, Split::UnpairedSpeech, epoch);
    order
        .chunks(batch_size.max(1))
        .map(|chunk| SpeechBatch {
            speech: SpeechBlock::build(
                chunk.iter().map(|&i| (data[i].id.clone(), &data[i].frames)).collect(),
            ),
        })
        .collect()
}

pub fn text_batches(
    data: &[TextUtterance],
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Vec<TextBatch> {
    let order = shuffled_indices(data.len(), seed, Split::UnpairedText, epoch);
    order
        .chunks(batch_size.max(1))
        .map(|chunk| TextBatch {
            text: LabelBlock::build(
                &chunk.iter().map(|&i| &data[i].labels).collect::<Vec<_>>(),
            ),
        })
        .collect()
}

/// Padded batches of one split, shuffled deterministically per
/// `(seed, epoch)`.
pub enum Batches {
    Paired(Vec<PairedBatch>),
    Speech(Vec<SpeechBatch>),
    Text(Vec<TextBatch>),
}

pub fn make_batches(
    data: &CorpusData,
    split: Split,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Batches> {
    match split {
        Split::Paired => Ok(Batches::Paired(paired_batches(&data.paired, batch_size, seed, epoch))),
        Split::UnpairedSpeech => Ok(Batches::Speech(speech_batches(
            &data.unpaired_speech,
            batch_size,
            seed,
            epoch,
        ))),
        Split::UnpairedText => Ok(Batches::Text(text_batches(
            &data.unpaired_text,
            batch_size,
            seed,
            epoch,
        ))),
        other => Err(Error::Invalid(format!(
            "make_batches: split {other} is not a training split"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_config() -> CorpusConfig {
        CorpusConfig {
            train_utterances: 10,
            paired_fraction: 0.5,
            text_utterances: 4,
            dev_utterances: 2,
            eval_utterances: 2,
            transcript_len: (2, 4),
            frames_per_char: (2, 3),
            feature_dim: 5,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic_bytes() {
        let cfg = tiny_config();
        let (d1, d2) = (tempdir().unwrap(), tempdir().unwrap());
        generate_corpus(&cfg, d1.path()).unwrap();
        generate_corpus(&cfg, d2.path()).unwrap();
        let m1 = fs::read(d1.path().join("manifest.txt")).unwrap();
        let m2 = fs::read(d2.path().join("manifest.txt")).unwrap();
        assert_eq!(m1, m2);
        let f1 = fs::read(d1.path().join("features/utt000000.csv")).unwrap();
        let f2 = fs::read(d2.path().join("features/utt000000.csv")).unwrap();
        assert_eq!(f1, f2);
    }

    #[test]
    fn frame_counts_match_durations() {
        let cfg = CorpusConfig {
            frames_per_char: (3, 3),
            ..tiny_config()
        };
        let dir = tempdir().unwrap();
        let manifest = generate_corpus(&cfg, dir.path()).unwrap();
        for r in manifest.split(Split::Paired) {
            let frames = read_feature_csv(&dir.path().join(r.path.as_ref().unwrap())).unwrap();
            let chars = r.transcript.as_ref().unwrap().chars().count();
            assert_eq!(frames.shape()[0], 3 * chars);
        }
    }

    #[test]
    fn clean_corpus_decodes_by_nearest_prototype() {
        let cfg = CorpusConfig {
            noise_std: 0.0,
            shift_bias_magnitude: 0.0,
            ..tiny_config()
        };
        let dir = tempdir().unwrap();
        let manifest = generate_corpus(&cfg, dir.path()).unwrap();
        let protos = character_prototypes(&cfg);
        for r in manifest.records.iter().filter(|r| r.path.is_some()) {
            let frames = read_feature_csv(&dir.path().join(r.path.as_ref().unwrap())).unwrap();
            let f = cfg.feature_dim;
            let mut decoded = String::new();
            let mut prev = None;
            for t in 0..frames.shape()[0] {
                let row = &frames.values()[t * f..(t + 1) * f];
                let best = protos
                    .iter()
                    .min_by(|(_, a), (_, b)| {
                        let da: f64 = a.iter().zip(row).map(|(x, y)| (x - y).powi(2)).sum();
                        let db: f64 = b.iter().zip(row).map(|(x, y)| (x - y).powi(2)).sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .map(|(c, _)| *c)
                    .unwrap();
                if prev != Some(best) {
                    decoded.push(best);
                    prev = Some(best);
                }
            }
            assert_eq!(&decoded, r.transcript.as_ref().unwrap(), "utterance {}", r.id);
        }
    }

    #[test]
    fn vocabulary_is_sorted_and_stable() {
        let cfg = tiny_config();
        let dir = tempdir().unwrap();
        let manifest = generate_corpus(&cfg, dir.path()).unwrap();
        let v1 = build_vocabulary(&manifest).unwrap();
        let v2 = build_vocabulary(&Manifest::load(&dir.path().join("manifest.txt")).unwrap()).unwrap();
        assert_eq!(v1, v2);
        let mut sorted = v1.chars().to_vec();
        sorted.sort_unstable();
        assert_eq!(v1.chars(), sorted.as_slice());
    }

    #[test]
    fn vocabulary_from_two_transcripts() {
        let records = vec![
            ManifestRecord {
                id: "a".into(),
                split: Split::Paired,
                path: Some("x".into()),
                transcript: Some("ab".into()),
            },
            ManifestRecord {
                id: "b".into(),
                split: Split::UnpairedText,
                path: None,
                transcript: Some("ba".into()),
            },
        ];
        let manifest = Manifest { records, dir: ".".into() };
        let v = build_vocabulary(&manifest).unwrap();
        assert_eq!(v.chars(), &['a', 'b']);
        assert_eq!(v.size(), NUM_SPECIALS + 2);
        // eval-only character maps to UNK
        assert_eq!(v.encode_char('z'), UNK);
        assert_eq!(v.encode_char('a'), NUM_SPECIALS);
    }

    #[test]
    fn manifest_round_trip() {
        let cfg = tiny_config();
        let dir = tempdir().unwrap();
        let manifest = generate_corpus(&cfg, dir.path()).unwrap();
        let loaded = Manifest::load(&dir.path().join("manifest.txt")).unwrap();
        assert_eq!(manifest.records, loaded.records);
        // unpaired_text records have no feature path
        assert!(loaded.split(Split::UnpairedText).all(|r| r.path.is_none()));
    }

    #[test]
    fn batch_sizes_and_masks() {
        let data: Vec<PairedUtterance> = (0..7)
            .map(|i| PairedUtterance {
                id: format!("u{i}"),
                frames: Tensor::new(vec![i + 1, 2], vec![0.5; (i + 1) * 2]).unwrap(),
                labels: LabelSequence::new(vec![NUM_SPECIALS; i % 3 + 1]).unwrap(),
            })
            .collect();
        let batches = paired_batches(&data, 3, 7, 0);
        let sizes: Vec<usize> = batches.iter().map(|b| b.speech.len()).collect();
        assert_eq!(sizes, vec![3, 3, 1]);
        for b in &batches {
            for i in 0..b.speech.len() {
                let t = b.speech.true_len(i);
                assert_eq!(b.speech.unpadded(i).unwrap().num_frames(), t);
                let mask_sum: usize = b.speech.mask[i].iter().filter(|m| **m).count();
                assert_eq!(mask_sum, t);
            }
        }
    }

    #[test]
    fn shuffle_depends_on_epoch_and_seed_deterministically() {
        let n = 20;
        assert_eq!(
            shuffled_indices(n, 1, Split::Paired, 0),
            shuffled_indices(n, 1, Split::Paired, 0)
        );
        assert_ne!(
            shuffled_indices(n, 1, Split::Paired, 0),
            shuffled_indices(n, 1, Split::Paired, 1)
        );
    }
}
