//! Checkpoint container: architecture descriptor, vocabulary, named
//! parameters, and optional optimizer state, in a little-endian binary
//! layout that round-trips bit-exactly.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "CSPCKPT\n"
//! version u32      1
//! kind    u8       0 = recognizer, 1 = language model
//! descriptor       kind 0: u32 x6  (feature_dim, hidden_dim, shared_layers,
//!                                   decoder_layers, vocab_size, subsample)
//!                  kind 1: u32 x2  (vocab_size, hidden_dim)
//! vocab   u32 count, then per symbol: u32 byte length + UTF-8 bytes
//! paired  32 bytes (SHA-256 of the paired split; zero for language models)
//! params  u32 count, then per parameter:
//!           u32 name length + UTF-8 name
//!           u32 ndim, u32 x ndim dims
//!           f64 x numel row-major values
//! optim   u8 flag; if 1: per parameter in the same order,
//!           f64 x numel E[g^2] then f64 x numel E[dx^2]
//! ```

use super::{Architecture, ModelParams};
use crate::autograd::Tensor;
use crate::corpus::Vocabulary;
use crate::lm::{LmArchitecture, LmParams};
use crate::trainer::OptimizerState;
use crate::{Error, Result};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"CSPCKPT\n";
const VERSION: u32 = 1;

/// Recognizer checkpoint: model parameters plus everything needed to decode
/// and to resume training.
#[derive(Debug, Clone)]
pub struct AsrCheckpoint {
    pub params: ModelParams,
    pub vocab: Vocabulary,
    pub paired_hash: [u8; 32],
    pub optimizer: Option<OptimizerState>,
}

/// Language-model checkpoint.
#[derive(Debug, Clone)]
pub struct LmCheckpoint {
    pub params: LmParams,
    pub vocab: Vocabulary,
    pub optimizer: Option<OptimizerState>,
}

impl AsrCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Vec::new();
        w.write_all(MAGIC)?;
        put_u32(&mut w, VERSION);
        w.push(0u8);
        let a = self.params.arch();
        for v in [
            a.feature_dim,
            a.hidden_dim,
            a.shared_layers,
            a.decoder_layers,
            a.vocab_size,
            a.subsample,
        ] {
            put_u32(&mut w, v as u32);
        }
        put_vocab(&mut w, &self.vocab);
        w.write_all(&self.paired_hash)?;
        put_tensors(&mut w, self.params.tensors());
        put_optimizer(&mut w, self.params.tensors(), self.optimizer.as_ref());
        std::fs::write(path, w)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut r = bytes.as_slice();
        check_header(&mut r, 0)?;
        let dims: Vec<usize> = (0..6).map(|_| get_u32(&mut r).map(|v| v as usize)).collect::<Result<_>>()?;
        let arch = Architecture {
            feature_dim: dims[0],
            hidden_dim: dims[1],
            shared_layers: dims[2],
            decoder_layers: dims[3],
            vocab_size: dims[4],
            subsample: dims[5],
        };
        let vocab = get_vocab(&mut r)?;
        let mut paired_hash = [0u8; 32];
        r.read_exact(&mut paired_hash)?;
        let tensors = get_tensors(&mut r)?;
        let optimizer = get_optimizer(&mut r, &tensors)?;
        let params = ModelParams::from_tensors(arch, tensors)?;
        if vocab.size() != arch.vocab_size {
            return Err(Error::Checkpoint(format!(
                "vocabulary has {} symbols but the architecture says {}",
                vocab.size(),
                arch.vocab_size
            )));
        }
        Ok(AsrCheckpoint {
            params,
            vocab,
            paired_hash,
            optimizer,
        })
    }
}

impl LmCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Vec::new();
        w.write_all(MAGIC)?;
        put_u32(&mut w, VERSION);
        w.push(1u8);
        let a = self.params.arch();
        put_u32(&mut w, a.vocab_size as u32);
        put_u32(&mut w, a.hidden_dim as u32);
        put_vocab(&mut w, &self.vocab);
        w.write_all(&[0u8; 32])?;
        put_tensors(&mut w, self.params.tensors());
        put_optimizer(&mut w, self.params.tensors(), self.optimizer.as_ref());
        std::fs::write(path, w)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut r = bytes.as_slice();
        check_header(&mut r, 1)?;
        let arch = LmArchitecture {
            vocab_size: get_u32(&mut r)? as usize,
            hidden_dim: get_u32(&mut r)? as usize,
        };
        let vocab = get_vocab(&mut r)?;
        let mut zero = [0u8; 32];
        r.read_exact(&mut zero)?;
        let tensors = get_tensors(&mut r)?;
        let optimizer = get_optimizer(&mut r, &tensors)?;
        let params = LmParams::from_tensors(arch, tensors)?;
        Ok(LmCheckpoint {
            params,
            vocab,
            optimizer,
        })
    }
}

fn check_header(r: &mut &[u8], expected_kind: u8) -> Result<()> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut kind = [0u8; 1];
    r.read_exact(&mut kind)?;
    if kind[0] != expected_kind {
        return Err(Error::Checkpoint(format!(
            "wrong checkpoint kind {} (expected {expected_kind})",
            kind[0]
        )));
    }
    Ok(())
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn get_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    put_u32(w, s.len() as u32);
    w.extend_from_slice(s.as_bytes());
}

fn get_str(r: &mut &[u8]) -> Result<String> {
    let len = get_u32(r)? as usize;
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| Error::Checkpoint(format!("bad string: {e}")))
}

fn put_vocab(w: &mut Vec<u8>, vocab: &Vocabulary) {
    let symbols = vocab.symbols();
    put_u32(w, symbols.len() as u32);
    for s in &symbols {
        put_str(w, s);
    }
}

fn get_vocab(r: &mut &[u8]) -> Result<Vocabulary> {
    let count = get_u32(r)? as usize;
    let symbols: Vec<String> = (0..count).map(|_| get_str(r)).collect::<Result<_>>()?;
    Vocabulary::from_symbols(&symbols)
}

fn put_tensors(w: &mut Vec<u8>, tensors: &BTreeMap<String, Tensor>) {
    put_u32(w, tensors.len() as u32);
    for (name, t) in tensors {
        put_str(w, name);
        put_u32(w, t.shape().len() as u32);
        for d in t.shape() {
            put_u32(w, *d as u32);
        }
        for v in t.values() {
            w.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn get_tensors(r: &mut &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let count = get_u32(r)? as usize;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name = get_str(r)?;
        let ndim = get_u32(r)? as usize;
        let shape: Vec<usize> = (0..ndim).map(|_| get_u32(r).map(|v| v as usize)).collect::<Result<_>>()?;
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        for _ in 0..numel {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            values.push(f64::from_le_bytes(b));
        }
        out.insert(name, Tensor::new(shape, values)?);
    }
    Ok(out)
}

fn put_optimizer(w: &mut Vec<u8>, tensors: &BTreeMap<String, Tensor>, opt: Option<&OptimizerState>) {
    match opt {
        None => w.push(0u8),
        Some(state) => {
            w.push(1u8);
            for (name, t) in tensors {
                let zeros = vec![0.0; t.numel()];
                let eg2 = state.eg2.get(name).map(Vec::as_slice).unwrap_or(&zeros);
                let edx2 = state.edx2.get(name).map(Vec::as_slice).unwrap_or(&zeros);
                for v in eg2.iter().chain(edx2) {
                    w.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
}

fn get_optimizer(r: &mut &[u8], tensors: &BTreeMap<String, Tensor>) -> Result<Option<OptimizerState>> {
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    if flag[0] == 0 {
        return Ok(None);
    }
    let mut state = OptimizerState::default();
    for (name, t) in tensors {
        let mut read_vec = |n: usize| -> Result<Vec<f64>> {
            let mut v = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                v.push(f64::from_le_bytes(b));
            }
            Ok(v)
        };
        let eg2 = read_vec(t.numel())?;
        let edx2 = read_vec(t.numel())?;
        state.eg2.insert(name.clone(), eg2);
        state.edx2.insert(name.clone(), edx2);
    }
    Ok(Some(state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn asr_round_trip_is_bit_exact() {
        let arch = Architecture {
            feature_dim: 3,
            hidden_dim: 4,
            shared_layers: 1,
            decoder_layers: 1,
            vocab_size: 6,
            subsample: 2,
        };
        let params = ModelParams::init(arch, 42).unwrap();
        let vocab = Vocabulary::from_chars(vec!['a', 'b']);
        let mut optimizer = OptimizerState::for_params(&params);
        optimizer.eg2.get_mut("ctc.b").unwrap()[0] = 0.123456789e-3;
        let ckpt = AsrCheckpoint {
            params,
            vocab,
            paired_hash: [7u8; 32],
            optimizer: Some(optimizer),
        };
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ckpt.save(&path).unwrap();
        let loaded = AsrCheckpoint::load(&path).unwrap();
        assert_eq!(loaded.paired_hash, ckpt.paired_hash);
        assert_eq!(loaded.vocab, ckpt.vocab);
        for (name, t) in ckpt.params.iter() {
            let l = loaded.params.get(name);
            assert_eq!(l.shape(), t.shape());
            for (a, b) in l.values().iter().zip(t.values()) {
                assert_eq!(a.to_bits(), b.to_bits(), "parameter {name}");
            }
        }
        assert_eq!(loaded.optimizer, ckpt.optimizer);

        // a second save must produce identical bytes
        let path2 = dir.path().join("model2.ckpt");
        loaded.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn lm_round_trip() {
        let arch = LmArchitecture {
            vocab_size: 6,
            hidden_dim: 5,
        };
        let params = LmParams::init(arch, 1).unwrap();
        let ckpt = LmCheckpoint {
            params,
            vocab: Vocabulary::from_chars(vec!['x', 'y']),
            optimizer: None,
        };
        let dir = tempdir().unwrap();
        let path = dir.path().join("lm.ckpt");
        ckpt.save(&path).unwrap();
        let loaded = LmCheckpoint::load(&path).unwrap();
        assert_eq!(loaded.vocab, ckpt.vocab);
        assert!(loaded.optimizer.is_none());
        for (name, t) in ckpt.params.tensors() {
            assert_eq!(loaded.params.tensors()[name].values(), t.values());
        }
    }

    #[test]
    fn kind_mismatch_is_detected() {
        let arch = LmArchitecture {
            vocab_size: 6,
            hidden_dim: 5,
        };
        let ckpt = LmCheckpoint {
            params: LmParams::init(arch, 1).unwrap(),
            vocab: Vocabulary::from_chars(vec!['x', 'y']),
            optimizer: None,
        };
        let dir = tempdir().unwrap();
        let path = dir.path().join("lm.ckpt");
        ckpt.save(&path).unwrap();
        assert!(AsrCheckpoint::load(&path).is_err());
    }
}
