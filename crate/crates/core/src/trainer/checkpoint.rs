//! Binary checkpoint files.
//!
//! ```text
//! MRASP1
//! key=value            (model config, training metadata)
//!                      (blank line)
//! name ndim dims...\n  then row-major little-endian f64 values, per tensor
//! crc32                (4 bytes LE, over the tensor section)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{io_err, TrainError};
use crate::model::{ModelConfig, ModelParameters};
use crate::subword::Vocabulary;

pub const CHECKPOINT_MAGIC: &str = "MRASP1";

/// First and second moment estimates plus the update count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParameters,
    pub adam: Option<AdamState>,
    pub step: u64,
    /// Loss of the last completed step; NaN before any step.
    pub loss: f64,
    /// Content hash of the vocabulary the model was trained with.
    pub vocab_hash: String,
}

fn dims(rows: usize, cols: usize) -> Vec<usize> {
    if rows == 1 {
        vec![cols]
    } else {
        vec![rows, cols]
    }
}

fn write_tensor(out: &mut Vec<u8>, name: &str, dims: &[usize], values: &[f64]) {
    let shape: Vec<String> = dims.iter().map(usize::to_string).collect();
    out.extend_from_slice(format!("{name} {} {}\n", dims.len(), shape.join(" ")).as_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<(), TrainError> {
        let expected = vocab.content_hash();
        if expected != self.vocab_hash {
            return Err(TrainError::VocabMismatch {
                expected,
                found: self.vocab_hash.clone(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.params.config;
        let mut header = format!("{CHECKPOINT_MAGIC}\n");
        let mut kv = |k: &str, v: String| header.push_str(&format!("{k}={v}\n"));
        kv("enc_layers", c.enc_layers.to_string());
        kv("dec_layers", c.dec_layers.to_string());
        kv("model_dim", c.model_dim.to_string());
        kv("heads", c.heads.to_string());
        kv("ffn_dim", c.ffn_dim.to_string());
        kv("max_positions", c.max_positions.to_string());
        kv("dropout", c.dropout.to_string());
        kv("vocab_size", c.vocab_size.to_string());
        kv("label_smoothing", c.label_smoothing.to_string());
        kv("step", self.step.to_string());
        kv("loss", self.loss.to_string());
        kv("vocab_hash", self.vocab_hash.clone());
        if let Some(a) = &self.adam {
            kv("adam_step", a.step.to_string());
        }
        header.push('\n');

        let mut body = Vec::new();
        let layout = self.params.layout();
        for (name, slot) in layout.tensors() {
            write_tensor(&mut body, name, &dims(slot.rows, slot.cols), slot.of(&self.params.data));
        }
        if let Some(a) = &self.adam {
            for (prefix, buf) in [("adam.m", &a.m), ("adam.v", &a.v)] {
                for (name, slot) in layout.tensors() {
                    write_tensor(&mut body, &format!("{prefix}/{name}"), &dims(slot.rows, slot.cols), slot.of(buf));
                }
            }
        }
        let crc = crc32fast::hash(&body);
        let mut out = header.into_bytes();
        out.extend_from_slice(&body);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, TrainError> {
        let bad = |reason: String| TrainError::MalformedCheckpoint {
            path: path.to_path_buf(),
            reason,
        };
        let split = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| bad("no header terminator".into()))?;
        let header = std::str::from_utf8(&bytes[..split]).map_err(|_| bad("header is not UTF-8".into()))?;
        let mut lines = header.lines();
        if lines.next() != Some(CHECKPOINT_MAGIC) {
            return Err(bad("missing magic line".into()));
        }
        let mut kv = BTreeMap::new();
        for line in lines {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("bad header line {line:?}")))?;
            kv.insert(k, v);
        }
        fn get<T: std::str::FromStr>(
            kv: &BTreeMap<&str, &str>,
            key: &str,
            bad: &dyn Fn(String) -> TrainError,
        ) -> Result<T, TrainError> {
            kv.get(key)
                .ok_or_else(|| bad(format!("missing key {key}")))?
                .parse()
                .map_err(|_| bad(format!("bad value for {key}")))
        }
        let config = ModelConfig {
            enc_layers: get(&kv, "enc_layers", &bad)?,
            dec_layers: get(&kv, "dec_layers", &bad)?,
            model_dim: get(&kv, "model_dim", &bad)?,
            heads: get(&kv, "heads", &bad)?,
            ffn_dim: get(&kv, "ffn_dim", &bad)?,
            max_positions: get(&kv, "max_positions", &bad)?,
            dropout: get(&kv, "dropout", &bad)?,
            vocab_size: get(&kv, "vocab_size", &bad)?,
            label_smoothing: get(&kv, "label_smoothing", &bad)?,
        };
        let mut params = ModelParameters::zeros(&config)?;
        let adam_step: Option<u64> = match kv.contains_key("adam_step") {
            true => Some(get(&kv, "adam_step", &bad)?),
            false => None,
        };

        let body_start = split + 2;
        if bytes.len() < body_start + 4 {
            return Err(bad("truncated".into()));
        }
        let (body, crc) = bytes[body_start..].split_at(bytes.len() - body_start - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().expect("4 bytes")) {
            return Err(TrainError::ChecksumMismatch(path.to_path_buf()));
        }

        let n = params.data.len();
        let mut adam = adam_step.map(|step| AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step,
        });
        let mut seen = 0usize;
        let mut pos = 0;
        while pos < body.len() {
            let nl = body[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("unterminated tensor header".into()))?;
            let line = std::str::from_utf8(&body[pos..pos + nl]).map_err(|_| bad("tensor header is not UTF-8".into()))?;
            pos += nl + 1;
            let mut parts = line.split(' ');
            let name = parts.next().unwrap_or_default();
            let shape: Vec<usize> = parts
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|_| bad(format!("bad shape for {name}")))?;
            let (kind, full) = match name.split_once('/') {
                Some((k @ ("adam.m" | "adam.v"), t)) if adam.is_some() => (k, t),
                Some(_) => return Err(bad(format!("unexpected tensor {name}"))),
                None => ("param", name),
            };
            let slot = params.layout().slot(full).ok_or_else(|| bad(format!("unknown tensor {name}")))?;
            let target = match (kind, adam.as_mut()) {
                ("adam.m", Some(a)) => &mut a.m,
                ("adam.v", Some(a)) => &mut a.v,
                _ => &mut params.data,
            };
            if shape.first() != Some(&(shape.len() - 1)) || shape[1..] != dims(slot.rows, slot.cols)[..] {
                return Err(bad(format!("shape mismatch for {name}")));
            }
            let len = slot.len() * 8;
            let raw = body.get(pos..pos + len).ok_or_else(|| bad(format!("truncated tensor {name}")))?;
            for (dst, chunk) in slot.of_mut(target).iter_mut().zip(raw.chunks_exact(8)) {
                *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
            pos += len;
            seen += 1;
        }
        let tensors = params.layout().tensors().count();
        let expected = tensors * if adam.is_some() { 3 } else { 1 };
        if seen != expected {
            return Err(bad(format!("expected {expected} tensors, found {seen}")));
        }
        Ok(Checkpoint {
            params,
            adam,
            step: get(&kv, "step", &bad)?,
            loss: get(&kv, "loss", &bad)?,
            vocab_hash: get(&kv, "vocab_hash", &bad)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Checkpoint::from_bytes(&bytes, path)
    }

    /// Loads and checks the vocabulary hash.
    pub fn load_for(path: &Path, vocab: &Vocabulary) -> Result<Self, TrainError> {
        let ckpt = Checkpoint::load(path)?;
        ckpt.check_vocab(vocab)?;
        Ok(ckpt)
    }
}
