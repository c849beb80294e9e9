//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `CVQACKPT`, `u32` header length, UTF-8 JSON
//! header (format version, vocabularies, config, dimensions, iteration, RNG
//! position, optimizer step counts), `u32` array count, then per array a
//! `u32`-prefixed name, `u32` rows, `u32` cols and `rows × cols` `f64`
//! values. Parameters round-trip bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{CycleConfig, OptimizerKind};
use super::optim::OptimizerState;
use super::TrainState;
use crate::corpus::{AnswerVocabulary, Vocabulary};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::vqa::{VqaDims, VqaParams};
use crate::vqg::{VqgDims, VqgParams};

pub const CHECKPOINT_FORMAT: &str = "cyclevqa-checkpoint/1";
const MAGIC: &[u8; 8] = b"CVQACKPT";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub vocab: Vocabulary,
    pub answers: AnswerVocabulary,
    pub config: CycleConfig,
    pub state: TrainState,
}

#[derive(Serialize, Deserialize)]
struct RngPosition {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    kind: OptimizerKind,
    steps: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    vocab: Vocabulary,
    answers: AnswerVocabulary,
    config: String,
    vqa_dims: VqaDims,
    vqg_dims: VqgDims,
    iteration: u64,
    rng: RngPosition,
    vqa_optimizer: OptimizerHeader,
    vqg_optimizer: OptimizerHeader,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<[u8; 32]> {
    let bad = || Error::Checkpoint("malformed RNG seed".into());
    if s.len() != 64 {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(out)
}

fn push_optimizer(arrays: &mut Vec<(String, Tensor)>, prefix: &str, names: &[&str], opt: &OptimizerState) {
    for (n, t) in names.iter().zip(&opt.first) {
        arrays.push((format!("{prefix}.first.{n}"), t.clone()));
    }
    for (n, t) in names.iter().zip(&opt.second) {
        arrays.push((format!("{prefix}.second.{n}"), t.clone()));
    }
}

fn take_optimizer<P: ParamSet>(
    arrays: &mut BTreeMap<String, Tensor>,
    prefix: &str,
    params: &P,
    header: &OptimizerHeader,
) -> Result<OptimizerState> {
    let mut opt = OptimizerState::new(header.kind, params);
    opt.steps = header.steps;
    let named = params.named();
    for (slot, (name, like)) in opt.first.iter_mut().zip(&named) {
        *slot = crate::params::take_array(arrays, &format!("{prefix}.first"), name, like)?;
    }
    for (slot, (name, like)) in opt.second.iter_mut().zip(&named) {
        *slot = crate::params::take_array(arrays, &format!("{prefix}.second"), name, like)?;
    }
    Ok(opt)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.state;
        let header = Header {
            format: CHECKPOINT_FORMAT.to_string(),
            vocab: self.vocab.clone(),
            answers: self.answers.clone(),
            config: self.config.to_text(),
            vqa_dims: s.vqa.dims(),
            vqg_dims: s.vqg.dims(),
            iteration: s.iteration,
            rng: RngPosition {
                seed: hex(&s.rng.get_seed()),
                stream: s.rng.get_stream(),
                word_pos: s.rng.get_word_pos().to_string(),
            },
            vqa_optimizer: OptimizerHeader { kind: s.vqa_opt.kind, steps: s.vqa_opt.steps },
            vqg_optimizer: OptimizerHeader { kind: s.vqg_opt.kind, steps: s.vqg_opt.steps },
        };
        let header = serde_json::to_vec(&header).expect("header serializes");

        let mut arrays: Vec<(String, Tensor)> = Vec::new();
        arrays.extend(s.vqa.named().into_iter().map(|(n, t)| (format!("vqa.{n}"), t.clone())));
        arrays.extend(s.vqg.named().into_iter().map(|(n, t)| (format!("vqg.{n}"), t.clone())));
        let vqa_names: Vec<&str> = s.vqa.named().into_iter().map(|(n, _)| n).collect();
        let vqg_names: Vec<&str> = s.vqg.named().into_iter().map(|(n, _)| n).collect();
        push_optimizer(&mut arrays, "opt.vqa", &vqa_names, &s.vqa_opt);
        push_optimizer(&mut arrays, "opt.vqg", &vqg_names, &s.vqg_opt);

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
        for (name, t) in &arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rows as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols as u32).to_le_bytes());
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let hlen = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format {}", header.format)));
        }
        let count = r.u32()? as usize;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let raw = r.take(rows * cols * 8)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            arrays.insert(name, Tensor::from_vec(rows, cols, data));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after arrays".into()));
        }

        let config = CycleConfig::parse(&header.config)?;
        let mut template_rng = ChaCha8Rng::seed_from_u64(0);
        let vqa_like = VqaParams::init(header.vqa_dims, &mut template_rng);
        let vqg_like = VqgParams::init(header.vqg_dims, &mut template_rng);
        let vqa = VqaParams::from_named(&vqa_like, "vqa", &mut arrays)?;
        let vqg = VqgParams::from_named(&vqg_like, "vqg", &mut arrays)?;
        let vqa_opt = take_optimizer(&mut arrays, "opt.vqa", &vqa, &header.vqa_optimizer)?;
        let vqg_opt = take_optimizer(&mut arrays, "opt.vqg", &vqg, &header.vqg_optimizer)?;
        if let Some(extra) = arrays.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected array {extra}")));
        }

        let mut rng = ChaCha8Rng::from_seed(unhex(&header.rng.seed)?);
        rng.set_stream(header.rng.stream);
        let word_pos: u128 = header
            .rng
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint("malformed RNG position".into()))?;
        rng.set_word_pos(word_pos);

        Ok(Checkpoint {
            vocab: header.vocab,
            answers: header.answers,
            config,
            state: TrainState { iteration: header.iteration, vqa, vqg, vqa_opt, vqg_opt, rng },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
