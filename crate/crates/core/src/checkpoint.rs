//! Binary checkpoints: `VLSM`, a u32 version, a length-prefixed canonical
//! config text, named little-endian f32 tensor records, and a trailing
//! CRC-32 of everything before it.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::text::Vocab;
use crate::training::{Progress, Trainer};

pub const MAGIC: &[u8; 4] = b"VLSM";
pub const VERSION: u32 = 1;
const MAX_RANK: usize = 8;

const FIRST_MOMENT: &str = "adam.m.";
const SECOND_MOMENT: &str = "adam.v.";

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub run: RunConfig,
    pub vocab: Vocab,
    pub progress: Progress,
    pub adam_step: u64,
    /// Parameters followed by optimizer moments, by name.
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Corrupt(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| corrupt(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

impl Checkpoint {
    pub fn from_trainer(run: &RunConfig, vocab: &Vocab, trainer: &Trainer) -> Self {
        let mut tensors: Vec<(String, Tensor<f32>)> = trainer
            .store
            .iter()
            .map(|(_, name, t)| {
                (
                    name.to_string(),
                    Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid"),
                )
            })
            .collect();
        for (prefix, moments) in [
            (FIRST_MOMENT, &trainer.adam.first),
            (SECOND_MOMENT, &trainer.adam.second),
        ] {
            for ((_, name, t), m) in trainer.store.iter().zip(moments) {
                tensors.push((
                    format!("{prefix}{name}"),
                    Tensor::new(t.shape().to_vec(), m.clone()).expect("valid"),
                ));
            }
        }
        Checkpoint {
            run: run.clone(),
            vocab: vocab.clone(),
            progress: trainer.progress,
            adam_step: trainer.adam.step,
            tensors,
        }
    }

    fn header_text(&self) -> String {
        let mut text = self.run.to_text();
        text.push_str(&format!(
            "adam_step={}\nepoch={}\ncursor={}\nstep={}\nvocab={}\n",
            self.adam_step,
            self.progress.epoch,
            self.progress.cursor,
            self.progress.step,
            self.vocab.to_inline()
        ));
        text
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = self.header_text();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for (name, t) in &self.tensors {
            let name_len = u16::try_from(name.len()).map_err(|_| corrupt(format!("tensor name {name} is too long")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < 12 {
            return Err(corrupt("file too short"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("four bytes"));
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let (body, crc) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().expect("four bytes")) {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { bytes: body, pos: 8 };
        let header_len = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(header_len)?).map_err(|_| corrupt("config text is not UTF-8"))?;
        let (run, vocab, progress, adam_step) = parse_header(header)?;
        let mut tensors = Vec::new();
        while !r.done() {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| corrupt("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u8()? as usize;
            if rank > MAX_RANK {
                return Err(corrupt(format!("tensor {name} has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= body.len()))
                .ok_or_else(|| corrupt(format!("tensor {name} shape {shape:?} is too large")))?;
            let raw = r.take(numel * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| corrupt(format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        Ok(Checkpoint {
            run,
            vocab,
            progress,
            adam_step,
            tensors,
        })
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp_name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        tmp_name.push(".tmp");
        let tmp = path.with_file_name(tmp_name);
        let io = |what: &str, e| Error::io(format!("{what} {}", tmp.display()), e);
        let mut f = fs::File::create(&tmp).map_err(|e| io("creating", e))?;
        f.write_all(&bytes).map_err(|e| io("writing", e))?;
        f.sync_all().map_err(|e| io("syncing", e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming onto {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }

    fn fill_store(&self, store: &mut ParamStore<f32>) -> Result<HashMap<&str, &Tensor<f32>>> {
        let by_name: HashMap<&str, &Tensor<f32>> = self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        if by_name.len() != self.tensors.len() {
            return Err(corrupt("duplicate tensor names"));
        }
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let t = by_name
                .get(name.as_str())
                .ok_or_else(|| corrupt(format!("missing parameter {name}")))?;
            let p = store.get_mut(id);
            if p.shape() != t.shape() {
                return Err(corrupt(format!(
                    "parameter {name} has shape {:?}, the model expects {:?}",
                    t.shape(),
                    p.shape()
                )));
            }
            p.data_mut().copy_from_slice(t.data());
        }
        let expected = store.len();
        let params = self
            .tensors
            .iter()
            .filter(|(n, _)| !n.starts_with(FIRST_MOMENT) && !n.starts_with(SECOND_MOMENT))
            .count();
        if params != expected {
            return Err(corrupt(format!("{params} parameter records for a model of {expected}")));
        }
        Ok(by_name)
    }

    /// Model and parameters for inference.
    pub fn into_model(&self) -> Result<(Model, ParamStore<f32>)> {
        let mut store = ParamStore::new();
        let model = Model::new(self.run.model_config(self.vocab.len()), &mut store, self.run.seed)?;
        self.fill_store(&mut store)?;
        Ok((model, store))
    }

    /// A trainer positioned exactly where this checkpoint was taken.
    pub fn into_trainer(&self) -> Result<Trainer> {
        let mut trainer = Trainer::new(self.run.model_config(self.vocab.len()), self.run.train_config())?;
        let by_name = self.fill_store(&mut trainer.store)?;
        let mut adam = AdamState::new(&trainer.store, trainer.config.adam.clone());
        for (id, name, t) in trainer.store.iter() {
            for (prefix, buf) in [(FIRST_MOMENT, &mut adam.first), (SECOND_MOMENT, &mut adam.second)] {
                let m = by_name
                    .get(format!("{prefix}{name}").as_str())
                    .ok_or_else(|| corrupt(format!("missing optimizer moment {prefix}{name}")))?;
                if m.shape() != t.shape() {
                    return Err(corrupt(format!("optimizer moment {prefix}{name} has the wrong shape")));
                }
                buf[id.index()] = m.data().to_vec();
            }
        }
        adam.step = self.adam_step;
        trainer.adam = adam;
        trainer.progress = self.progress;
        Ok(trainer)
    }
}

fn parse_header(text: &str) -> Result<(RunConfig, Vocab, Progress, u64)> {
    let mut run_lines = String::new();
    let mut extra: HashMap<&str, &str> = HashMap::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| corrupt(format!("bad config line {line:?}")))?;
        match k {
            "adam_step" | "epoch" | "cursor" | "step" | "vocab" => {
                if extra.insert(k, v).is_some() {
                    return Err(corrupt(format!("duplicate key {k}")));
                }
            }
            _ => {
                run_lines.push_str(line);
                run_lines.push('\n');
            }
        }
    }
    let run = RunConfig::parse(&run_lines).map_err(|e| corrupt(format!("config: {e}")))?;
    let field = |k: &str| extra.get(k).copied().ok_or_else(|| corrupt(format!("missing key {k}")));
    let num = |k: &str| -> Result<u64> { field(k)?.parse().map_err(|_| corrupt(format!("bad value for {k}"))) };
    let vocab = Vocab::from_inline(field("vocab")?).map_err(|e| corrupt(format!("vocabulary: {e}")))?;
    let progress = Progress {
        epoch: num("epoch")?,
        cursor: num("cursor")? as usize,
        step: num("step")?,
    };
    Ok((run, vocab, progress, num("adam_step")?))
}
