//! Checkpoint directories: JSON metadata plus flat binary tensor archives.
//!
//! Archive layout (little-endian): magic `FGTA`, u16 version, u32 tensor
//! count, then per tensor: u16 name length, UTF-8 name, u8 dtype (0 = f64),
//! u8 rank, u64 per dimension, raw data.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adam::AdamState;
use crate::config::{ModelConfig, OptimizerConfig, TrainSchedule};
use crate::model::{Model, ModelError};

pub const ARCHIVE_MAGIC: &[u8; 4] = b"FGTA";
pub const ARCHIVE_VERSION: u16 = 1;
const DTYPE_F64: u8 = 0;

pub const META_FILE: &str = "meta.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
    #[error("checkpoint metadata: {0}")]
    Meta(#[from] serde_json::Error),
    #[error("corrupt tensor archive: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("no checkpoints under {0}")]
    Missing(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn write_archive<W: Write>(mut w: W, tensors: &[NamedTensor]) -> io::Result<()> {
    w.write_all(ARCHIVE_MAGIC)?;
    w.write_all(&ARCHIVE_VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        w.write_all(&(t.name.len() as u16).to_le_bytes())?;
        w.write_all(t.name.as_bytes())?;
        w.write_all(&[DTYPE_F64, t.shape.len() as u8])?;
        for &d in &t.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.data.len() * 8);
        for x in &t.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()
}

pub fn read_archive<R: Read>(mut r: R) -> Result<Vec<NamedTensor>, CheckpointError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4)? != ARCHIVE_MAGIC {
        return Err(CheckpointError::Corrupt("bad magic".into()));
    }
    let version = u16::from_le_bytes(cur.take(2)?.try_into().unwrap());
    if version != ARCHIVE_VERSION {
        return Err(CheckpointError::Corrupt(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?;
        let head = cur.take(2)?;
        if head[0] != DTYPE_F64 {
            return Err(CheckpointError::Corrupt(format!("{name}: unknown dtype {}", head[0])));
        }
        let shape = (0..head[1])
            .map(|_| Ok(u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize))
            .collect::<Result<Vec<_>, CheckpointError>>()?;
        let n: usize = shape.iter().product();
        let raw = cur.take(n.checked_mul(8).ok_or_else(|| CheckpointError::Corrupt("shape overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(NamedTensor { name, shape, data });
    }
    if cur.pos != bytes.len() {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CheckpointError::Corrupt("truncated archive".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

/// Everything needed to continue a run or reload the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    pub val_loss: f64,
    pub perplexity: f64,
    pub train_loss: Option<f64>,
    pub sample_text: String,
    pub config_hash: String,
    pub rng_state: RngState,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub schedule: TrainSchedule,
}

/// The run's stochastic state beyond the parameters: where the data stream
/// resumes and which seed drives sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub data_cursor: u64,
}

/// SHA-256 over the canonical JSON of the three configs.
pub fn config_hash(model: &ModelConfig, opt: &OptimizerConfig, schedule: &TrainSchedule) -> String {
    let json = serde_json::to_vec(&(model, opt, schedule)).expect("configs serialize");
    hex::encode(Sha256::digest(json))
}

pub fn checkpoint_dir(root: &Path, step: u64) -> PathBuf {
    root.join(format!("step_{step:08}"))
}

pub fn model_archive(model: &Model) -> Vec<NamedTensor> {
    model
        .tensors
        .iter()
        .map(|t| NamedTensor {
            name: t.name.clone(),
            shape: t.shape.clone(),
            data: t.data.clone(),
        })
        .collect()
}

fn optimizer_archive(model: &Model, st: &AdamState) -> Vec<NamedTensor> {
    let mut out = vec![NamedTensor {
        name: "adam.step".into(),
        shape: vec![1],
        data: vec![st.step as f64],
    }];
    for (prefix, bufs) in [("m", &st.m), ("v", &st.v)] {
        for (t, b) in model.tensors.iter().zip(bufs.iter()) {
            out.push(NamedTensor {
                name: format!("{prefix}.{}", t.name),
                shape: t.shape.clone(),
                data: b.clone(),
            });
        }
    }
    out
}

pub fn save(dir: &Path, meta: &CheckpointMeta, model: &Model, st: &AdamState) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir)?;
    let mut json = serde_json::to_vec_pretty(meta)?;
    json.push(b'\n');
    fs::write(dir.join(META_FILE), json)?;
    write_archive(io::BufWriter::new(fs::File::create(dir.join(PARAMS_FILE))?), &model_archive(model))?;
    write_archive(
        io::BufWriter::new(fs::File::create(dir.join(OPTIMIZER_FILE))?),
        &optimizer_archive(model, st),
    )?;
    Ok(())
}

pub fn load_meta(dir: &Path) -> Result<CheckpointMeta, CheckpointError> {
    Ok(serde_json::from_slice(&fs::read(dir.join(META_FILE))?)?)
}

/// Rebuilds a model from `params.bin`, checking names and shapes.
pub fn load_model(dir: &Path) -> Result<(CheckpointMeta, Model), CheckpointError> {
    let meta = load_meta(dir)?;
    let mut model = Model::zeros(&meta.model)?;
    let archive = read_archive(io::BufReader::new(fs::File::open(dir.join(PARAMS_FILE))?))?;
    fill(&mut model, &archive, "")?;
    Ok((meta, model))
}

fn fill(model: &mut Model, archive: &[NamedTensor], prefix: &str) -> Result<(), CheckpointError> {
    let by_name: std::collections::HashMap<&str, &NamedTensor> =
        archive.iter().map(|t| (t.name.as_str(), t)).collect();
    for t in &mut model.tensors {
        let key = format!("{prefix}{}", t.name);
        let src = by_name
            .get(key.as_str())
            .ok_or_else(|| CheckpointError::Corrupt(format!("missing tensor {key}")))?;
        if src.shape != t.shape {
            return Err(CheckpointError::Corrupt(format!(
                "{key}: shape {:?}, expected {:?}",
                src.shape, t.shape
            )));
        }
        t.data.clone_from(&src.data);
    }
    Ok(())
}

/// Full training state for resumption.
pub fn load_state(dir: &Path) -> Result<(CheckpointMeta, Model, AdamState), CheckpointError> {
    let (meta, model) = load_model(dir)?;
    let archive = read_archive(io::BufReader::new(fs::File::open(dir.join(OPTIMIZER_FILE))?))?;
    let step = archive
        .iter()
        .find(|t| t.name == "adam.step")
        .and_then(|t| t.data.first())
        .ok_or_else(|| CheckpointError::Corrupt("missing adam.step".into()))?;
    let mut scratch = model.clone();
    fill(&mut scratch, &archive, "m.")?;
    let m = scratch.tensors.iter().map(|t| t.data.clone()).collect();
    fill(&mut scratch, &archive, "v.")?;
    let v = scratch.tensors.iter().map(|t| t.data.clone()).collect();
    let st = AdamState {
        step: *step as u64,
        m,
        v,
    };
    Ok((meta, model, st))
}

/// The checkpoint directory with the highest step under `root`.
pub fn latest(root: &Path) -> Result<PathBuf, CheckpointError> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join(META_FILE).is_file())
        .collect();
    dirs.sort();
    dirs.pop().ok_or_else(|| CheckpointError::Missing(root.to_path_buf()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn archive_roundtrip_is_bit_exact(
            raw in proptest::collection::vec(
                ("[a-z.]{1,12}", proptest::collection::vec(any::<u64>(), 0..40)),
                0..6,
            )
        ) {
            let ts: Vec<NamedTensor> = raw
                .into_iter()
                .map(|(name, bits)| NamedTensor {
                    name,
                    shape: vec![bits.len()],
                    data: bits.into_iter().map(f64::from_bits).collect(),
                })
                .collect();
            let mut buf = Vec::new();
            write_archive(&mut buf, &ts).unwrap();
            let back = read_archive(&buf[..]).unwrap();
            prop_assert_eq!(back.len(), ts.len());
            for (a, b) in back.iter().zip(&ts) {
                prop_assert_eq!(&a.name, &b.name);
                prop_assert_eq!(&a.shape, &b.shape);
                let bits_a: Vec<u64> = a.data.iter().map(|x| x.to_bits()).collect();
                let bits_b: Vec<u64> = b.data.iter().map(|x| x.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
        }
    }

    #[test]
    fn archive_roundtrip_and_truncation() {
        let ts = vec![
            NamedTensor {
                name: "a".into(),
                shape: vec![2, 3],
                data: vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE, 0.0, -0.0],
            },
            NamedTensor {
                name: "bias".into(),
                shape: vec![1],
                data: vec![7.0],
            },
        ];
        let mut buf = Vec::new();
        write_archive(&mut buf, &ts).unwrap();
        let back = read_archive(&buf[..]).unwrap();
        assert_eq!(back, ts);
        assert!(back[0].data[5].is_sign_negative());
        assert!(matches!(read_archive(&buf[..buf.len() - 1]), Err(CheckpointError::Corrupt(_))));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_archive(&bad[..]), Err(CheckpointError::Corrupt(_))));
    }
}
