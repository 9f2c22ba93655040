//! Model checkpoints (`TGMM`).
//!
//! ```text
//! offset 0   magic   b"TGMM"
//! offset 4   u32     version (1)
//! offset 8   u32     header length n
//! offset 12  n bytes JSON header {"model": ModelConfig, "training"?: {...}}
//!            u64     number of f64 values that follow
//!            f64 ×   every parameter tensor in declaration order,
//!                    then Adam first and second moments when "training"
//!                    is present
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::model::{Model, ModelConfig};
use crate::train::AdamState;
use crate::{Parameterized, Result, Scalar, TgmError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TGMM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    pub epochs_completed: usize,
    pub adam_step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    training: Option<TrainingMeta>,
}

/// Optimizer state stored alongside the parameters for resuming.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState<S> {
    pub epochs_completed: usize,
    pub adam: AdamState<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S> {
    pub model: Model<S>,
    pub training: Option<TrainingState<S>>,
}

fn push_f64s<S: Scalar>(out: &mut Vec<u8>, arrays: impl Iterator<Item = impl std::ops::Deref<Target = ArrayD<S>>>) {
    for a in arrays {
        for v in a.iter() {
            out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
    }
}

pub fn encode_checkpoint<S: Scalar>(model: &Model<S>, training: Option<&TrainingState<S>>) -> Result<Vec<u8>> {
    let header = Header {
        model: model.config().clone(),
        training: training.map(|t| TrainingMeta {
            epochs_completed: t.epochs_completed,
            adam_step: t.adam.step,
        }),
    };
    let json = serde_json::to_vec(&header)?;
    let tensors = model.tensors();
    let mut count: usize = tensors.iter().map(|t| t.len()).sum();
    if training.is_some() {
        count *= 3;
    }
    let mut out = Vec::with_capacity(24 + json.len() + 8 * count);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let header_len = u32::try_from(json.len()).map_err(|_| TgmError::config("checkpoint header too large"))?;
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(count as u64).to_le_bytes());
    push_f64s(&mut out, tensors.iter().map(|t| &t.values));
    if let Some(t) = training {
        push_f64s(&mut out, t.adam.m.iter());
        push_f64s(&mut out, t.adam.v.iter());
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() - *pos < n {
        return Err(TgmError::format(
            *pos as u64,
            format!("truncated: expected {n} bytes of {what}, {} remain", bytes.len() - *pos),
        ));
    }
    let out = &bytes[*pos..*pos + n];
    *pos += n;
    Ok(out)
}

fn read_into<S: Scalar>(bytes: &[u8], pos: &mut usize, target: &mut ArrayD<S>) -> Result<()> {
    for slot in target.iter_mut() {
        let b = take(bytes, pos, 8, "tensor values")?;
        let v = f64::from_le_bytes(b.try_into().expect("8 bytes"));
        *slot = S::from_f64(v).ok_or_else(|| TgmError::format(*pos as u64 - 8, "value not representable"))?;
    }
    Ok(())
}

pub fn decode_checkpoint<S: Scalar>(bytes: &[u8]) -> Result<Checkpoint<S>> {
    let mut pos = 0;
    if take(bytes, &mut pos, 4, "magic")? != CHECKPOINT_MAGIC {
        return Err(TgmError::format(0, "bad magic, expected TGMM"));
    }
    let version = u32::from_le_bytes(take(bytes, &mut pos, 4, "version")?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(TgmError::format(4, format!("unsupported checkpoint version {version}")));
    }
    let len = u32::from_le_bytes(take(bytes, &mut pos, 4, "header length")?.try_into().expect("4 bytes")) as usize;
    let header: Header = serde_json::from_slice(take(bytes, &mut pos, len, "header")?)
        .map_err(|e| TgmError::format(12, format!("bad header: {e}")))?;
    let count_at = pos as u64;
    let count = u64::from_le_bytes(take(bytes, &mut pos, 8, "value count")?.try_into().expect("8 bytes"));

    let mut model = Model::<S>::new(header.model, 0)?;
    let per_copy: usize = model.tensors().iter().map(|t| t.len()).sum();
    let expected = if header.training.is_some() { 3 * per_copy } else { per_copy };
    if count != expected as u64 {
        return Err(TgmError::format(
            count_at,
            format!("header describes {expected} values, file declares {count}"),
        ));
    }
    for t in model.tensors_mut() {
        read_into(bytes, &mut pos, &mut t.values)?;
    }
    let training = match header.training {
        None => None,
        Some(meta) => {
            let mut adam = AdamState::for_params(&model, S::zero());
            adam.step = meta.adam_step;
            for m in adam.m.iter_mut() {
                read_into(bytes, &mut pos, m)?;
            }
            for v in adam.v.iter_mut() {
                read_into(bytes, &mut pos, v)?;
            }
            Some(TrainingState {
                epochs_completed: meta.epochs_completed,
                adam,
            })
        }
    };
    if pos != bytes.len() {
        return Err(TgmError::format(pos as u64, "trailing bytes after tensors"));
    }
    Ok(Checkpoint { model, training })
}

pub fn save_checkpoint<S: Scalar>(path: impl AsRef<Path>, model: &Model<S>, training: Option<&TrainingState<S>>) -> Result<()> {
    fs::write(path, encode_checkpoint(model, training)?)?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<S>> {
    decode_checkpoint(&fs::read(path)?)
}
