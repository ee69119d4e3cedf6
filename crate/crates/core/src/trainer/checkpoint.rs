//! Binary model checkpoints.
//!
//! Layout: the magic bytes `DACSR1`, a little-endian u32 header length,
//! a UTF-8 JSON header (names, shapes, payload offsets, config snapshot,
//! epoch, validation metric, optimizer step), then the raw little-endian
//! 32-bit float payloads at the offsets the header records, measured from
//! the end of the header.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{ParamSet, Shape};

use super::adam::AdamState;

pub const MAGIC: &[u8; 6] = b"DACSR1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes; not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint parameter {0:?} is missing from the model")]
    MissingParam(String),
    #[error("parameter {name:?}: checkpoint shape {got} does not match model shape {want}")]
    ShapeMismatch {
        name: String,
        want: Shape,
        got: Shape,
    },
    #[error("checkpoint io on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One named parameter payload.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlob {
    pub name: String,
    pub shape: Shape,
    pub values: Vec<f32>,
}

/// Optimizer moments for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentBlob {
    pub name: String,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

/// Optimizer snapshot: step counter plus per-parameter moments.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerSnapshot {
    pub step: u64,
    pub entries: Vec<MomentBlob>,
}

/// A serialized parameter bundle with its training context.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub epoch: usize,
    pub validation_metric: f64,
    pub config: serde_json::Value,
    pub params: Vec<ParamBlob>,
    pub optimizer: Option<OptimizerSnapshot>,
}

#[derive(Serialize, Deserialize)]
struct HeaderParam {
    name: String,
    shape: [usize; 2],
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct HeaderMoments {
    name: String,
    m_offset: u64,
    v_offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct HeaderOptimizer {
    step: u64,
    entries: Vec<HeaderMoments>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    epoch: usize,
    validation_metric: f64,
    config: serde_json::Value,
    params: Vec<HeaderParam>,
    optimizer: Option<HeaderOptimizer>,
}

impl ModelCheckpoint {
    /// Snapshots every parameter of the set, in registration order, plus
    /// optimizer moments when available.
    pub fn from_params(
        params: &ParamSet<f32>,
        optimizer: Option<&AdamState<f32>>,
        config: serde_json::Value,
        epoch: usize,
        validation_metric: f64,
    ) -> Self {
        let blobs: Vec<ParamBlob> = params
            .ids()
            .map(|id| ParamBlob {
                name: params.name(id).to_string(),
                shape: params.shape(id),
                values: params.values(id).to_vec(),
            })
            .collect();
        let optimizer = optimizer.map(|state| OptimizerSnapshot {
            step: state.step_count(),
            entries: params
                .ids()
                .filter_map(|id| {
                    state.moments(id).map(|(m, v)| MomentBlob {
                        name: params.name(id).to_string(),
                        m: m.to_vec(),
                        v: v.to_vec(),
                    })
                })
                .collect(),
        });
        Self {
            format_version: FORMAT_VERSION,
            epoch,
            validation_metric,
            config,
            params: blobs,
            optimizer,
        }
    }

    /// Copies every checkpoint parameter into a same-named parameter of
    /// the set. Every blob must find its parameter with matching shape.
    pub fn apply_to(&self, params: &mut ParamSet<f32>) -> Result<(), CheckpointError> {
        self.apply_renamed(params, "", "")
    }

    /// Like [`Self::apply_to`] but rewrites each blob name from
    /// `src_prefix` to `dst_prefix` first. Blobs outside `src_prefix` are
    /// skipped. Used to seed model namespaces from pre-trained encoders.
    pub fn apply_renamed(
        &self,
        params: &mut ParamSet<f32>,
        src_prefix: &str,
        dst_prefix: &str,
    ) -> Result<(), CheckpointError> {
        for blob in &self.params {
            let Some(suffix) = blob.name.strip_prefix(src_prefix) else {
                continue;
            };
            let dst = format!("{dst_prefix}{suffix}");
            let id = params
                .id_of(&dst)
                .ok_or_else(|| CheckpointError::MissingParam(dst.clone()))?;
            if params.shape(id) != blob.shape {
                return Err(CheckpointError::ShapeMismatch {
                    name: dst,
                    want: params.shape(id),
                    got: blob.shape,
                });
            }
            params.values_mut(id).copy_from_slice(&blob.values);
        }
        Ok(())
    }

    /// Restores optimizer moments into an [`AdamState`] keyed by the
    /// parameter names of `params`.
    pub fn apply_optimizer(
        &self,
        params: &ParamSet<f32>,
        state: &mut AdamState<f32>,
    ) -> Result<(), CheckpointError> {
        let Some(opt) = &self.optimizer else {
            return Ok(());
        };
        state.set_step_count(opt.step);
        for entry in &opt.entries {
            let id = params
                .id_of(&entry.name)
                .ok_or_else(|| CheckpointError::MissingParam(entry.name.clone()))?;
            state.set_moments(id, entry.m.clone(), entry.v.clone());
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload: Vec<u8> = Vec::new();
        let push_floats = |payload: &mut Vec<u8>, values: &[f32]| -> u64 {
            let offset = payload.len() as u64;
            for v in values {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            offset
        };

        let mut header_params = Vec::with_capacity(self.params.len());
        for blob in &self.params {
            let offset = push_floats(&mut payload, &blob.values);
            header_params.push(HeaderParam {
                name: blob.name.clone(),
                shape: blob.shape.dims(),
                offset,
                len: blob.values.len() as u64,
            });
        }
        let header_opt = self.optimizer.as_ref().map(|opt| HeaderOptimizer {
            step: opt.step,
            entries: opt
                .entries
                .iter()
                .map(|e| {
                    let m_offset = push_floats(&mut payload, &e.m);
                    let v_offset = push_floats(&mut payload, &e.v);
                    HeaderMoments {
                        name: e.name.clone(),
                        m_offset,
                        v_offset,
                        len: e.m.len() as u64,
                    }
                })
                .collect(),
        });

        let header = Header {
            format_version: self.format_version,
            epoch: self.epoch,
            validation_metric: self.validation_metric,
            config: self.config.clone(),
            params: header_params,
            optimizer: header_opt,
        };
        let header_bytes = serde_json::to_vec(&header).expect("header serializes");

        let mut out = Vec::with_capacity(10 + header_bytes.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 10 || &bytes[..6] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let header_len = u32::from_le_bytes(
            bytes[6..10]
                .try_into()
                .map_err(|_| CheckpointError::Corrupt("truncated length".into()))?,
        ) as usize;
        let header_end = 10 + header_len;
        if bytes.len() < header_end {
            return Err(CheckpointError::Corrupt("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[10..header_end])
            .map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(header.format_version));
        }
        let payload = &bytes[header_end..];

        let read_floats = |offset: u64, len: u64| -> Result<Vec<f32>, CheckpointError> {
            let start = offset as usize;
            let end = start + len as usize * 4;
            if payload.len() < end {
                return Err(CheckpointError::Corrupt(format!(
                    "payload range {start}..{end} out of bounds ({})",
                    payload.len()
                )));
            }
            Ok(payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };

        let mut params = Vec::with_capacity(header.params.len());
        for hp in &header.params {
            let shape = Shape::new(hp.shape[0], hp.shape[1]);
            if shape.count() as u64 != hp.len {
                return Err(CheckpointError::Corrupt(format!(
                    "parameter {:?}: shape {shape} disagrees with payload length {}",
                    hp.name, hp.len
                )));
            }
            params.push(ParamBlob {
                name: hp.name.clone(),
                shape,
                values: read_floats(hp.offset, hp.len)?,
            });
        }
        let optimizer = match &header.optimizer {
            None => None,
            Some(opt) => {
                let mut entries = Vec::with_capacity(opt.entries.len());
                for e in &opt.entries {
                    entries.push(MomentBlob {
                        name: e.name.clone(),
                        m: read_floats(e.m_offset, e.len)?,
                        v: read_floats(e.v_offset, e.len)?,
                    });
                }
                Some(OptimizerSnapshot {
                    step: opt.step,
                    entries,
                })
            }
        };

        Ok(Self {
            format_version: header.format_version,
            epoch: header.epoch,
            validation_metric: header.validation_metric,
            config: header.config,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn sample_params() -> ParamSet<f32> {
        let mut params: ParamSet<f32> = ParamSet::new();
        params
            .add("enc.w", Shape::new(2, 3), vec![0.1, -0.2, 0.3, 1.5, -2.5, 0.0])
            .unwrap();
        params.add("enc.b", Shape::vector(3), vec![1.0, 2.0, 3.0]).unwrap();
        params
    }

    #[test]
    fn byte_roundtrip_is_lossless() {
        let params = sample_params();
        let mut state = AdamState::new();
        state.set_step_count(7);
        state.set_moments(
            params.id_of("enc.w").unwrap(),
            vec![0.5; 6],
            vec![0.25; 6],
        );
        let ckpt = ModelCheckpoint::from_params(
            &params,
            Some(&state),
            serde_json::json!({"model": "sasrec", "d": 3}),
            12,
            0.4375,
        );
        let bytes = ckpt.to_bytes();
        assert_eq!(&bytes[..6], MAGIC);
        let back = ModelCheckpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);

        // Bitwise parameter equality through apply_to.
        let mut restored = sample_params();
        for id in restored.ids().collect::<Vec<_>>() {
            for v in restored.values_mut(id) {
                *v = 99.0;
            }
        }
        back.apply_to(&mut restored).unwrap();
        for id in params.ids() {
            let a = params.values(id);
            let b = restored.values(params.id_of(params.name(id)).unwrap());
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }

        // Optimizer moments restore too.
        let mut state2 = AdamState::new();
        back.apply_optimizer(&restored, &mut state2).unwrap();
        assert_eq!(state2.step_count(), 7);
        let (m, v) = state2.moments(restored.id_of("enc.w").unwrap()).unwrap();
        assert_eq!(m, &[0.5; 6]);
        assert_eq!(v, &[0.25; 6]);
    }

    #[test]
    fn serialization_is_deterministic() {
        let params = sample_params();
        let ckpt = ModelCheckpoint::from_params(&params, None, serde_json::Value::Null, 0, 0.0);
        assert_eq!(ckpt.to_bytes(), ckpt.to_bytes());
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        assert!(matches!(
            ModelCheckpoint::from_bytes(b"NOTDAC\0\0\0\0"),
            Err(CheckpointError::BadMagic)
        ));
        let params = sample_params();
        let mut ckpt = ModelCheckpoint::from_params(&params, None, serde_json::Value::Null, 0, 0.0);
        ckpt.format_version = 9;
        assert!(matches!(
            ModelCheckpoint::from_bytes(&ckpt.to_bytes()),
            Err(CheckpointError::UnsupportedVersion(9))
        ));
    }

    #[test]
    fn shape_mismatch_is_explicit() {
        let params = sample_params();
        let ckpt = ModelCheckpoint::from_params(&params, None, serde_json::Value::Null, 0, 0.0);
        let mut other: ParamSet<f32> = ParamSet::new();
        other.add("enc.w", Shape::new(3, 2), vec![0.0; 6]).unwrap();
        other.add("enc.b", Shape::vector(3), vec![0.0; 3]).unwrap();
        let err = ckpt.apply_to(&mut other).unwrap_err();
        assert!(matches!(err, CheckpointError::ShapeMismatch { ref name, .. } if name == "enc.w"));

        let mut missing: ParamSet<f32> = ParamSet::new();
        missing.add("enc.b", Shape::vector(3), vec![0.0; 3]).unwrap();
        assert!(matches!(
            ckpt.apply_to(&mut missing),
            Err(CheckpointError::MissingParam(_))
        ));
    }

    #[test]
    fn renamed_application_moves_namespaces() {
        let mut src: ParamSet<f32> = ParamSet::new();
        src.add("encoder.p.item_emb", Shape::new(2, 2), vec![1.0, 2.0, 3.0, 4.0])
            .unwrap();
        let ckpt = ModelCheckpoint::from_params(&src, None, serde_json::Value::Null, 0, 0.0);
        let mut dst: ParamSet<f32> = ParamSet::new();
        let id = dst.add_zeros("dacsr.fp.item_emb", Shape::new(2, 2)).unwrap();
        ckpt.apply_renamed(&mut dst, "encoder.p.", "dacsr.fp.").unwrap();
        assert_eq!(dst.values(id), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let params = sample_params();
        let ckpt = ModelCheckpoint::from_params(
            &params,
            None,
            serde_json::json!({"k": [10, 20]}),
            3,
            0.25,
        );
        ckpt.save(&path).unwrap();
        let back = ModelCheckpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
    }
}
