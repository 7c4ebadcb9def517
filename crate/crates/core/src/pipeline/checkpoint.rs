//! Checkpoint files.
//!
//! Layout, little-endian: magic `LGCK`, format version (u32), header JSON
//! length (u32) and bytes, entry count (u32), then per entry: name length
//! (u16) and UTF-8 name, kind (u8: 0 parameter, 1 buffer), value count (u64)
//! and the values as f64.

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::write_atomic;
use crate::detectors::{Head, Student, Teacher};
use crate::labelenc::{LabelEncoder, LabelEncoderModel, LabelEncoderVariant};
use crate::nn::{Conv2d, Layer, Module, Seq};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint {0} does not exist")]
    Missing(String),
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {CHECKPOINT_VERSION})")]
    Version { found: u32 },
    #[error("checkpoint is truncated or corrupt: {0}")]
    Corrupt(String),
    #[error("checkpoint holds a {found} model, expected {expected}")]
    WrongKind { expected: &'static str, found: String },
    #[error("checkpoint does not fit the model: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Io(std::io::Error),
}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            CheckpointError::Corrupt("unexpected end of file".into())
        } else {
            CheckpointError::Io(e)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub variant: Option<LabelEncoderVariant>,
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    buffer: bool,
    values: Vec<f64>,
}

fn collect<S: Scalar>(module: &dyn Module<S>) -> Vec<Entry> {
    let mut out = Vec::new();
    module.visit_params("", &mut |name, p| {
        out.push(Entry { name, buffer: false, values: p.value.iter().map(|v| v.f64()).collect() })
    });
    module.visit_buffers("", &mut |name, b| {
        out.push(Entry { name, buffer: true, values: b.iter().map(|v| v.f64()).collect() })
    });
    out
}

pub fn encode_checkpoint<S: Scalar>(header: &CheckpointHeader, module: &dyn Module<S>) -> Vec<u8> {
    let mut w = Vec::new();
    let json = serde_json::to_vec(header).expect("header serializes");
    let entries = collect(module);
    w.write_all(CHECKPOINT_MAGIC).unwrap();
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION).unwrap();
    w.write_u32::<LittleEndian>(json.len() as u32).unwrap();
    w.write_all(&json).unwrap();
    w.write_u32::<LittleEndian>(entries.len() as u32).unwrap();
    for e in &entries {
        w.write_u16::<LittleEndian>(e.name.len() as u16).unwrap();
        w.write_all(e.name.as_bytes()).unwrap();
        w.write_u8(e.buffer as u8).unwrap();
        w.write_u64::<LittleEndian>(e.values.len() as u64).unwrap();
        for &v in &e.values {
            w.write_f64::<LittleEndian>(v).unwrap();
        }
    }
    w
}

fn decode(bytes: &[u8]) -> Result<(CheckpointHeader, Vec<Entry>), CheckpointError> {
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let mut json = vec![0u8; r.read_u32::<LittleEndian>()? as usize];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader =
        serde_json::from_slice(&json).map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;
    let count = r.read_u32::<LittleEndian>()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let mut name = vec![0u8; r.read_u16::<LittleEndian>()? as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::Corrupt("entry name".into()))?;
        let buffer = r.read_u8()? != 0;
        let len = r.read_u64::<LittleEndian>()? as usize;
        if len > (bytes.len() - r.position() as usize) / 8 {
            return Err(CheckpointError::Corrupt(format!("entry `{name}` runs past the end")));
        }
        let mut values = vec![0.0; len];
        r.read_f64_into::<LittleEndian>(&mut values)?;
        entries.push(Entry { name, buffer, values });
    }
    if (r.position() as usize) != bytes.len() {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }
    Ok((header, entries))
}

fn apply<S: Scalar>(module: &mut dyn Module<S>, entries: &[Entry]) -> Result<(), CheckpointError> {
    let expected = collect(module);
    if expected.len() != entries.len() {
        return Err(CheckpointError::Mismatch(format!("{} tensors, model has {}", entries.len(), expected.len())));
    }
    for (e, x) in entries.iter().zip(&expected) {
        if e.name != x.name || e.buffer != x.buffer || e.values.len() != x.values.len() {
            return Err(CheckpointError::Mismatch(format!("`{}` does not match `{}`", e.name, x.name)));
        }
    }
    let mut params = entries.iter().filter(|e| !e.buffer);
    module.visit_params_mut("", &mut |_, p| {
        let e = params.next().unwrap();
        p.value.iter_mut().zip(&e.values).for_each(|(v, &x)| *v = S::of(x));
    });
    let mut buffers = entries.iter().filter(|e| e.buffer);
    module.visit_buffers_mut("", &mut |_, b| {
        let e = buffers.next().unwrap();
        b.iter_mut().zip(&e.values).for_each(|(v, &x)| *v = S::of(x));
    });
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>, CheckpointError> {
    if !path.exists() {
        return Err(CheckpointError::Missing(path.display().to_string()));
    }
    Ok(std::fs::read(path)?)
}

fn check_kind(header: &CheckpointHeader, expected: &'static str) -> Result<(), CheckpointError> {
    if header.kind != expected {
        return Err(CheckpointError::WrongKind { expected, found: header.kind.clone() });
    }
    Ok(())
}

fn header(kind: &str, variant: Option<LabelEncoderVariant>, cfg: &ExperimentConfig) -> CheckpointHeader {
    CheckpointHeader { kind: kind.to_string(), variant, config: cfg.clone() }
}

pub fn save_teacher<S: Scalar>(path: &Path, cfg: &ExperimentConfig, teacher: &Teacher<S>) -> std::io::Result<()> {
    write_atomic(path, &encode_checkpoint(&header("teacher", None, cfg), teacher))
}

pub fn save_student<S: Scalar>(path: &Path, cfg: &ExperimentConfig, student: &Student<S>) -> std::io::Result<()> {
    write_atomic(path, &encode_checkpoint(&header("student", None, cfg), student))
}

pub fn save_labelenc<S: Scalar>(path: &Path, cfg: &ExperimentConfig, model: &LabelEncoderModel<S>) -> std::io::Result<()> {
    write_atomic(path, &encode_checkpoint(&header("labelenc", Some(model.variant), cfg), model))
}

/// Reads only the header.
pub fn read_header(path: &Path) -> Result<CheckpointHeader, CheckpointError> {
    Ok(decode(&read_file(path)?)?.0)
}

pub fn load_teacher<S: Scalar>(path: &Path) -> Result<(ExperimentConfig, Teacher<S>), CheckpointError> {
    let (h, entries) = decode(&read_file(path)?)?;
    check_kind(&h, "teacher")?;
    let mut t = Teacher::new(h.config.teacher_config(), &mut ChaCha8Rng::seed_from_u64(0));
    apply(&mut t, &entries)?;
    Ok((h.config, t))
}

pub fn load_student<S: Scalar>(path: &Path) -> Result<(ExperimentConfig, Student<S>), CheckpointError> {
    let (h, entries) = decode(&read_file(path)?)?;
    check_kind(&h, "student")?;
    let c = &h.config;
    let mut s = Student::new(c.student_config(), &c.world, &c.grid(), &c.adapter_spec(), &mut ChaCha8Rng::seed_from_u64(0));
    apply(&mut s, &entries)?;
    Ok((h.config, s))
}

pub fn load_labelenc<S: Scalar>(path: &Path) -> Result<(ExperimentConfig, LabelEncoderModel<S>), CheckpointError> {
    let (h, entries) = decode(&read_file(path)?)?;
    check_kind(&h, "labelenc")?;
    let variant = h.variant.ok_or_else(|| CheckpointError::Corrupt("label encoder without variant".into()))?;
    let c = &h.config;
    let rng = &mut ChaCha8Rng::seed_from_u64(0);
    let enc = c.label_encoder_config();
    let projection = (variant == LabelEncoderVariant::LabelencStyle)
        .then(|| Seq::new(vec![Layer::Conv(Conv2d::new(enc.channels, c.model.student_channels, 1, rng))]));
    let mut model = LabelEncoderModel {
        variant,
        encoder: LabelEncoder::new(enc, &c.grid(), rng),
        head: Head::new(enc.channels, c.model.head_channels, enc.num_classes, rng),
        projection,
    };
    apply(&mut model, &entries)?;
    Ok((h.config, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::state_hash;

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.grid_cells = 8;
        c.model.teacher_channels = 4;
        c.model.head_channels = 4;
        c
    }

    #[test]
    fn teacher_round_trip_is_exact() {
        let cfg = tiny();
        let t = Teacher::<f32>::new(cfg.teacher_config(), &mut ChaCha8Rng::seed_from_u64(9));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        save_teacher(&path, &cfg, &t).unwrap();
        let (c2, t2) = load_teacher::<f32>(&path).unwrap();
        assert_eq!(c2, cfg);
        assert_eq!(state_hash(&t), state_hash(&t2));
        assert!(matches!(load_student::<f32>(&path), Err(CheckpointError::WrongKind { .. })));
    }

    #[test]
    fn damaged_files_are_rejected() {
        let cfg = tiny();
        let t = Teacher::<f32>::new(cfg.teacher_config(), &mut ChaCha8Rng::seed_from_u64(9));
        let bytes = encode_checkpoint(&header("teacher", None, &cfg), &t);
        assert!(matches!(decode(&bytes[..bytes.len() - 5]), Err(CheckpointError::Corrupt(_))));
        let mut bumped = bytes.clone();
        bumped[4] = 9;
        assert!(matches!(decode(&bumped), Err(CheckpointError::Version { found: 9 })));
        assert!(matches!(decode(b"nope"), Err(CheckpointError::BadMagic)));
        assert!(matches!(load_teacher::<f32>(Path::new("/nonexistent/t.ckpt")), Err(CheckpointError::Missing(_))));
    }
}
