//! Versioned binary checkpoint container for models and position heads.
//!
//! Layout (integers little-endian):
//! `"IDDC" | u32 version | u32 header_len | header JSON | f64[param_count]`.
//! The header records what is needed to rebuild the module structurally
//! (spec + init seed) plus the training iteration counter; the payload is
//! the flat parameter vector in the module's documented flatten order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{build_model, ModelSpec, SegNet};
use crate::position::PositionHead;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IDDC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Header {
    Segnet {
        model_spec: ModelSpec,
        init_seed: u64,
        iteration: u64,
        param_count: usize,
    },
    PositionHead {
        in_channels: usize,
        hidden: usize,
        init_seed: u64,
        iteration: u64,
        param_count: usize,
    },
}

fn write_container(path: &Path, header: &Header, params: &[f64]) -> Result<()> {
    let p = || path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(p(), e))?;
    let mut out = BufWriter::new(file);
    let header_bytes =
        serde_json::to_vec(header).map_err(|e| Error::format(p(), format!("header encode: {e}")))?;
    out.write_all(CHECKPOINT_MAGIC).map_err(|e| Error::io(p(), e))?;
    out.write_u32::<LittleEndian>(CHECKPOINT_VERSION)
        .map_err(|e| Error::io(p(), e))?;
    out.write_u32::<LittleEndian>(header_bytes.len() as u32)
        .map_err(|e| Error::io(p(), e))?;
    out.write_all(&header_bytes).map_err(|e| Error::io(p(), e))?;
    for &v in params {
        out.write_f64::<LittleEndian>(v).map_err(|e| Error::io(p(), e))?;
    }
    out.flush().map_err(|e| Error::io(p(), e))?;
    Ok(())
}

fn read_container(path: &Path) -> Result<(Header, Vec<f64>)> {
    let p = || path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(p(), e))?;
    let mut inp = BufReader::new(file);
    let mut magic = [0u8; 4];
    inp.read_exact(&mut magic)
        .map_err(|_| Error::format(p(), "file too short for magic bytes"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format(p(), "bad magic bytes, not a checkpoint"));
    }
    let version = inp
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::format(p(), "truncated version field"))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            p(),
            format!("checkpoint version {version} unsupported, expected {CHECKPOINT_VERSION}"),
        ));
    }
    let header_len = inp
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::format(p(), "truncated header length"))? as usize;
    let mut header_bytes = vec![0u8; header_len];
    inp.read_exact(&mut header_bytes)
        .map_err(|_| Error::format(p(), "truncated header"))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::format(p(), format!("header decode: {e}")))?;
    let count = match &header {
        Header::Segnet { param_count, .. } => *param_count,
        Header::PositionHead { param_count, .. } => *param_count,
    };
    let mut params = Vec::with_capacity(count);
    for i in 0..count {
        params.push(
            inp.read_f64::<LittleEndian>()
                .map_err(|_| Error::format(p(), format!("truncated payload at scalar {i}")))?,
        );
    }
    let mut trailing = [0u8; 1];
    match inp.read(&mut trailing) {
        Ok(0) => {}
        Ok(_) => return Err(Error::format(p(), "trailing bytes after payload")),
        Err(e) => return Err(Error::io(p(), e)),
    }
    Ok((header, params))
}

pub fn save_model_checkpoint(model: &SegNet, iteration: u64, path: impl AsRef<Path>) -> Result<()> {
    let params = model.flatten_params();
    let header = Header::Segnet {
        model_spec: model.spec.clone(),
        init_seed: model.init_seed,
        iteration,
        param_count: params.len(),
    };
    write_container(path.as_ref(), &header, &params)
}

/// Rebuilds the network from its stored spec and overwrites the parameters.
/// The loaded model is returned unfrozen; callers freeze it as needed.
pub fn load_model_checkpoint(path: impl AsRef<Path>) -> Result<(SegNet, u64)> {
    let path = path.as_ref();
    let (header, params) = read_container(path)?;
    match header {
        Header::Segnet {
            model_spec,
            init_seed,
            iteration,
            ..
        } => {
            let mut model = build_model(&model_spec, init_seed)?;
            model.load_flat_params(&params)?;
            Ok((model, iteration))
        }
        Header::PositionHead { .. } => Err(Error::format(
            path.display().to_string(),
            "expected a model checkpoint, found a position head",
        )),
    }
}

pub fn save_head_checkpoint(
    head: &PositionHead,
    iteration: u64,
    path: impl AsRef<Path>,
) -> Result<()> {
    let params = head.flatten_params();
    let header = Header::PositionHead {
        in_channels: head.in_channels,
        hidden: head.hidden,
        init_seed: head.init_seed,
        iteration,
        param_count: params.len(),
    };
    write_container(path.as_ref(), &header, &params)
}

pub fn load_head_checkpoint(path: impl AsRef<Path>) -> Result<(PositionHead, u64)> {
    let path = path.as_ref();
    let (header, params) = read_container(path)?;
    match header {
        Header::PositionHead {
            in_channels,
            hidden,
            init_seed,
            iteration,
            ..
        } => {
            let mut head = PositionHead::new(in_channels, hidden, init_seed);
            head.load_flat_params(&params)?;
            Ok((head, iteration))
        }
        Header::Segnet { .. } => Err(Error::format(
            path.display().to_string(),
            "expected a position head checkpoint, found a model",
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = build_model(&ModelSpec::teacher_default(6), 11).unwrap();
        save_model_checkpoint(&model, 1234, &path).unwrap();
        let (loaded, iter) = load_model_checkpoint(&path).unwrap();
        assert_eq!(iter, 1234);
        assert_eq!(loaded.spec, model.spec);
        assert_eq!(loaded.flatten_params(), model.flatten_params());
    }

    #[test]
    fn head_checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.ckpt");
        let head = PositionHead::new(24, 4, 7);
        save_head_checkpoint(&head, 55, &path).unwrap();
        let (loaded, iter) = load_head_checkpoint(&path).unwrap();
        assert_eq!(iter, 55);
        assert_eq!(loaded.flatten_params(), head.flatten_params());
        assert_eq!((loaded.in_channels, loaded.hidden), (24, 4));
    }

    #[test]
    fn kind_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.ckpt");
        save_head_checkpoint(&PositionHead::new(8, 4, 1), 0, &path).unwrap();
        assert!(load_model_checkpoint(&path).is_err());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = build_model(&ModelSpec::student_default(6), 3).unwrap();
        save_model_checkpoint(&model, 9, &path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        // truncated payload
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_model_checkpoint(&path), Err(Error::Format { .. })));
        // bad magic
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_model_checkpoint(&path), Err(Error::Format { .. })));
        // version bump
        let mut vbad = bytes;
        vbad[4] = 9;
        std::fs::write(&path, &vbad).unwrap();
        let err = load_model_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("version"));
    }
}
