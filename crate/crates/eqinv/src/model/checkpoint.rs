//! Model checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "EQCK" | u32 version=1 | config block | u32 block count |
//! per block: u32 name len | utf8 name | u32 rank | u32 dims... | f64 data
//! ```
//!
//! Parameter payloads are raw f64 bits, so save → load → forward reproduces
//! the pre-save forward bitwise.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{EqInvError, Result};

const MAGIC: &[u8; 4] = b"EQCK";
const VERSION: u32 = 1;

impl Model {
    /// Stable name → parameter pairing used by the checkpoint format.
    pub fn named_params(&self) -> Vec<(String, crate::autodiff::Tensor)> {
        let mut out = Vec::new();
        for (i, p) in self.encoder_params().into_iter().enumerate() {
            let kind = if i % 2 == 0 { "weight" } else { "bias" };
            out.push((format!("encoder.{}.{kind}", i / 2), p));
        }
        out.push(("mask".to_string(), self.mask.clone()));
        for (i, p) in self.projection_params().into_iter().enumerate() {
            let layer = if i / 2 == 0 { "hidden" } else { "out" };
            let kind = if i % 2 == 0 { "weight" } else { "bias" };
            out.push((format!("projection.{layer}.{kind}"), p));
        }
        out.push(("classifier.direction".to_string(), self.classifier.direction.clone()));
        if self.config.weight_norm {
            out.push(("classifier.gain".to_string(), self.classifier.gain.clone()));
        }
        out.push(("classifier.bias".to_string(), self.classifier.bias.clone()));
        out
    }
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;

    let c = &model.config;
    write_u32(&mut w, c.input_dim as u32)?;
    write_u32(&mut w, c.encoder_hidden.len() as u32)?;
    for h in &c.encoder_hidden {
        write_u32(&mut w, *h as u32)?;
    }
    write_u32(&mut w, c.feature_dim as u32)?;
    write_u32(&mut w, c.proj_hidden as u32)?;
    write_u32(&mut w, c.proj_dim as u32)?;
    write_u32(&mut w, c.num_classes as u32)?;
    w.write_all(&[u8::from(c.weight_norm)])?;

    let blocks = model.named_params();
    write_u32(&mut w, blocks.len() as u32)?;
    for (name, param) in blocks {
        write_u32(&mut w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        let shape = param.shape();
        write_u32(&mut w, shape.len() as u32)?;
        for d in &shape {
            write_u32(&mut w, *d as u32)?;
        }
        for v in param.data().iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == ErrorKind::UnexpectedEof {
            EqInvError::Format("checkpoint file is truncated".into())
        } else {
            EqInvError::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn load_model(path: &Path) -> Result<Model> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(EqInvError::Format(format!("bad magic {magic:?}, expected \"EQCK\"")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(EqInvError::Format(format!("unsupported version {version}, expected {VERSION}")));
    }

    let input_dim = read_u32(&mut r)? as usize;
    let hidden_count = read_u32(&mut r)? as usize;
    let mut encoder_hidden = Vec::with_capacity(hidden_count);
    for _ in 0..hidden_count {
        encoder_hidden.push(read_u32(&mut r)? as usize);
    }
    let feature_dim = read_u32(&mut r)? as usize;
    let proj_hidden = read_u32(&mut r)? as usize;
    let proj_dim = read_u32(&mut r)? as usize;
    let num_classes = read_u32(&mut r)? as usize;
    let mut flag = [0u8; 1];
    read_exact(&mut r, &mut flag)?;
    let config = ModelConfig {
        input_dim,
        encoder_hidden,
        feature_dim,
        proj_hidden,
        proj_dim,
        num_classes,
        weight_norm: flag[0] != 0,
    };

    let model = Model::init(config, 0)?;
    let mut expected = model.named_params();

    let block_count = read_u32(&mut r)? as usize;
    if block_count != expected.len() {
        return Err(EqInvError::Format(format!(
            "checkpoint has {block_count} parameter blocks, model needs {}",
            expected.len()
        )));
    }
    for (want_name, param) in expected.drain(..) {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| EqInvError::Format("non-utf8 parameter name".into()))?;
        if name != want_name {
            return Err(EqInvError::Format(format!(
                "parameter block {name:?} where {want_name:?} was expected"
            )));
        }
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        if shape != param.shape() {
            return Err(EqInvError::Format(format!(
                "parameter {name:?} has shape {shape:?}, model needs {:?}",
                param.shape()
            )));
        }
        let mut bytes = vec![0u8; param.numel() * 8];
        read_exact(&mut r, &mut bytes)?;
        param.with_data_mut(|data| {
            for (v, b) in data.iter_mut().zip(bytes.chunks_exact(8)) {
                *v = f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]);
            }
        });
    }
    Ok(model)
}
