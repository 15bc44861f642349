//! Dataset file format.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "EQIV" | u32 version=1 | u32 C | u32 N | u32 H | u32 W | f64 bias | u64 seed
//! f32 images (N*3*H*W) | i32 class labels (N) | i32 env labels (N) | u8 split tags (N)
//! ```
//!
//! Round trips are bit-exact: images are stored at the same f32 precision
//! they are generated at.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use super::{BiasedDataset, Split};
use crate::error::{EqInvError, Result};

const MAGIC: &[u8; 4] = b"EQIV";
const VERSION: u32 = 1;

/// Header fields, readable without touching the payload.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHeader {
    pub num_classes: usize,
    pub num_samples: usize,
    pub image_side: usize,
    pub bias_ratio: f64,
    pub seed: u64,
}

pub fn save(data: &BiasedDataset, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(data.num_classes as u32).to_le_bytes())?;
    w.write_all(&(data.len() as u32).to_le_bytes())?;
    w.write_all(&(data.image_side as u32).to_le_bytes())?;
    w.write_all(&(data.image_side as u32).to_le_bytes())?;
    w.write_all(&data.bias_ratio.to_le_bytes())?;
    w.write_all(&data.seed.to_le_bytes())?;
    for v in data.raw_images() {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in data.raw_labels() {
        w.write_all(&(*v as i32).to_le_bytes())?;
    }
    for v in data.raw_env() {
        w.write_all(&(*v as i32).to_le_bytes())?;
    }
    for v in data.raw_splits() {
        w.write_all(&[v.tag()])?;
    }
    w.flush()?;
    Ok(())
}

/// Read errors during a structured load mean the file ends early.
fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == ErrorKind::UnexpectedEof {
            EqInvError::Format("dataset file is truncated".into())
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

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_header(r: &mut impl Read) -> Result<DatasetHeader> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic)?;
    if &magic != MAGIC {
        return Err(EqInvError::Format(format!("bad magic {magic:?}, expected \"EQIV\"")));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(EqInvError::Format(format!("unsupported version {version}, expected {VERSION}")));
    }
    let num_classes = read_u32(r)? as usize;
    let num_samples = read_u32(r)? as usize;
    let h = read_u32(r)? as usize;
    let w = read_u32(r)? as usize;
    if h != w {
        return Err(EqInvError::Format(format!("non-square image {h}x{w} unsupported")));
    }
    let bias_ratio = read_f64(r)?;
    let seed = read_u64(r)?;
    Ok(DatasetHeader { num_classes, num_samples, image_side: h, bias_ratio, seed })
}

/// Header without the payload.
pub fn inspect(path: &Path) -> Result<DatasetHeader> {
    let mut r = BufReader::new(File::open(path)?);
    read_header(&mut r)
}

pub fn load(path: &Path) -> Result<BiasedDataset> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header(&mut r)?;
    let n = header.num_samples;
    let floats = n * 3 * header.image_side * header.image_side;

    let mut image_bytes = vec![0u8; floats * 4];
    read_exact(&mut r, &mut image_bytes)?;
    let images: Vec<f32> = image_bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();

    let mut read_labels = |what: &str| -> Result<Vec<usize>> {
        let mut bytes = vec![0u8; n * 4];
        read_exact(&mut r, &mut bytes)?;
        bytes
            .chunks_exact(4)
            .map(|b| {
                let v = i32::from_le_bytes([b[0], b[1], b[2], b[3]]);
                usize::try_from(v)
                    .ok()
                    .filter(|v| *v < header.num_classes)
                    .ok_or_else(|| EqInvError::Format(format!("{what} label {v} out of range")))
            })
            .collect()
    };
    let labels = read_labels("class")?;
    let env = read_labels("environment")?;

    let mut tag_bytes = vec![0u8; n];
    read_exact(&mut r, &mut tag_bytes)?;
    let splits = tag_bytes.into_iter().map(Split::from_tag).collect::<Result<Vec<_>>>()?;

    BiasedDataset::from_parts(
        header.num_classes,
        header.image_side,
        header.bias_ratio,
        header.seed,
        images,
        labels,
        env,
        splits,
    )
}

/// FNV-1a fingerprint of a file's bytes; identifies dataset files in run
/// manifests. Content fingerprint only, not a cryptographic hash.
pub fn file_hash(path: &Path) -> Result<u64> {
    let mut r = BufReader::new(File::open(path)?);
    let mut hash = 0xcbf2_9ce4_8422_2325_u64;
    let mut buf = [0u8; 8192];
    loop {
        let n = r.read(&mut buf)?;
        if n == 0 {
            break;
        }
        for b in &buf[..n] {
            hash ^= u64::from(*b);
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    Ok(hash)
}
