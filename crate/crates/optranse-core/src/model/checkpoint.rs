//! Binary checkpoint format.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "OPTM" | u32 version | u32 dim | u32 entity_count
//! u32 relation_slot_count | u8 norm (0 = L1, 1 = L2) | u64 epoch
//! entity vectors   entity_count * dim f64, in id order
//! relation vectors relation_slot_count * dim f64
//! W1 matrices      relation_slot_count * dim * dim f64, row-major
//! W2 matrices      same
//! ```
//!
//! A plain-text sidecar `<checkpoint>.meta` echoes the configuration and the
//! vocabulary/graph fingerprints for reproducibility audits.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};

use crate::error::Error;
use crate::kg::KnowledgeGraph;
use crate::Result;

use super::{ModelParams, Norm};

const MAGIC: &[u8; 4] = b"OPTM";
const VERSION: u32 = 1;

pub fn write_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    encode(params, &mut buf).map_err(|e| Error::io(path, e))?;
    fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cursor = io::Cursor::new(bytes.as_slice());
    decode(&mut cursor).map_err(|message| Error::Format {
        path: path.to_owned(),
        message,
    })
}

/// Writes the text sidecar next to a checkpoint.
pub fn write_meta(
    checkpoint_path: &Path,
    params: &ModelParams,
    graph: &KnowledgeGraph,
    extra: &[(String, String)],
) -> Result<PathBuf> {
    let meta_path = sidecar_path(checkpoint_path);
    let mut text = String::new();
    text.push_str("format = OPTM v1\n");
    text.push_str(&format!("dim = {}\n", params.dim));
    text.push_str(&format!("norm = {}\n", params.norm));
    text.push_str(&format!("entity_count = {}\n", params.entity_count()));
    text.push_str(&format!(
        "relation_slot_count = {}\n",
        params.relation_slot_count()
    ));
    text.push_str(&format!("epoch = {}\n", params.epoch));
    text.push_str(&format!(
        "graph_fingerprint = {:#018x}\n",
        graph.fingerprint()
    ));
    text.push_str(&format!(
        "vocab_fingerprint = {:#018x}\n",
        graph.vocab_fingerprint()
    ));
    for (k, v) in extra {
        text.push_str(&format!("{k} = {v}\n"));
    }
    fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;
    Ok(meta_path)
}

pub fn sidecar_path(checkpoint_path: &Path) -> PathBuf {
    let mut os = checkpoint_path.as_os_str().to_owned();
    os.push(".meta");
    PathBuf::from(os)
}

fn encode<W: Write>(params: &ModelParams, w: &mut W) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.dim as u32).to_le_bytes())?;
    w.write_all(&(params.entity_count() as u32).to_le_bytes())?;
    w.write_all(&(params.relation_slot_count() as u32).to_le_bytes())?;
    w.write_all(&[match params.norm {
        Norm::L1 => 0u8,
        Norm::L2 => 1u8,
    }])?;
    w.write_all(&params.epoch.to_le_bytes())?;
    for v in params.entities.iter().chain(params.relations.iter()) {
        for x in v.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    for m in params.w1.iter().chain(params.w2.iter()) {
        for i in 0..params.dim {
            for j in 0..params.dim {
                w.write_all(&m[(i, j)].to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn decode<R: Read>(r: &mut R) -> std::result::Result<ModelParams, String> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(eof)?;
    if &magic != MAGIC {
        return Err("bad magic bytes (not a checkpoint)".into());
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let dim = read_u32(r)? as usize;
    let entity_count = read_u32(r)? as usize;
    let relation_slots = read_u32(r)? as usize;
    let norm = match read_u8(r)? {
        0 => Norm::L1,
        1 => Norm::L2,
        other => return Err(format!("bad norm tag {other}")),
    };
    let epoch = read_u64(r)?;

    let read_vec = |r: &mut R| -> std::result::Result<DVector<f64>, String> {
        let mut v = DVector::zeros(dim);
        for i in 0..dim {
            v[i] = read_f64(r)?;
        }
        Ok(v)
    };
    let entities: std::result::Result<Vec<_>, _> = (0..entity_count).map(|_| read_vec(r)).collect();
    let relations: std::result::Result<Vec<_>, _> =
        (0..relation_slots).map(|_| read_vec(r)).collect();

    let read_mat = |r: &mut R| -> std::result::Result<DMatrix<f64>, String> {
        let mut m = DMatrix::zeros(dim, dim);
        for i in 0..dim {
            for j in 0..dim {
                m[(i, j)] = read_f64(r)?;
            }
        }
        Ok(m)
    };
    let entities = entities?;
    let relations = relations?;
    let w1: std::result::Result<Vec<_>, _> = (0..relation_slots).map(|_| read_mat(r)).collect();
    let w1 = w1?;
    let w2: std::result::Result<Vec<_>, _> = (0..relation_slots).map(|_| read_mat(r)).collect();
    let w2 = w2?;

    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(eof)?;
    if !rest.is_empty() {
        return Err(format!("{} trailing bytes after parameters", rest.len()));
    }

    Ok(ModelParams {
        dim,
        norm,
        entities,
        relations,
        w1,
        w2,
        epoch,
    })
}

fn eof(_: io::Error) -> String {
    "unexpected end of file".into()
}

fn read_u8<R: Read>(r: &mut R) -> std::result::Result<u8, String> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b).map_err(eof)?;
    Ok(b[0])
}

fn read_u32<R: Read>(r: &mut R) -> std::result::Result<u32, String> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(eof)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::result::Result<u64, String> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(eof)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> std::result::Result<f64, String> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(eof)?;
    Ok(f64::from_le_bytes(b))
}
