//! Parameter checkpoint codec.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "GTLP"                       magic
//! u32                          version (1)
//! u32 × 6                      dims: input, concept, disturbance, hidden, domains, classes
//! u32                          group count
//! per group:
//!   u16 + bytes                group name
//!   u8                         frozen flag
//!   u32                        tensor count
//!   per tensor:
//!     u16 + bytes              tensor name
//!     u8                       rank (1 or 2)
//!     u32 × rank               dims
//!     f64 × Π dims             values
//! ```
//!
//! A tensor is a learnable parameter unless its name ends in
//! `.running_mean`/`.running_var` (batch-norm buffers) or is
//! `classifier.labels` (dataset label of each classifier output, stored as
//! exact f64 integers).

use std::fs;
use std::path::Path;

use super::params::{GtlParams, ModelDims};
use crate::binio::ByteReader;
use crate::error::{GtlError, Result};
use crate::numerics::{Matrix, Param, ParamGroup};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GTLP";
pub const CHECKPOINT_VERSION: u32 = 1;
const LABELS_TENSOR: &str = "classifier.labels";

fn put_name(out: &mut Vec<u8>, name: &str) -> Result<()> {
    let len = u16::try_from(name.len())
        .map_err(|_| GtlError::Validation(format!("name too long: {name}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    Ok(())
}

fn put_tensor(out: &mut Vec<u8>, name: &str, m: &Matrix) -> Result<()> {
    put_name(out, name)?;
    out.push(2);
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn encode_checkpoint(params: &GtlParams) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for (_, v) in params.dims.named() {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let groups = params.groups();
    out.extend_from_slice(&(groups.len() as u32).to_le_bytes());
    for g in groups {
        put_name(&mut out, &g.name)?;
        out.push(u8::from(g.frozen));
        let is_cls = g.name == super::params::CLASSIFIER;
        let count = g.params.len() + g.buffers.len() + usize::from(is_cls);
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for p in &g.params {
            put_tensor(&mut out, &p.name, &p.value)?;
        }
        for (name, b) in &g.buffers {
            put_tensor(&mut out, name, b)?;
        }
        if is_cls {
            let labels = Matrix::row_vector(params.class_labels.iter().map(|&l| f64::from(l)).collect());
            put_tensor(&mut out, LABELS_TENSOR, &labels)?;
        }
    }
    Ok(out)
}

fn read_name(r: &mut ByteReader<'_>, what: &str) -> Result<String> {
    let len = r.u16(what)? as usize;
    let bytes = r.take(len, what)?;
    match std::str::from_utf8(bytes) {
        Ok(s) => Ok(s.to_owned()),
        Err(_) => r.fail(format!("{what} is not valid UTF-8")),
    }
}

fn read_tensor(r: &mut ByteReader<'_>) -> Result<(String, Matrix)> {
    let name = read_name(r, "tensor name")?;
    let rank = r.u8("tensor rank")?;
    let (rows, cols) = match rank {
        1 => (1, r.u32("tensor dim")? as usize),
        2 => {
            let a = r.u32("tensor dim")? as usize;
            (a, r.u32("tensor dim")? as usize)
        }
        other => return r.fail(format!("unsupported rank {other} for {name}")),
    };
    let n = rows
        .checked_mul(cols)
        .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()));
    let Some(n) = n else {
        return r.fail(format!("truncated: tensor {name} ({rows}x{cols}) exceeds remaining bytes"));
    };
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(r.f64("tensor values")?);
    }
    Ok((name, Matrix::from_vec(rows, cols, data)?))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<GtlParams> {
    let mut r = ByteReader::new(bytes);
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(GtlError::Format {
            offset: 0,
            detail: "bad magic, expected GTLP".into(),
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(GtlError::Format {
            offset: 4,
            detail: format!("unsupported checkpoint version {version}"),
        });
    }
    let mut dimv = [0usize; 6];
    for v in &mut dimv {
        *v = r.u32("model dims")? as usize;
    }
    let dims = ModelDims {
        input: dimv[0],
        concept: dimv[1],
        disturbance: dimv[2],
        hidden: dimv[3],
        domains: dimv[4],
        classes: dimv[5],
    };
    let group_count = r.u32("group count")?;
    let mut groups = Vec::new();
    let mut labels: Option<Vec<u32>> = None;
    for _ in 0..group_count {
        let name = read_name(&mut r, "group name")?;
        let frozen = match r.u8("frozen flag")? {
            0 => false,
            1 => true,
            other => return r.fail(format!("frozen flag {other}")),
        };
        let mut g = ParamGroup::new(name);
        g.frozen = frozen;
        let count = r.u32("tensor count")?;
        for _ in 0..count {
            let at = r.offset();
            let (tname, m) = read_tensor(&mut r)?;
            if tname == LABELS_TENSOR {
                let mut ls = Vec::with_capacity(m.len());
                for &v in m.as_slice() {
                    if v < 0.0 || v.fract() != 0.0 || v > f64::from(u32::MAX) {
                        return Err(GtlError::Format {
                            offset: at,
                            detail: format!("class label {v} is not a u32"),
                        });
                    }
                    ls.push(v as u32);
                }
                labels = Some(ls);
            } else if tname.ends_with(".running_mean") || tname.ends_with(".running_var") {
                g.buffers.push((tname, m));
            } else {
                g.params.push(Param::new(tname, m));
            }
        }
        groups.push(g);
    }
    r.expect_end()?;
    let labels = labels.ok_or_else(|| GtlError::Format {
        offset: r.offset(),
        detail: "missing classifier.labels tensor".into(),
    })?;
    GtlParams::from_groups(dims, labels, groups)
}

pub fn save_checkpoint(params: &GtlParams, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(params)?).map_err(GtlError::file(path))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<GtlParams> {
    decode_checkpoint(&fs::read(path).map_err(GtlError::file(path))?)
}
