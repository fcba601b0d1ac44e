// SPDX-License-Identifier: Apache-2.0
//! Tensor files.
//!
//! Binary: little-endian `u32` rank, `u64` per dimension, then the `f64`
//! payload in row-major order. Text: a `shape d0 d1 ...` line followed by
//! whitespace-separated values (`inf`, `-inf` and `nan` allowed); the writer
//! puts one innermost row per line.

use std::io::{Read, Write};

use thiserror::Error;

use super::TensorValue;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed tensor file: {0}")]
    Format(String),
}

pub fn write_binary(t: &TensorValue, w: &mut impl Write) -> Result<(), IoError> {
    w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
    for d in &t.shape {
        w.write_all(&(*d as u64).to_le_bytes())?;
    }
    for v in &t.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_binary(r: &mut impl Read) -> Result<TensorValue, IoError> {
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let rank = u32::from_le_bytes(b4) as usize;
    if rank > 16 {
        return Err(IoError::Format(format!("rank {rank}")));
    }
    let mut b8 = [0u8; 8];
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut b8)?;
        shape.push(u64::from_le_bytes(b8) as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut b8)?;
        data.push(f64::from_le_bytes(b8));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(IoError::Format(format!("{} trailing bytes", rest.len())));
    }
    Ok(TensorValue { shape, data })
}

pub fn write_text(t: &TensorValue) -> String {
    let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
    let mut out = format!("shape {}\n", dims.join(" "));
    let row = t.shape.last().copied().unwrap_or(1).max(1);
    for chunk in t.data.chunks(row) {
        let vals: Vec<String> = chunk.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&vals.join(" "));
        out.push('\n');
    }
    out
}

pub fn read_text(src: &str) -> Result<TensorValue, IoError> {
    let mut words = src.split_whitespace();
    if words.next() != Some("shape") {
        return Err(IoError::Format("expected `shape` header".into()));
    }
    let header = src.lines().next().unwrap_or_default();
    let rank = header.split_whitespace().count() - 1;
    let shape = (0..rank)
        .map(|_| words.next().unwrap().parse::<usize>().map_err(|e| IoError::Format(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let data = words
        .map(|w| w.parse::<f64>().map_err(|_| IoError::Format(format!("bad value `{w}`"))))
        .collect::<Result<Vec<_>, _>>()?;
    let n: usize = shape.iter().product();
    if data.len() != n {
        return Err(IoError::Format(format!("{} values for shape {shape:?}", data.len())));
    }
    Ok(TensorValue { shape, data })
}
