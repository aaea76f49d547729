//! Checkpoint container.
//!
//! Layout: the header line `GRAFTCKPT-1`, one JSON manifest line
//! (name, shape, dtype, frozen flag, mask presence per entry), then raw
//! little-endian f64 payloads in manifest order. Entries with a mask carry
//! a second payload of 0.0/1.0 values directly after their data.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::param::Parameter;

pub const MAGIC: &str = "GRAFTCKPT-1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    frozen: bool,
    has_mask: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    entries: Vec<ManifestEntry>,
}

/// One named tensor in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CkptEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
    pub data: Vec<f64>,
    pub mask: Option<Vec<u8>>,
}

impl CkptEntry {
    pub fn from_parameter(p: &Parameter) -> Self {
        CkptEntry {
            name: p.name().to_string(),
            shape: p.shape(),
            frozen: p.frozen(),
            data: p.tensor().data_vec(),
            mask: p.mask(),
        }
    }

    /// A plain (non-trainable) buffer such as batch-norm running stats.
    pub fn buffer(name: impl Into<String>, data: Vec<f64>) -> Self {
        let shape = vec![data.len()];
        CkptEntry {
            name: name.into(),
            shape,
            frozen: true,
            data,
            mask: None,
        }
    }

    /// Writes data, frozen flag and mask back into a live parameter.
    pub fn apply_to(&self, p: &Parameter) -> Result<()> {
        if p.shape() != self.shape {
            return Err(Error::Checkpoint(format!(
                "entry {}: shape {:?} does not match parameter shape {:?}",
                self.name,
                self.shape,
                p.shape()
            )));
        }
        p.tensor().set_data(self.data.clone());
        p.set_frozen(self.frozen);
        match &self.mask {
            Some(m) => p.set_mask(m.clone()),
            None => p.clear_mask(),
        }
        Ok(())
    }
}

pub fn save(path: &Path, entries: &[CkptEntry]) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{MAGIC}")?;
    let manifest = Manifest {
        entries: entries
            .iter()
            .map(|e| ManifestEntry {
                name: e.name.clone(),
                shape: e.shape.clone(),
                dtype: "f64".to_string(),
                frozen: e.frozen,
                has_mask: e.mask.is_some(),
            })
            .collect(),
    };
    let line = serde_json::to_string(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest encode: {e}")))?;
    writeln!(w, "{line}")?;
    for e in entries {
        let numel: usize = e.shape.iter().product();
        if numel != e.data.len() {
            return Err(Error::Checkpoint(format!(
                "entry {}: shape/{:?} data length {} mismatch",
                e.name,
                e.shape,
                e.data.len()
            )));
        }
        for v in &e.data {
            w.write_all(&v.to_le_bytes())?;
        }
        if let Some(mask) = &e.mask {
            for &m in mask {
                w.write_all(&(m as f64).to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<CkptEntry>> {
    let file = File::open(path)
        .map_err(|e| Error::Checkpoint(format!("open {}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let mut header = String::new();
    r.read_line(&mut header)?;
    if header.trim_end() != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad header {:?}, expected {MAGIC}",
            path.display(),
            header.trim_end()
        )));
    }
    let mut manifest_line = String::new();
    r.read_line(&mut manifest_line)?;
    let manifest: Manifest = serde_json::from_str(&manifest_line)
        .map_err(|e| Error::Checkpoint(format!("manifest decode: {e}")))?;

    let mut entries = Vec::with_capacity(manifest.entries.len());
    for me in manifest.entries {
        if me.dtype != "f64" {
            return Err(Error::Checkpoint(format!(
                "entry {}: unsupported dtype {}",
                me.name, me.dtype
            )));
        }
        let numel: usize = me.shape.iter().product();
        let data = read_f64s(&mut r, numel, &me.name)?;
        let mask = if me.has_mask {
            let raw = read_f64s(&mut r, numel, &me.name)?;
            Some(raw.iter().map(|&v| if v != 0.0 { 1u8 } else { 0u8 }).collect())
        } else {
            None
        };
        entries.push(CkptEntry {
            name: me.name,
            shape: me.shape,
            frozen: me.frozen,
            data,
            mask,
        });
    }
    Ok(entries)
}

fn read_f64s(r: &mut impl Read, n: usize, name: &str) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("entry {name}: payload truncated: {e}")))?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}
