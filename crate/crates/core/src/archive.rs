//! Framing shared by dataset archives and checkpoints: a magic line, a
//! length-prefixed JSON header, and a blob of little-endian `f32` values
//! whose SHA-256 is recorded in the header.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Location of one tensor inside the blob, in `f32` elements.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub key: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Envelope<H> {
    blob_sha256: String,
    blob_len: usize,
    tensors: Vec<TensorEntry>,
    header: H,
}

/// Accumulates named tensors for writing.
#[derive(Debug, Default)]
pub struct BlobWriter {
    entries: Vec<TensorEntry>,
    data: Vec<f32>,
}

impl BlobWriter {
    pub fn push(&mut self, key: impl Into<String>, shape: &[usize], values: impl IntoIterator<Item = f32>) {
        let offset = self.data.len();
        self.data.extend(values);
        let entry = TensorEntry {
            key: key.into(),
            shape: shape.to_vec(),
            offset,
        };
        assert_eq!(self.data.len() - offset, entry.len(), "tensor {} has wrong length", entry.key);
        self.entries.push(entry);
    }

    pub fn write<H: Serialize>(self, path: &Path, magic: &str, header: &H) -> Result<()> {
        let mut blob = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        let envelope = Envelope {
            blob_sha256: hex::encode(Sha256::digest(&blob)),
            blob_len: self.data.len(),
            tensors: self.entries,
            header,
        };
        let json = serde_json::to_vec_pretty(&envelope)?;
        let mut out = Vec::with_capacity(magic.len() + 9 + json.len() + blob.len());
        out.extend_from_slice(magic.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        // Write-then-rename so a crash never leaves a truncated archive behind.
        let tmp = path.with_extension("partial");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&out)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }
}

/// A fully validated archive held in memory.
#[derive(Debug)]
pub struct BlobReader<H> {
    pub header: H,
    entries: Vec<TensorEntry>,
    data: Vec<f32>,
}

impl<H: DeserializeOwned> BlobReader<H> {
    pub fn read(path: &Path, magic: &str) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let corrupt = |reason: &str| Error::Corrupt {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let prefix = format!("{magic}\n");
        let rest = bytes
            .strip_prefix(prefix.as_bytes())
            .ok_or_else(|| corrupt("bad magic line"))?;
        if rest.len() < 8 {
            return Err(corrupt("truncated header length"));
        }
        let header_len = u64::from_le_bytes(rest[..8].try_into().unwrap()) as usize;
        let rest = &rest[8..];
        if rest.len() < header_len {
            return Err(corrupt("truncated header"));
        }
        let envelope: Envelope<H> =
            serde_json::from_slice(&rest[..header_len]).map_err(|e| corrupt(&format!("header: {e}")))?;
        let blob = &rest[header_len..];
        if blob.len() != envelope.blob_len * 4 {
            return Err(corrupt(&format!(
                "blob has {} bytes, header says {}",
                blob.len(),
                envelope.blob_len * 4
            )));
        }
        if hex::encode(Sha256::digest(blob)) != envelope.blob_sha256 {
            return Err(corrupt("blob checksum mismatch"));
        }
        for e in &envelope.tensors {
            if e.offset + e.len() > envelope.blob_len {
                return Err(corrupt(&format!("tensor {} extends past the blob", e.key)));
            }
        }
        let data = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(BlobReader {
            header: envelope.header,
            entries: envelope.tensors,
            data,
        })
    }
}

impl<H> BlobReader<H> {
    pub fn entries(&self) -> &[TensorEntry] {
        &self.entries
    }

    pub fn get(&self, key: &str) -> Option<(&[usize], &[f32])> {
        let e = self.entries.iter().find(|e| e.key == key)?;
        Some((&e.shape, &self.data[e.offset..e.offset + e.len()]))
    }
}
