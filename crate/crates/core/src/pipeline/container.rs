//! Named-blob containers used for model and avatar files: `"MAVC"`, u16 version,
//! u64 header length, a JSON header, then the MAVT blobs back to back.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::blob::TensorBlob;
use super::FormatError;

pub const CONTAINER_MAGIC: [u8; 4] = *b"MAVC";
pub const CONTAINER_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    /// Byte offset from the start of the blob section.
    offset: u64,
    length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    blobs: Vec<BlobEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    blobs: Vec<(String, TensorBlob)>,
}

impl Container {
    pub fn new(kind: &str, meta: &impl Serialize) -> Result<Self, FormatError> {
        Ok(Self { kind: kind.to_string(), meta: serde_json::to_value(meta)?, blobs: Vec::new() })
    }

    pub fn push(&mut self, name: impl Into<String>, blob: TensorBlob) -> Result<(), FormatError> {
        let name = name.into();
        if self.blobs.iter().any(|(n, _)| *n == name) {
            return Err(FormatError::Invalid(format!("duplicate blob name {name:?}")));
        }
        self.blobs.push((name, blob));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&TensorBlob, FormatError> {
        self.blobs.iter().find(|(n, _)| n == name).map(|(_, b)| b).ok_or_else(|| FormatError::MissingBlob(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.blobs.iter().any(|(n, _)| n == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.blobs.iter().map(|(n, _)| n.as_str())
    }

    pub fn meta<T: DeserializeOwned>(&self) -> Result<T, FormatError> {
        Ok(serde_json::from_value(self.meta.clone())?)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), FormatError> {
        if self.kind != kind {
            return Err(FormatError::Invalid(format!("expected a {kind} file, found {:?}", self.kind)));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, FormatError> {
        let encoded: Vec<Vec<u8>> = self.blobs.iter().map(|(_, b)| b.to_bytes()).collect();
        let mut offset = 0u64;
        let entries = self
            .blobs
            .iter()
            .zip(&encoded)
            .map(|((name, _), bytes)| {
                let e = BlobEntry { name: name.clone(), offset, length: bytes.len() as u64 };
                offset += bytes.len() as u64;
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header { kind: self.kind.clone(), meta: self.meta.clone(), blobs: entries })?;
        let mut out = Vec::with_capacity(14 + header.len() + offset as usize);
        out.extend_from_slice(&CONTAINER_MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for b in encoded {
            out.extend_from_slice(&b);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let take = |at: usize, n: usize| bytes.get(at..at.saturating_add(n)).ok_or(FormatError::Truncated { needed: at.saturating_add(n), got: bytes.len() });
        if take(0, 4)? != CONTAINER_MAGIC {
            return Err(FormatError::BadMagic { expected: "MAVC" });
        }
        let version = u16::from_le_bytes(take(4, 2)?.try_into().unwrap());
        if version != CONTAINER_VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let header_len = usize::try_from(u64::from_le_bytes(take(6, 8)?.try_into().unwrap())).map_err(|_| FormatError::Overflow)?;
        let header: Header = serde_json::from_slice(take(14, header_len)?)?;
        let section = &bytes[14 + header_len..];
        let mut blobs = Vec::with_capacity(header.blobs.len());
        let mut expected_offset = 0u64;
        for e in &header.blobs {
            if e.offset != expected_offset {
                return Err(FormatError::Invalid(format!("blob {:?} at offset {}, expected {expected_offset}", e.name, e.offset)));
            }
            let start = usize::try_from(e.offset).map_err(|_| FormatError::Overflow)?;
            let len = usize::try_from(e.length).map_err(|_| FormatError::Overflow)?;
            let end = start.checked_add(len).ok_or(FormatError::Overflow)?;
            let raw = section.get(start..end).ok_or(FormatError::Truncated { needed: 14 + header_len + end, got: bytes.len() })?;
            blobs.push((e.name.clone(), TensorBlob::from_bytes(raw)?));
            expected_offset += e.length;
        }
        if expected_offset as usize != section.len() {
            return Err(FormatError::TrailingBytes(section.len() - expected_offset as usize));
        }
        Ok(Self { kind: header.kind, meta: header.meta, blobs })
    }

    pub fn write_file(&self, path: &Path) -> Result<(), FormatError> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self, FormatError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
