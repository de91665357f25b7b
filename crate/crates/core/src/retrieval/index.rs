//! Immutable vector index and its binary file format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MELX1" | dim: u32 | count: u32 | model_tag: u32 len + utf8
//!         | count × (u32 len + utf8 id) | count × dim × f32
//! ```

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use super::RetrievalError;
use crate::gateway::Embedding;
use crate::kb::tmp_path;

pub const MAGIC: &[u8; 5] = b"MELX1";

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
    model_tag: String,
    positions: HashMap<String, usize>,
}

/// L2-normalizes `v` in f64, returning the f32 row.
pub fn normalize(v: &[f32]) -> Result<Vec<f32>, RetrievalError> {
    let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if !norm.is_finite() || norm == 0.0 {
        return Err(RetrievalError::ZeroVector);
    }
    Ok(v.iter().map(|&x| (x as f64 / norm) as f32).collect())
}

impl VectorIndex {
    /// Builds an index from raw embeddings; rows are normalized here.
    pub fn from_embeddings(
        ids: Vec<String>,
        rows: &[Embedding],
        model_tag: impl Into<String>,
    ) -> Result<Self, RetrievalError> {
        if ids.len() != rows.len() {
            return Err(RetrievalError::Corrupt(format!("{} ids for {} rows", ids.len(), rows.len())));
        }
        let dim = rows.first().map(|r| r.dim()).ok_or(RetrievalError::EmptyIndex)?;
        let mut data = Vec::with_capacity(dim * rows.len());
        for r in rows {
            if r.dim() != dim {
                return Err(RetrievalError::DimMismatch { expected: dim, got: r.dim() });
            }
            data.extend(normalize(r.values())?);
        }
        Self::from_parts(dim, ids, data, model_tag.into())
    }

    /// Takes rows as they are; used when reading a file, whose rows were
    /// normalized at build time.
    fn from_parts(dim: usize, ids: Vec<String>, data: Vec<f32>, model_tag: String) -> Result<Self, RetrievalError> {
        if dim == 0 {
            return Err(RetrievalError::Corrupt("dim is zero".into()));
        }
        if ids.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        if data.len() != dim * ids.len() {
            return Err(RetrievalError::Corrupt(format!(
                "{} floats for {} rows of dim {dim}",
                data.len(),
                ids.len()
            )));
        }
        let mut positions = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if positions.insert(id.clone(), i).is_some() {
                return Err(RetrievalError::DuplicateId(id.clone()));
            }
        }
        Ok(VectorIndex { dim, ids, data, model_tag, positions })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn model_tag(&self) -> &str {
        &self.model_tag
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.positions.get(id).copied()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.data.len() * 4 + self.ids.len() * 16);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u32).to_le_bytes());
        put_str(&mut out, &self.model_tag);
        for id in &self.ids {
            put_str(&mut out, id);
        }
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RetrievalError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(RetrievalError::BadMagic);
        }
        let mut r = Reader { bytes, pos: MAGIC.len() };
        let dim = r.u32()? as usize;
        let count = r.u32()? as usize;
        let model_tag = r.string()?;
        let mut ids = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            ids.push(r.string()?);
        }
        let floats = dim
            .checked_mul(count)
            .ok_or_else(|| RetrievalError::Corrupt("row payload size overflows".into()))?;
        let payload = r.take(floats.checked_mul(4).ok_or_else(|| RetrievalError::Corrupt("row payload size overflows".into()))?)?;
        if r.pos != bytes.len() {
            return Err(RetrievalError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::from_parts(dim, ids, data, model_tag)
    }

    /// Writes atomically through a temp file.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), RetrievalError> {
        let path = path.as_ref();
        let tmp = tmp_path(path);
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, RetrievalError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], RetrievalError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| RetrievalError::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, RetrievalError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String, RetrievalError> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| RetrievalError::Corrupt("string is not utf-8".into()))
    }
}
