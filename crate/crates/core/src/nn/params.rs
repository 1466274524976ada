use std::collections::BTreeMap;

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::error::{PainterError, Result};

const MAGIC: &[u8; 8] = b"PNTRPRM1";

/// Named 2-D parameter tensors in a stable (sorted) order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Array2<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| PainterError::shape(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Array2::zeros(v.raw_dim())))
                .collect(),
        }
    }

    /// Accumulate `alpha * other` into matching tensors; names absent here are an error.
    pub fn add_scaled(&mut self, other: &ParamStore, alpha: f64) -> Result<()> {
        for (k, g) in &other.tensors {
            let t = self
                .tensors
                .get_mut(k)
                .ok_or_else(|| PainterError::shape(format!("unknown parameter `{k}`")))?;
            if t.dim() != g.dim() {
                return Err(PainterError::shape(format!("parameter `{k}` shape mismatch")));
            }
            t.scaled_add(alpha, g);
        }
        Ok(())
    }

    /// Add into `name`, creating a zero tensor of the right shape on first use.
    pub fn accumulate(&mut self, name: &str, g: &Array2<f64>) {
        match self.tensors.get_mut(name) {
            Some(t) => *t += g,
            None => {
                self.tensors.insert(name.to_owned(), g.clone());
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors
            .values()
            .flat_map(|t| t.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Shapes by name, for structural comparisons.
    pub fn shapes(&self) -> BTreeMap<String, (usize, usize)> {
        self.tensors.iter().map(|(k, v)| (k.clone(), v.dim())).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.numel() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.nrows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.ncols() as u32).to_le_bytes());
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Reader { bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(PainterError::schema(None, "parameter archive has a bad magic header"));
        }
        let n = cur.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| PainterError::schema(None, "parameter name is not UTF-8"))?
                .to_owned();
            let rows = cur.u32()? as usize;
            let cols = cur.u32()? as usize;
            let raw = cur.take(rows * cols * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Array2::from_shape_vec((rows, cols), data).map_err(|e| PainterError::schema(None, e.to_string()))?;
            store.insert(name, t);
        }
        if cur.pos != bytes.len() {
            return Err(PainterError::schema(None, "trailing bytes in parameter archive"));
        }
        Ok(store)
    }

    /// SHA-256 of the serialized archive, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| PainterError::schema(None, "truncated parameter archive"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parameters that training must never touch. Only shared access is exposed.
#[derive(Debug, Clone, PartialEq)]
pub struct Frozen(ParamStore);

impl Frozen {
    pub fn new(params: ParamStore) -> Self {
        Self(params)
    }

    pub fn params(&self) -> &ParamStore {
        &self.0
    }

    pub fn digest(&self) -> String {
        self.0.digest()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_round_trip_is_byte_exact() {
        let mut p = ParamStore::new();
        p.insert("b", Array2::from_shape_fn((2, 3), |(i, j)| i as f64 - j as f64 * 0.1));
        p.insert("a", Array2::from_elem((1, 1), f64::MIN_POSITIVE));
        let bytes = p.to_bytes();
        let q = ParamStore::from_bytes(&bytes).unwrap();
        assert_eq!(p, q);
        assert_eq!(q.to_bytes(), bytes);
        assert!(ParamStore::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
