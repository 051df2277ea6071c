use std::collections::HashMap;
use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::pairs::SegmentRef;
use crate::seed::fnv1a64;

pub const STORE_MAGIC: &[u8; 4] = b"GAEE";
pub const STORE_VERSION: u32 = 1;

/// Dense vectors addressed by segment, stored row-major as f32.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    ids: Vec<SegmentRef>,
    index: HashMap<SegmentRef, usize>,
    data: Vec<f32>,
    sealed: bool,
}

#[derive(Serialize, Deserialize)]
struct IdLine {
    row: usize,
    id_hash: u64,
    segment: SegmentRef,
}

pub fn id_hash(seg: &SegmentRef) -> u64 {
    fnv1a64(seg.key().as_bytes())
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ids: Vec::new(),
            index: HashMap::new(),
            data: Vec::new(),
            sealed: false,
        }
    }

    pub fn push(&mut self, id: SegmentRef, vector: &[f64]) -> Result<usize, EvalError> {
        if self.sealed {
            return Err(EvalError::Sealed);
        }
        if vector.len() != self.dim {
            return Err(EvalError::Dimension {
                expected: self.dim,
                found: vector.len(),
            });
        }
        if self.index.contains_key(&id) {
            return Err(EvalError::DuplicateId(id));
        }
        let row = self.ids.len();
        self.index.insert(id.clone(), row);
        self.ids.push(id);
        self.data.extend(vector.iter().map(|&x| x as f32));
        Ok(row)
    }

    /// Freezes the store; later pushes fail.
    pub fn seal(mut self) -> Self {
        self.sealed = true;
        self
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed
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

    pub fn row(&self, k: usize) -> &[f32] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn id(&self, k: usize) -> &SegmentRef {
        &self.ids[k]
    }

    pub fn ids(&self) -> &[SegmentRef] {
        &self.ids
    }

    pub fn lookup(&self, id: &SegmentRef) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Scales every vector by `c`.
    pub fn scaled(&self, c: f32) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|x| *x *= c);
        out
    }

    /// Writes the binary store and its JSONL id map.
    pub fn write<W: Write, I: Write>(&self, mut bin: W, mut ids: I) -> Result<(), EvalError> {
        bin.write_all(STORE_MAGIC)?;
        bin.write_all(&STORE_VERSION.to_le_bytes())?;
        bin.write_all(&(self.dim as u32).to_le_bytes())?;
        bin.write_all(&(self.len() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.len() * (8 + 4 * self.dim));
        for (k, id) in self.ids.iter().enumerate() {
            buf.extend_from_slice(&id_hash(id).to_le_bytes());
            for x in self.row(k) {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        bin.write_all(&buf)?;
        for (row, segment) in self.ids.iter().enumerate() {
            let line = IdLine {
                row,
                id_hash: id_hash(segment),
                segment: segment.clone(),
            };
            writeln!(ids, "{}", serde_json::to_string(&line).expect("id lines serialize"))?;
        }
        Ok(())
    }

    /// Reads a store written by [`EmbeddingStore::write`]; the result is sealed.
    pub fn read<R: Read, I: BufRead>(mut bin: R, ids: I) -> Result<Self, EvalError> {
        let bad = |m: String| EvalError::Format(m);
        let mut header = [0u8; 20];
        bin.read_exact(&mut header).map_err(|_| bad("truncated header".into()))?;
        if &header[..4] != STORE_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != STORE_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let dim = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(header[12..20].try_into().unwrap()) as usize;

        let mut segments = Vec::with_capacity(count);
        for (n, line) in ids.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: IdLine =
                serde_json::from_str(&line).map_err(|e| bad(format!("id map line {}: {e}", n + 1)))?;
            if parsed.row != segments.len() {
                return Err(bad(format!("id map line {} has row {}", n + 1, parsed.row)));
            }
            segments.push((parsed.id_hash, parsed.segment));
        }
        if segments.len() != count {
            return Err(bad(format!("id map has {} rows, store has {count}", segments.len())));
        }

        let mut store = Self::new(dim);
        let mut row = vec![0u8; 8 + 4 * dim];
        for (hash, segment) in segments {
            bin.read_exact(&mut row).map_err(|_| bad("truncated rows".into()))?;
            let stored = u64::from_le_bytes(row[..8].try_into().unwrap());
            if stored != hash || stored != id_hash(&segment) {
                return Err(bad(format!("id hash mismatch for {segment}")));
            }
            let v: Vec<f64> = row[8..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            store.push(segment, &v)?;
        }
        let mut rest = Vec::new();
        bin.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(bad("trailing bytes after the last row".into()));
        }
        Ok(store.seal())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> EmbeddingStore {
        let mut s = EmbeddingStore::new(2);
        s.push(SegmentRef::state("a", 1), &[1.0, 0.0]).unwrap();
        s.push(SegmentRef::full("a", 3), &[0.25, -0.5]).unwrap();
        s
    }

    #[test]
    fn file_round_trip() {
        let s = store().seal();
        let (mut bin, mut ids) = (Vec::new(), Vec::new());
        s.write(&mut bin, &mut ids).unwrap();
        assert_eq!(&bin[..4], b"GAEE");
        assert_eq!(bin.len(), 20 + 2 * (8 + 8));
        let back = EmbeddingStore::read(bin.as_slice(), ids.as_slice()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn invariants() {
        let mut s = store();
        assert!(matches!(
            s.push(SegmentRef::state("a", 1), &[0.0, 0.0]),
            Err(EvalError::DuplicateId(_))
        ));
        assert!(matches!(
            s.push(SegmentRef::state("b", 1), &[0.0]),
            Err(EvalError::Dimension { .. })
        ));
        let mut sealed = s.seal();
        assert!(matches!(
            sealed.push(SegmentRef::state("c", 1), &[0.0, 0.0]),
            Err(EvalError::Sealed)
        ));
    }

    #[test]
    fn mismatched_id_map_rejected() {
        let s = store();
        let (mut bin, mut ids) = (Vec::new(), Vec::new());
        s.write(&mut bin, &mut ids).unwrap();
        let text = String::from_utf8(ids).unwrap().replace("\"a\",\"kind\":\"full\"", "\"z\",\"kind\":\"full\"");
        assert!(EmbeddingStore::read(bin.as_slice(), text.as_bytes()).is_err());
    }
}
