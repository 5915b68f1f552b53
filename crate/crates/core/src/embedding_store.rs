//! Labeled embedding collections and the EMBS binary interchange format.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! 0..4    magic "EMBS"
//! 4..8    version u32 (1 = plain set, 2 = support set with k_default)
//! 8..12   dim u32
//! 12..20  record count u64
//! 20..24  label block length L u32
//! L bytes UTF-8 label names joined by '\n'
//! [v2]    k_default u32
//! records label_id u32, then dim x f32
//! ```

use std::collections::{BTreeSet, HashMap};
use std::io::{self, BufReader, BufWriter, Read, Write};

use crate::error::{Error, Result};
use crate::rng;

pub const EMBS_MAGIC: [u8; 4] = *b"EMBS";
pub const EMBS_VERSION: u32 = 1;
pub const EMBS_SUPPORT_VERSION: u32 = 2;

/// Ordered, duplicate-free class names. A name's id is its position.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabelTable {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl LabelTable {
    pub fn new<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut table = LabelTable::default();
        for name in names {
            table.push(name.into())?;
        }
        Ok(table)
    }

    fn push(&mut self, name: String) -> Result<u32> {
        if name.is_empty() {
            return Err(Error::Validation("label names must be non-empty".into()));
        }
        if name.contains('\n') {
            return Err(Error::Validation(format!(
                "label name {name:?} contains a newline"
            )));
        }
        if self.index.contains_key(&name) {
            return Err(Error::Validation(format!("duplicate label name {name:?}")));
        }
        let id = self.names.len() as u32;
        self.index.insert(name.clone(), id);
        self.names.push(name);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    /// Resolves every name, failing on the first unknown one.
    pub fn ids_of<S: AsRef<str>>(&self, names: &[S]) -> Result<Vec<u32>> {
        names
            .iter()
            .map(|n| {
                self.id(n.as_ref())
                    .ok_or_else(|| Error::UnknownLabel(n.as_ref().to_string()))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub label_id: u32,
    pub vector: Vec<f32>,
}

/// An immutable collection of labeled `dim`-dimensional vectors.
///
/// Coordinates are held as `f32`, exactly as stored on disk; numeric code
/// widens to `f64` before doing arithmetic.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    labels: LabelTable,
    records: Vec<EmbeddingRecord>,
}

impl EmbeddingSet {
    pub fn new(dim: usize, labels: LabelTable, records: Vec<EmbeddingRecord>) -> Result<Self> {
        let set = EmbeddingSet {
            dim,
            labels,
            records,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn empty(dim: usize, labels: LabelTable) -> Result<Self> {
        Self::new(dim, labels, Vec::new())
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Validation("dim must be positive".into()));
        }
        if self.dim > u32::MAX as usize {
            return Err(Error::Validation("dim does not fit in u32".into()));
        }
        for (i, r) in self.records.iter().enumerate() {
            if r.vector.len() != self.dim {
                return Err(Error::Dimension {
                    expected: self.dim,
                    found: r.vector.len(),
                });
            }
            if r.label_id as usize >= self.labels.len() {
                return Err(Error::LabelOutOfRange {
                    record: i,
                    label_id: r.label_id,
                    labels: self.labels.len(),
                });
            }
            if let Some(c) = r.vector.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    record: i,
                    coord: c,
                });
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &LabelTable {
        &self.labels
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Record indices grouped by label id, each list in original order.
    pub fn indices_by_label(&self) -> Vec<Vec<usize>> {
        let mut by_label = vec![Vec::new(); self.labels.len()];
        for (i, r) in self.records.iter().enumerate() {
            by_label[r.label_id as usize].push(i);
        }
        by_label
    }

    /// Label ids that have at least one record, ascending.
    pub fn present_label_ids(&self) -> Vec<u32> {
        self.records
            .iter()
            .map(|r| r.label_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// New set holding the records at `indices`, in the given order, with the
    /// same label table.
    pub fn select(&self, indices: &[usize]) -> EmbeddingSet {
        EmbeddingSet {
            dim: self.dim,
            labels: self.labels.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    /// Records whose label is in `label_ids`, original order preserved.
    pub fn restrict_to(&self, label_ids: &[u32]) -> Result<EmbeddingSet> {
        let wanted = self.check_ids(label_ids)?;
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| wanted.contains(&self.records[i].label_id))
            .collect();
        Ok(self.select(&idx))
    }

    /// Keeps only the records of `label_ids` and compacts the label table to
    /// those names (original relative order). Returns the new set and the
    /// original indices of its records.
    pub fn subset_labels(&self, label_ids: &[u32]) -> Result<(EmbeddingSet, Vec<usize>)> {
        let wanted = self.check_ids(label_ids)?;
        let remap: HashMap<u32, u32> = wanted
            .iter()
            .enumerate()
            .map(|(new, &old)| (old, new as u32))
            .collect();
        let labels = LabelTable::new(wanted.iter().map(|&id| self.labels.names[id as usize].clone()))?;
        let mut idx = Vec::new();
        let mut records = Vec::new();
        for (i, r) in self.records.iter().enumerate() {
            if let Some(&new) = remap.get(&r.label_id) {
                idx.push(i);
                records.push(EmbeddingRecord {
                    label_id: new,
                    vector: r.vector.clone(),
                });
            }
        }
        Ok((
            EmbeddingSet {
                dim: self.dim,
                labels,
                records,
            },
            idx,
        ))
    }

    fn check_ids(&self, label_ids: &[u32]) -> Result<BTreeSet<u32>> {
        let mut out = BTreeSet::new();
        for &id in label_ids {
            if id as usize >= self.labels.len() {
                return Err(Error::UnknownLabel(format!("id {id}")));
            }
            out.insert(id);
        }
        Ok(out)
    }

    /// Row-major `len x dim` copy in `f64`.
    pub fn to_matrix(&self) -> ndarray::Array2<f64> {
        let mut m = ndarray::Array2::<f64>::zeros((self.len(), self.dim));
        for (mut row, r) in m.rows_mut().into_iter().zip(&self.records) {
            for (dst, &src) in row.iter_mut().zip(&r.vector) {
                *dst = src as f64;
            }
        }
        m
    }

    pub fn label_ids(&self) -> Vec<u32> {
        self.records.iter().map(|r| r.label_id).collect()
    }
}

/// Output of [`partition`]: the two subsets plus the original record indices
/// that went into each.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub selected: EmbeddingSet,
    pub remainder: EmbeddingSet,
    pub selected_idx: Vec<usize>,
    pub remainder_idx: Vec<usize>,
}

/// Samples up to `per_class_cap` records (all of them when `None`) of each
/// requested label without replacement.
///
/// Labels are visited in ascending id order and share one SplitMix64 stream
/// seeded with `seed`; within a label the candidates are the label's records
/// in original order, drawn by partial Fisher-Yates. Both outputs keep the
/// original record order.
pub fn partition(
    set: &EmbeddingSet,
    label_ids: &[u32],
    per_class_cap: Option<usize>,
    seed: u64,
) -> Result<Partition> {
    let wanted = set.check_ids(label_ids)?;
    let by_label = set.indices_by_label();
    let mut rng = rng::seeded(seed);
    let mut chosen = vec![false; set.len()];
    for &id in &wanted {
        let mut candidates = by_label[id as usize].clone();
        let take = per_class_cap.map_or(candidates.len(), |c| c.min(candidates.len()));
        rng::partial_shuffle(&mut rng, &mut candidates, take);
        for &i in &candidates[..take] {
            chosen[i] = true;
        }
    }
    let (selected_idx, remainder_idx): (Vec<usize>, Vec<usize>) =
        (0..set.len()).partition(|&i| chosen[i]);
    Ok(Partition {
        selected: set.select(&selected_idx),
        remainder: set.select(&remainder_idx),
        selected_idx,
        remainder_idx,
    })
}

/// Per-class holdout: `floor(count * fraction)` records of every label go
/// to `selected`, the rest to `remainder`. Same sampling scheme as
/// [`partition`].
pub fn stratified_split(set: &EmbeddingSet, fraction: f64, seed: u64) -> Result<Partition> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("holdout fraction {fraction} outside [0, 1]")));
    }
    let by_label = set.indices_by_label();
    let mut rng = rng::seeded(seed);
    let mut chosen = vec![false; set.len()];
    for candidates in by_label {
        let mut candidates = candidates;
        let take = (candidates.len() as f64 * fraction).floor() as usize;
        rng::partial_shuffle(&mut rng, &mut candidates, take);
        for &i in &candidates[..take] {
            chosen[i] = true;
        }
    }
    let (selected_idx, remainder_idx): (Vec<usize>, Vec<usize>) =
        (0..set.len()).partition(|&i| chosen[i]);
    Ok(Partition {
        selected: set.select(&selected_idx),
        remainder: set.select(&remainder_idx),
        selected_idx,
        remainder_idx,
    })
}

/// Writes a plain (version 1) EMBS stream.
pub fn write_set<W: Write>(set: &EmbeddingSet, sink: W) -> Result<()> {
    write_embs(set, None, sink)
}

/// Reads an EMBS stream. Support-set streams (version 2) are accepted and
/// their `k_default` is dropped; use [`read_embs`] to keep it.
pub fn read_set<R: Read>(source: R) -> Result<EmbeddingSet> {
    read_embs(source).map(|(set, _)| set)
}

pub(crate) fn write_embs<W: Write>(set: &EmbeddingSet, k_default: Option<u32>, sink: W) -> Result<()> {
    set.validate()?;
    let block = set.labels.names.join("\n");
    let block_len = u32::try_from(block.len())
        .map_err(|_| Error::Validation("label block exceeds u32 length".into()))?;

    let mut w = BufWriter::new(sink);
    w.write_all(&EMBS_MAGIC)?;
    let version = if k_default.is_some() {
        EMBS_SUPPORT_VERSION
    } else {
        EMBS_VERSION
    };
    w.write_all(&version.to_le_bytes())?;
    w.write_all(&(set.dim as u32).to_le_bytes())?;
    w.write_all(&(set.records.len() as u64).to_le_bytes())?;
    w.write_all(&block_len.to_le_bytes())?;
    w.write_all(block.as_bytes())?;
    if let Some(k) = k_default {
        w.write_all(&k.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(4 + 4 * set.dim);
    for r in &set.records {
        buf.clear();
        buf.extend_from_slice(&r.label_id.to_le_bytes());
        for v in &r.vector {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Truncated(what.to_string()),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_embs<R: Read>(source: R) -> Result<(EmbeddingSet, Option<u32>)> {
    let mut r = BufReader::new(source);
    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic, "magic")?;
    if magic != EMBS_MAGIC {
        return Err(Error::BadMagic {
            expected: EMBS_MAGIC,
            found: magic,
        });
    }
    let version = read_u32(&mut r, "version")?;
    if version != EMBS_VERSION && version != EMBS_SUPPORT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dim = read_u32(&mut r, "dim")? as usize;
    let mut count_bytes = [0u8; 8];
    read_exact_or(&mut r, &mut count_bytes, "record count")?;
    let count = u64::from_le_bytes(count_bytes);
    let block_len = read_u32(&mut r, "label block length")? as usize;
    let mut block = vec![0u8; block_len];
    read_exact_or(&mut r, &mut block, "label block")?;
    let block = String::from_utf8(block)
        .map_err(|_| Error::Validation("label block is not valid UTF-8".into()))?;
    let labels = if block.is_empty() {
        LabelTable::default()
    } else {
        LabelTable::new(block.split('\n'))?
    };
    let k_default = if version == EMBS_SUPPORT_VERSION {
        Some(read_u32(&mut r, "k_default")?)
    } else {
        None
    };
    if dim == 0 {
        return Err(Error::Validation("dim must be positive".into()));
    }

    // Capacity is bounded so a corrupt count cannot force a huge allocation.
    let mut records = Vec::with_capacity((count as usize).min(1 << 16));
    let mut buf = vec![0u8; 4 + 4 * dim];
    for i in 0..count {
        read_exact_or(&mut r, &mut buf, &format!("record {i} of {count}"))?;
        let label_id = u32::from_le_bytes(buf[..4].try_into().unwrap());
        if label_id as usize >= labels.len() {
            return Err(Error::LabelOutOfRange {
                record: i as usize,
                label_id,
                labels: labels.len(),
            });
        }
        let mut vector = Vec::with_capacity(dim);
        for (c, chunk) in buf[4..].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    record: i as usize,
                    coord: c,
                });
            }
            vector.push(v);
        }
        records.push(EmbeddingRecord { label_id, vector });
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::TrailingBytes);
    }
    Ok((
        EmbeddingSet {
            dim,
            labels,
            records,
        },
        k_default,
    ))
}
