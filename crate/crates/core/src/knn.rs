//! Few-shot support sets and exact k-nearest-neighbor attribution by cosine
//! similarity.
//!
//! Neighbors are ranked by descending similarity with ties broken by the
//! smaller exemplar index. The predicted class has the most votes; vote ties
//! go to the larger summed similarity, then to the smaller label id.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::contrastive::MIN_NORM;
use crate::embedding_store::{
    partition, read_embs, write_embs, EmbeddingRecord, EmbeddingSet, LabelTable,
};
use crate::error::{Error, Result};
use crate::simd;

pub const DEFAULT_K: usize = 11;
pub const DEFAULT_SHOTS: usize = 150;

/// How neighbor votes become a posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Voting {
    /// `posterior[c] = votes[c] / k`.
    #[default]
    Fraction,
    /// Each neighbor votes with weight `1 + similarity`, normalized over the
    /// k neighbors. Falls back to plain fractions if every weight is zero.
    SimilarityWeighted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub posterior: Vec<f64>,
    pub predicted: u32,
    pub confidence: f64,
}

/// Unit-norm labeled exemplars serving as the k-NN knowledge base.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportSet {
    dim: usize,
    labels: LabelTable,
    exemplar_labels: Vec<u32>,
    /// Row-major `n x dim`.
    exemplars: Vec<f64>,
    k_default: usize,
    voting: Voting,
}

impl SupportSet {
    /// Builds a support set from raw vectors, normalizing each one.
    pub fn from_set(set: &EmbeddingSet, k_default: usize) -> Result<Self> {
        let mut exemplars = Vec::with_capacity(set.len() * set.dim());
        for (row, r) in set.records().iter().enumerate() {
            let v: Vec<f64> = r.vector.iter().map(|&x| x as f64).collect();
            let unit = unit_vector(&v).ok_or(Error::DegenerateVector { row })?;
            exemplars.extend(unit);
        }
        let support = SupportSet {
            dim: set.dim(),
            labels: set.labels().clone(),
            exemplar_labels: set.label_ids(),
            exemplars,
            k_default,
            voting: Voting::Fraction,
        };
        support.check_k(k_default)?;
        Ok(support)
    }

    pub fn with_voting(mut self, voting: Voting) -> Self {
        self.voting = voting;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &LabelTable {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.exemplar_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exemplar_labels.is_empty()
    }

    pub fn k_default(&self) -> usize {
        self.k_default
    }

    pub fn voting(&self) -> Voting {
        self.voting
    }

    pub fn exemplar_labels(&self) -> &[u32] {
        &self.exemplar_labels
    }

    pub fn exemplar(&self, i: usize) -> &[f64] {
        &self.exemplars[i * self.dim..(i + 1) * self.dim]
    }

    /// Label ids with at least one exemplar.
    pub fn classes(&self) -> Vec<u32> {
        let mut seen = vec![false; self.labels.len()];
        for &l in &self.exemplar_labels {
            seen[l as usize] = true;
        }
        (0..self.labels.len() as u32).filter(|&c| seen[c as usize]).collect()
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k == 0 {
            return Err(Error::Config("k must be positive".into()));
        }
        if k > self.len() {
            return Err(Error::Config(format!(
                "k = {k} exceeds the {} available exemplars",
                self.len()
            )));
        }
        Ok(())
    }

    fn as_set(&self) -> Result<EmbeddingSet> {
        let records = (0..self.len())
            .map(|i| EmbeddingRecord {
                label_id: self.exemplar_labels[i],
                vector: self.exemplar(i).iter().map(|&v| v as f32).collect(),
            })
            .collect();
        EmbeddingSet::new(self.dim, self.labels.clone(), records)
    }
}

fn unit_vector(v: &[f64]) -> Option<Vec<f64>> {
    let norm = v.iter().fold(0.0, |acc, x| acc + x * x).sqrt();
    (norm > MIN_NORM).then(|| v.iter().map(|x| x / norm).collect())
}

/// Draws `shots_per_class` exemplars of every class present in `data` (all
/// of them for smaller classes) and normalizes them. Also returns the
/// original indices of the drawn records.
pub fn build_support_with_indices(
    data: &EmbeddingSet,
    shots_per_class: usize,
    k: usize,
    seed: u64,
) -> Result<(SupportSet, Vec<usize>)> {
    if data.is_empty() {
        return Err(Error::Validation("cannot build a support set from empty data".into()));
    }
    if shots_per_class == 0 {
        return Err(Error::Config("shots_per_class must be positive".into()));
    }
    let ids = data.present_label_ids();
    let part = partition(data, &ids, Some(shots_per_class), seed)?;
    let support = SupportSet::from_set(&part.selected, k)?;
    Ok((support, part.selected_idx))
}

pub fn build_support(
    data: &EmbeddingSet,
    shots_per_class: usize,
    k: usize,
    seed: u64,
) -> Result<SupportSet> {
    build_support_with_indices(data, shots_per_class, k, seed).map(|(s, _)| s)
}

pub fn classify(support: &SupportSet, query: &[f64], k: Option<usize>) -> Result<Prediction> {
    let k = k.unwrap_or(support.k_default);
    support.check_k(k)?;
    if query.len() != support.dim {
        return Err(Error::Dimension {
            expected: support.dim,
            found: query.len(),
        });
    }
    let q = unit_vector(query).ok_or(Error::DegenerateVector { row: 0 })?;
    let mut sims = vec![0.0; support.len()];
    simd::similarities(&q, 1, &support.exemplars, support.dim, &mut sims);
    Ok(vote(support, &sims, k))
}

/// Element-wise [`classify`] over every record of `queries`, in order.
/// Similarities are computed in query blocks against exemplar tiles with
/// the same per-pair arithmetic as the single-query path.
pub fn classify_batch(
    support: &SupportSet,
    queries: &EmbeddingSet,
    k: Option<usize>,
) -> Result<Vec<Prediction>> {
    let k = k.unwrap_or(support.k_default);
    support.check_k(k)?;
    if queries.is_empty() {
        return Ok(Vec::new());
    }
    if queries.dim() != support.dim {
        return Err(Error::Dimension {
            expected: support.dim,
            found: queries.dim(),
        });
    }
    const CHUNK: usize = 256;
    let d = support.dim;
    let n = support.len();
    let mut out = Vec::with_capacity(queries.len());
    let mut block = Vec::with_capacity(CHUNK * d);
    let mut sims = vec![0.0; CHUNK * n];
    for (chunk_no, chunk) in queries.records().chunks(CHUNK).enumerate() {
        block.clear();
        for (j, r) in chunk.iter().enumerate() {
            let v: Vec<f64> = r.vector.iter().map(|&x| x as f64).collect();
            let unit = unit_vector(&v).ok_or(Error::DegenerateVector {
                row: chunk_no * CHUNK + j,
            })?;
            block.extend(unit);
        }
        let rows = chunk.len();
        simd::similarities(&block, rows, &support.exemplars, d, &mut sims[..rows * n]);
        for j in 0..rows {
            out.push(vote(support, &sims[j * n..(j + 1) * n], k));
        }
    }
    Ok(out)
}

/// Indices of the `k` most similar exemplars, ordered by descending
/// similarity then ascending index.
pub fn top_k(sims: &[f64], k: usize) -> Vec<usize> {
    // Sorted buffer of (sim, idx); small k makes insertion cheapest.
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for (i, &s) in sims.iter().enumerate() {
        if best.len() == k {
            let (ws, _) = best[k - 1];
            // Later indices lose ties, so only a strictly larger value enters.
            if !(s > ws) {
                continue;
            }
        }
        let pos = best.partition_point(|&(bs, _)| bs >= s);
        best.insert(pos, (s, i));
        best.truncate(k);
    }
    best.into_iter().map(|(_, i)| i).collect()
}

fn vote(support: &SupportSet, sims: &[f64], k: usize) -> Prediction {
    let neighbors = top_k(sims, k);
    let classes = support.labels.len();
    let mut votes = vec![0usize; classes];
    let mut sim_sum = vec![0.0; classes];
    let mut weight = vec![0.0; classes];
    for &i in &neighbors {
        let c = support.exemplar_labels[i] as usize;
        votes[c] += 1;
        sim_sum[c] += sims[i];
        weight[c] += 1.0 + sims[i];
    }
    let weight_total: f64 = weight.iter().sum();
    let posterior: Vec<f64> = match support.voting {
        Voting::SimilarityWeighted if weight_total > 0.0 => {
            weight.iter().map(|w| w / weight_total).collect()
        }
        _ => votes.iter().map(|&v| v as f64 / k as f64).collect(),
    };

    let mut predicted = 0usize;
    for c in 1..classes {
        let better = match posterior[c].partial_cmp(&posterior[predicted]) {
            Some(std::cmp::Ordering::Greater) => true,
            Some(std::cmp::Ordering::Equal) => sim_sum[c] > sim_sum[predicted],
            _ => false,
        };
        if better {
            predicted = c;
        }
    }
    Prediction {
        confidence: posterior[predicted],
        posterior,
        predicted: predicted as u32,
    }
}

/// Writes the support set as an EMBS version-2 stream carrying `k_default`.
pub fn write_support<W: Write>(support: &SupportSet, sink: W) -> Result<()> {
    let k = u32::try_from(support.k_default)
        .map_err(|_| Error::Validation("k_default does not fit in u32".into()))?;
    write_embs(&support.as_set()?, Some(k), sink)
}

/// Reads a version-2 EMBS stream; stored vectors are renormalized in `f64`.
pub fn read_support<R: Read>(source: R) -> Result<SupportSet> {
    let (set, k) = read_embs(source)?;
    let k = k.ok_or_else(|| {
        Error::Validation("support sets are stored as EMBS version 2 with k_default".into())
    })?;
    SupportSet::from_set(&set, k as usize)
}
